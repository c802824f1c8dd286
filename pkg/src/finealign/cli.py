"""Command-line entry point: ``finealign <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import yaml

from . import datamodel, datasetbuilder, evalsuite
from .encoders import TextEncoderConfig, VisionEncoderConfig

logger = logging.getLogger("finealign")

ENV_PREFIX = "FINEALIGN_"
METRICS = ("dbi", "acc1", "map", "miou", "zsc", "recall")


class ConfigError(ValueError):
    pass


def _defaults() -> dict:
    from .trainer import EvalConfig, TrainConfig

    def strip(d):
        d = dict(d)
        d.pop("seed", None)
        return d

    return {
        "seed": 0,
        "data": {"dir": None, "eval_dir": None, "n": 64, "eval_n": 32, "rows": 2, "cols": 2,
                 "num_classes": 4, "image_size": 32, "noise": 0.05, "color_jitter": 0.0, "cell_jitter": 0.3},
        "vision": strip(asdict(VisionEncoderConfig())),
        "text": strip(asdict(TextEncoderConfig())),
        "train": strip(TrainConfig().to_dict()),
        "eval": asdict(EvalConfig()),
    }


def _merge(base: dict, over: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where}{key} must be a section")
            out[key] = _merge(out[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def _set_path(tree: dict, dotted: str, value) -> dict:
    keys = dotted.split(".")
    node: dict = {}
    root = node
    for k in keys[:-1]:
        node[k] = {}
        node = node[k]
    node[keys[-1]] = value
    return _merge(tree, root, "")


def env_overrides(environ=None) -> dict:
    """``FINEALIGN_TRAIN__LEARNING_RATE=1e-4`` sets ``train.learning_rate``."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        node = out
        for k in path[:-1]:
            node = node.setdefault(k, {})
        node[path[-1]] = yaml.safe_load(raw)
    return out


@dataclass
class RunConfig:
    """Fully merged configuration; precedence CLI > environment > file > defaults."""

    tree: dict
    config_path: str | None = None
    config_text: str | None = None

    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    def vision(self) -> VisionEncoderConfig:
        return VisionEncoderConfig(**self.tree["vision"])

    def text(self) -> TextEncoderConfig:
        return TextEncoderConfig(**self.tree["text"])

    def train(self):
        from .trainer import TrainConfig
        return TrainConfig(**self.tree["train"], seed=self.seed)

    def eval(self):
        from .trainer import EvalConfig
        return EvalConfig(**self.tree["eval"])

    def scene_spec(self, seed: int) -> datamodel.SyntheticSceneSpec:
        d = self.tree["data"]
        return datamodel.SyntheticSceneSpec(rows=d["rows"], cols=d["cols"], num_classes=d["num_classes"],
                                            image_size=d["image_size"], noise=d["noise"], seed=seed,
                                            color_jitter=d["color_jitter"], cell_jitter=d["cell_jitter"])

    def validate(self) -> None:
        try:
            self.vision(), self.text(), self.train(), self.eval()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def dump(self, run_dir: Path) -> None:
        run_dir.mkdir(parents=True, exist_ok=True)
        if self.config_text is not None:
            (run_dir / "config_input.yaml").write_text(self.config_text)
        (run_dir / "config_resolved.yaml").write_text(yaml.safe_dump(self.tree, sort_keys=True))


def resolve_config(config_path=None, cli: dict | None = None, sets=(), environ=None, preset: str | None = None) -> RunConfig:
    """Merge defaults, file, environment, preset and CLI flags into a :class:`RunConfig`."""
    tree = _defaults()
    text = None
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        tree = _merge(tree, loaded, "")
    tree = _merge(tree, env_overrides(environ), "")
    if preset is not None:
        from .trainer import PRESETS
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        tree = _merge(tree, {"train": PRESETS[preset]}, "")
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        tree = _set_path(tree, key.strip(), yaml.safe_load(raw))
    for dotted, value in (cli or {}).items():
        if value is not None:
            tree = _set_path(tree, dotted, value)
    cfg = RunConfig(tree, None if config_path is None else str(config_path), text)
    cfg.validate()
    return cfg


# -- data ---------------------------------------------------------------------

@dataclass
class Dataset:
    records: list
    masks: list | None
    classes: list[str]


def load_dataset(directory, need_masks: bool = False) -> Dataset:
    d = Path(directory)
    manifest = d / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    records = datamodel.load_manifest(manifest)
    classes_file = d / "classes.json"
    if classes_file.exists():
        classes = json.loads(classes_file.read_text())
    else:
        classes = sorted({o.category for r in records for o in r.objects})
    masks = None
    if (d / "masks").is_dir():
        masks = datamodel.load_masks(records, d / "masks")
    elif need_masks:
        raise FileNotFoundError(f"mask directory not found: {d / 'masks'}")
    return Dataset(records, masks, classes)


def synthetic_dataset(cfg: RunConfig, seed: int, n: int) -> Dataset:
    spec = cfg.scene_spec(seed)
    records, masks = datamodel.synthesize_dataset(spec, n)
    return Dataset(records, masks, spec.classes())


def train_and_eval_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.tree["data"]
    train = load_dataset(d["dir"]) if d["dir"] else synthetic_dataset(cfg, cfg.seed, d["n"])
    if d["eval_dir"]:
        ev = load_dataset(d["eval_dir"], need_masks=True)
    elif d["dir"] is None:
        ev = synthetic_dataset(cfg, cfg.seed + 1000, d["eval_n"])
    else:
        ev = train
    return train, ev


# -- subcommands ----------------------------------------------------------------

def cmd_synth_data(args, cfg: RunConfig) -> int:
    ds = synthetic_dataset(cfg, cfg.seed, cfg.tree["data"]["n"])
    manifest = datamodel.save_synthetic(ds.records, ds.masks, args.out)
    (Path(args.out) / "classes.json").write_text(json.dumps(ds.classes))
    print(manifest)
    return 0


def cmd_build_dataset(args, cfg: RunConfig) -> int:
    records = datasetbuilder.load_annotations(json.loads(Path(args.annotations).read_text()))
    if args.captioner == "mock":
        client = datasetbuilder.MockCaptioner(seed=cfg.seed)
    else:
        if not args.responses:
            raise ConfigError("--captioner recorded needs --responses")
        table = json.loads(Path(args.responses).read_text())
        client = datasetbuilder.RecordedCaptioner({(r["object_info"], r["kind"]): r["caption"] for r in table})
    kinds = datasetbuilder.KINDS if args.kind == "both" else (args.kind,)
    for kind in kinds:
        records = datasetbuilder.recaption(records, client, kind, retries=args.retries,
                                           max_workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    datamodel.save_manifest(records, out)
    failed = sum(any(k.startswith("caption_error") for k in r.meta) for r in records)
    if args.qa_sheet:
        n = min(args.qa_n, len(records))
        _, sheet = datasetbuilder.qa_sample(records, n, np.random.default_rng(cfg.seed))
        Path(args.qa_sheet).write_text(sheet)
    print(json.dumps({"manifest": str(out), "records": len(records), "flagged": failed}, sort_keys=True))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .trainer import TrainingAborted, run_stage
    tc = cfg.train()
    if args.dry_run:
        print(json.dumps(cfg.tree, sort_keys=True, indent=2))
        return 0
    if tc.stage == "s2" and args.init_from is None:
        warnings.warn("stage s2 without --init-from: training from a fresh initialization", stacklevel=1)
    if args.init_from is not None and not Path(args.init_from).exists():
        print(f"error: checkpoint not found: {args.init_from}", file=sys.stderr)
        return 1
    train, ev = train_and_eval_data(cfg)
    total = tc.total_steps or (len(train.records) // tc.batch_size) * tc.epochs
    if total < max(tc.warmup_steps, 1):
        raise ConfigError(f"{len(train.records)} records at batch size {tc.batch_size} for {tc.epochs} epochs "
                          f"give {total} steps, fewer than warmup_steps {tc.warmup_steps}")
    run_dir = Path(args.run_dir)
    cfg.dump(run_dir)
    try:
        res = run_stage(tc, train.records, run_dir, eval_records=ev.records, eval_masks=ev.masks,
                        classes=ev.classes if ev.masks is not None else None, eval_config=cfg.eval(),
                        init_from=args.init_from, resume_from=args.resume_from,
                        vision=cfg.vision(), text=cfg.text(), snapshot_every=args.snapshot_every)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return 1
    if res.reports:
        (run_dir / "metrics.json").write_text(json.dumps(res.reports[-1], sort_keys=True) + "\n")
    print(res.checkpoint)
    return 0


def _load_bundle(path):
    from .encoders import load_checkpoint
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)[0]


def cmd_eval(args, cfg: RunConfig) -> int:
    from .trainer import evaluate
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise ConfigError(f"unknown metrics {bad}; choose from {list(METRICS)}")
    bundle = _load_bundle(args.checkpoint)
    d = cfg.tree["data"]
    src = d["eval_dir"] or d["dir"]
    ds = load_dataset(src, need_masks=True) if src else synthetic_dataset(cfg, cfg.seed + 1000, d["eval_n"])
    report = evaluate(bundle, ds.records, ds.masks, ds.classes, cfg.eval(), cfg.seed, metrics)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _read_image(path) -> np.ndarray:
    if not Path(path).exists():
        raise FileNotFoundError(f"image not found: {path}")
    return datamodel.read_image(path)


def cmd_segment(args, cfg: RunConfig) -> int:
    import torch
    from .trainer import class_text_embeddings
    from PIL import Image
    bundle = _load_bundle(args.checkpoint)
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    if not classes:
        raise ConfigError("--classes needs at least one class name")
    image = _read_image(args.image)
    with torch.no_grad():
        dense = bundle.student.dense(torch.as_tensor(image[None], dtype=bundle.logit_scale.dtype))[0].numpy()
    texts = class_text_embeddings(bundle, classes, cfg.tree["eval"]["template"])
    pred = evalsuite.ovss_segment(dense, texts)
    up = evalsuite.upsample_nearest(pred, *image.shape[:2]).astype(np.uint8)
    Image.fromarray(up, mode="L").save(args.out)
    summary = {"out": str(args.out), "classes": classes,
               "cell_counts": {c: int((pred == k).sum()) for k, c in enumerate(classes)}}
    if args.mask:
        summary["miou"] = evalsuite.miou(up, datamodel.read_mask(args.mask), len(classes))
    print(json.dumps(summary, sort_keys=True))
    return 0


def render_heatmap(values: np.ndarray, size: int, anchor: tuple[int, int] | None = None):
    """Cosine map in [-1, 1] to an RGB PIL image, anchor cell outlined."""
    from matplotlib import colormaps
    from PIL import Image, ImageDraw
    rgb = (colormaps["viridis"]((np.clip(values, -1, 1) + 1) / 2)[..., :3] * 255).astype(np.uint8)
    h, w = values.shape
    img = Image.fromarray(rgb).resize((size * w // max(h, w), size * h // max(h, w)), Image.NEAREST)
    if anchor is not None:
        ch, cw = img.height / h, img.width / w
        r, c = anchor
        ImageDraw.Draw(img).rectangle([c * cw, r * ch, (c + 1) * cw - 1, (r + 1) * ch - 1],
                                      outline=(255, 0, 0), width=max(1, int(cw // 8)))
    return img


def cmd_visualize(args, cfg: RunConfig) -> int:
    import torch
    if (args.anchor is None) == (not args.cls):
        raise ConfigError("give exactly one of --anchor ROW,COL or --cls")
    bundle = _load_bundle(args.checkpoint)
    image = _read_image(args.image)
    x = torch.as_tensor(image[None], dtype=bundle.logit_scale.dtype)
    with torch.no_grad():
        dense = bundle.student.dense(x)[0].numpy()
        cls = bundle.student(x).cls[0].numpy()
    h, w = dense.shape[:2]
    if args.cls:
        anchor_cell, values = None, evalsuite.similarity_map(dense, cls)
    else:
        try:
            r, c = (int(v) for v in args.anchor.split(","))
        except ValueError:
            raise ConfigError(f"--anchor expects ROW,COL, got {args.anchor!r}") from None
        if not (0 <= r < h and 0 <= c < w):
            raise ConfigError(f"anchor {(r, c)} outside the {h}x{w} grid")
        anchor_cell, values = (r, c), evalsuite.similarity_map(dense, (r, c))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    render_heatmap(values, args.size, anchor_cell).save(out)
    np.save(out.with_suffix(".npy"), values)
    print(out)
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file with sections data/vision/text/train/eval")
    common.add_argument("--seed", type=int, help="root seed (split into init/data/crop/eval streams)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config value, e.g. train.w_dis=0 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = argparse.ArgumentParser(prog="finealign", description="Region-text alignment toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", parents=[common], help="write a synthetic labeled scene dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n", type=int, help="number of images")
    s.add_argument("--num-classes", type=int, help="classes tiling each image")
    s.add_argument("--noise", type=float, help="pixel noise sigma")
    s.set_defaults(func=cmd_synth_data, cli=lambda a: {"data.n": a.n, "data.num_classes": a.num_classes,
                                                      "data.noise": a.noise})

    s = sub.add_parser("build-dataset", parents=[common], help="caption detection annotations into a manifest")
    s.add_argument("--annotations", required=True, help="COCO-style or native detection JSON")
    s.add_argument("--out", required=True, help="output manifest path")
    s.add_argument("--captioner", choices=("mock", "recorded"), default="mock", help="captioner client")
    s.add_argument("--responses", help="JSON list of {object_info, kind, caption} for the recorded client")
    s.add_argument("--kind", choices=("short", "long", "both"), default="both", help="captions to generate")
    s.add_argument("--retries", type=int, default=2, help="retries per record before flagging")
    s.add_argument("--workers", type=int, default=1, help="concurrent client calls")
    s.add_argument("--qa-sheet", help="write a QA review CSV here")
    s.add_argument("--qa-n", type=int, default=200, help="QA sample size")
    s.set_defaults(func=cmd_build_dataset, cli=lambda a: {})

    s = sub.add_parser("train", parents=[common], help="run one training stage")
    s.add_argument("--stage", choices=("s1", "s2"), help="s1: global + distillation, s2: global + local")
    s.add_argument("--preset", help="named hyperparameter preset (toy, paper-s1, paper-s2, ...)")
    s.add_argument("--run-dir", default="runs/latest", help="output directory")
    s.add_argument("--data", help="training dataset directory (default: synthesize)")
    s.add_argument("--eval-data", help="labeled evaluation dataset directory")
    s.add_argument("--init-from", help="checkpoint to start from")
    s.add_argument("--resume-from", help="snapshot to resume")
    s.add_argument("--epochs", type=int, help="epochs")
    s.add_argument("--lr", type=float, help="peak learning rate")
    s.add_argument("--batch-size", type=int, help="batch size")
    s.add_argument("--weight-decay", type=float, help="AdamW weight decay")
    s.add_argument("--warmup", type=int, help="warmup steps")
    s.add_argument("--strategy", choices=("frozen", "ema", "online"), help="teacher update strategy")
    s.add_argument("--region-mode", choices=("cls_of_crop", "pooled_patches_of_crop", "roi_embedding"),
                   help="region feature for the local loss")
    s.add_argument("--snapshot-every", type=int, help="write a resumable snapshot every N steps")
    s.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    s.set_defaults(func=cmd_train, cli=lambda a: {
        "train.stage": a.stage, "data.dir": a.data, "data.eval_dir": a.eval_data, "train.epochs": a.epochs,
        "train.learning_rate": a.lr, "train.batch_size": a.batch_size, "train.weight_decay": a.weight_decay,
        "train.warmup_steps": a.warmup, "train.strategy": a.strategy, "train.region_mode": a.region_mode})

    s = sub.add_parser("eval", parents=[common], help="compute a metric report for a checkpoint")
    s.add_argument("--checkpoint", required=True, help="checkpoint .npz")
    s.add_argument("--data", help="labeled dataset directory (default: synthesize)")
    s.add_argument("--metrics", default=",".join(METRICS), help="comma list of " + ",".join(METRICS))
    s.add_argument("--out", help="also write the JSON report here")
    s.set_defaults(func=cmd_eval, cli=lambda a: {"data.eval_dir": a.data})

    s = sub.add_parser("segment", parents=[common], help="open-vocabulary segmentation of one image")
    s.add_argument("--checkpoint", required=True, help="checkpoint .npz")
    s.add_argument("--image", required=True, help="input PNG")
    s.add_argument("--classes", required=True, help="comma-separated class names")
    s.add_argument("--out", required=True, help="output label PNG (pixel value = class index)")
    s.add_argument("--mask", help="ground-truth mask PNG; adds mIoU to the summary")
    s.set_defaults(func=cmd_segment, cli=lambda a: {})

    s = sub.add_parser("visualize", parents=[common], help="cosine-similarity heatmap of dense features")
    s.add_argument("--checkpoint", required=True, help="checkpoint .npz")
    s.add_argument("--image", required=True, help="input PNG")
    s.add_argument("--anchor", help="anchor grid cell ROW,COL")
    s.add_argument("--cls", action="store_true", help="use the image CLS embedding as anchor")
    s.add_argument("--out", required=True, help="output PNG; raw values go to the same path with .npy")
    s.add_argument("--size", type=int, default=256, help="longest side of the heatmap in pixels")
    s.set_defaults(func=cmd_visualize, cli=lambda a: {})
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cli = {"seed": args.seed, **args.cli(args)}
        cfg = resolve_config(args.config, cli, args.set, preset=getattr(args, "preset", None))
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
