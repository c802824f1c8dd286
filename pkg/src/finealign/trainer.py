"""Two-stage training loop: schedules, steps, teacher updates, evaluation events, resume."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import evalsuite
from .datamodel import (DEFAULT_TEMPLATE, GlobalBatch, ImageRecord, RegionBatch, build_region_batch,
                        make_global_batch, template_category)
from .encoders import (TeacherStudentBundle, TextEncoderConfig, VisionEncoderConfig, bundle_config,
                       load_checkpoint, save_checkpoint, update_teacher)
from .losses import LossWeights, loss_dis, loss_glo, loss_loc, positive_sets, total_loss
from .regionfeat import CropPlan, crop_batch, plan_crops, region_features, roi_pool

logger = logging.getLogger(__name__)

STREAMS = ("init", "data", "crop", "eval")

PRESETS: dict[str, dict] = {
    "toy": dict(learning_rate=1e-3, epochs=1, weight_decay=0.1, warmup_steps=10, batch_size=8),
    "paper-s1": dict(stage="s1", learning_rate=1e-6, epochs=1, weight_decay=1.0, warmup_steps=1000,
                     batch_size=40, strategy="online", crop_method="random"),
    "paper-s2": dict(stage="s2", learning_rate=4e-9, epochs=10, weight_decay=1.0, warmup_steps=250,
                     batch_size=40),
    "paper-analysis-rs5m": dict(learning_rate=1e-6, epochs=1, weight_decay=0.1, warmup_steps=1000,
                                batch_size=40),
    "paper-analysis-mgrs": dict(learning_rate=4e-7, epochs=10, weight_decay=1.0, warmup_steps=250,
                                batch_size=40),
}


class TrainingAborted(RuntimeError):
    pass


class ConfigMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: str = "s1"
    learning_rate: float = 1e-3
    epochs: int = 1
    weight_decay: float = 0.1
    warmup_steps: int = 10
    batch_size: int = 8
    schedule: str = "cosine"
    optimizer: str = "adamw"
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-6
    grad_clip: float | None = 1.0
    seed: int = 0
    strategy: str = "online"
    momentum: float = 0.99
    text_frozen: bool = False
    crop_method: str = "random"
    crops_per_image: int = 4
    crop_scale: tuple = (0.2, 0.8)
    w_glo: float = 1.0
    w_loc: float = 1.0
    w_dis: float = 0.1
    region_mode: str = "cls_of_crop"
    regions_per_batch: int = 16
    region_source: str = "batch"
    caption: str = "short"
    template: str = DEFAULT_TEMPLATE
    total_steps: int | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.crop_scale = tuple(self.crop_scale)
        if self.stage not in ("s1", "s2"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.schedule != "cosine" or self.optimizer != "adamw":
            raise ValueError("only cosine schedule with AdamW is supported")
        if self.region_source not in ("batch", "shard"):
            raise ValueError("region_source must be 'batch' or 'shard'")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_glo, self.w_loc, self.w_dis)

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["crop_scale"] = list(self.crop_scale)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EvalConfig:
    n_cap: int | None = 8
    n_pairs: int = 500
    max_images: int = 300
    coherence_mode: str = "per_image"
    dbi_normalize: bool = False
    template: str = DEFAULT_TEMPLATE


def lr_at(step: int, config: TrainConfig, total_steps: int | None = None) -> float:
    """Linear warmup from 0 to the base rate, then cosine decay to 0 at ``total_steps``."""
    total = total_steps if total_steps is not None else config.total_steps
    if total is None:
        raise ValueError("total_steps unknown")
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = config.warmup_steps
    if total < warm:
        raise ValueError(f"total_steps {total} < warmup_steps {warm}")
    base = config.learning_rate
    if step < warm:
        return base * step / warm
    if step >= total:
        return 0.0
    progress = (step - warm) / (total - warm)
    return 0.5 * base * (1.0 + math.cos(math.pi * progress))


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    position: int = 0  # batches consumed in the current epoch
    order: list[int] = field(default_factory=list)
    rng: dict[str, dict] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


@dataclass
class LossReport:
    step: int
    lr: float
    total: float
    components: dict[str, float]
    batch_ids: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


def build_bundle(config: TrainConfig, vision: VisionEncoderConfig | None = None,
                 text: TextEncoderConfig | None = None, shared_temperature: bool = True) -> TeacherStudentBundle:
    init = rng_streams(config.seed)["init"]
    vision = replace(vision or VisionEncoderConfig(), seed=int(init.integers(2 ** 31)))
    text = replace(text or TextEncoderConfig(), seed=int(init.integers(2 ** 31)))
    return TeacherStudentBundle(vision, text, strategy=config.strategy, momentum=config.momentum,
                                text_frozen=config.text_frozen, shared_temperature=shared_temperature)


def make_optimizer(bundle: TeacherStudentBundle, config: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in bundle.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if p.ndim < 2 or "logit_scale" in name else decay).append(p)
    groups = [{"params": decay, "weight_decay": config.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=config.learning_rate, betas=config.betas, eps=config.eps)


class Trainer:
    """Owns the bundle, optimizer, RNG streams and step counter for one stage."""

    def __init__(self, bundle: TeacherStudentBundle, config: TrainConfig, records: Sequence[ImageRecord]):
        if config.strategy != bundle.strategy:
            raise ValueError(f"config strategy {config.strategy!r} != bundle strategy {bundle.strategy!r}")
        self.bundle = bundle
        self.config = config
        self.records = list(records)
        if len(self.records) < config.batch_size:
            raise ValueError("dataset smaller than one batch")
        bundle.set_text_frozen(config.text_frozen)
        bundle.momentum = config.momentum
        self.optimizer = make_optimizer(bundle, config)
        self.rngs = rng_streams(config.seed)
        self.steps_per_epoch = len(self.records) // config.batch_size
        self.total_steps = config.total_steps or self.steps_per_epoch * config.epochs
        if self.total_steps < config.warmup_steps:
            raise ValueError(f"total_steps {self.total_steps} < warmup_steps {config.warmup_steps}")
        self.state = TrainState()

    # -- data --------------------------------------------------------------
    def next_indices(self) -> list[int]:
        st = self.state
        if not st.order or st.position >= self.steps_per_epoch:
            if st.order:
                st.epoch += 1
            st.order = [int(i) for i in self.rngs["data"].permutation(len(self.records))]
            st.position = 0
        b = self.config.batch_size
        idx = st.order[st.position * b:(st.position + 1) * b]
        st.position += 1
        return idx

    def crop_plans(self, n: int) -> list[CropPlan]:
        c = self.config
        return [plan_crops(c.crop_method, c.crops_per_image, self.rngs["crop"], c.crop_scale) for _ in range(n)]

    def region_batch(self, indices: Sequence[int]) -> RegionBatch:
        c = self.config
        pool = indices if c.region_source == "batch" else None
        return build_region_batch(self.records, c.regions_per_batch, self.rngs["data"], c.template, pool)

    # -- state -------------------------------------------------------------
    def snapshot(self) -> dict:
        st = self.state
        return {
            "config_hash": self.config.hash(),
            "state": {"step": st.step, "epoch": st.epoch, "position": st.position, "order": list(st.order),
                      "history": list(st.history),
                      "rng": {k: g.bit_generator.state for k, g in self.rngs.items()}},
            "model": {k: v.clone() for k, v in self.bundle.state_dict().items()},
            "optimizer": self.optimizer.state_dict(),
        }

    def restore(self, snap: dict) -> None:
        if snap["config_hash"] != self.config.hash():
            raise ConfigMismatch(f"snapshot config hash {snap['config_hash']} != {self.config.hash()}")
        self.bundle.load_state_dict(snap["model"])
        self.optimizer.load_state_dict(snap["optimizer"])
        s = snap["state"]
        for k, g in self.rngs.items():
            g.bit_generator.state = s["rng"][k]
        self.state = TrainState(s["step"], s["epoch"], s["position"], list(s["order"]), {}, list(s["history"]))

    def save_snapshot(self, path) -> None:
        torch.save(self.snapshot(), path)

    def load_snapshot(self, path) -> None:
        self.restore(torch.load(path, weights_only=False))

    # -- steps -------------------------------------------------------------
    def step(self) -> LossReport:
        idx = self.next_indices()
        batch = make_global_batch(self.records, idx, self.config.caption)
        if self.config.stage == "s1":
            return train_step(self, batch, crops=self.crop_plans(len(idx)))
        return train_step(self, batch, regions=self.region_batch(idx))


def _images_tensor(images, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(images), dtype=dtype)


def compute_losses(bundle: TeacherStudentBundle, batch: GlobalBatch, config: TrainConfig,
                   records: Sequence[ImageRecord] | None = None, crops: Sequence[CropPlan] | None = None,
                   regions: RegionBatch | None = None) -> dict[str, torch.Tensor]:
    dtype = bundle.logit_scale.dtype
    images = _images_tensor(batch.images, dtype)
    enc = bundle.student(images)
    text = bundle.text(batch.captions).cls
    comps = {"glo": loss_glo(enc.cls, text, bundle.temperature("glo"))}
    if crops is not None:
        img_idx = [i for i, plan in enumerate(crops) for _ in plan.boxes]
        boxes = [b for plan in crops for b in plan.boxes]
        p_roi = torch.stack([roi_pool(enc.patches[i], b) for i, b in zip(img_idx, boxes)])
        views = crop_batch(images, img_idx, boxes, bundle.teacher.config.image_size)
        if bundle.detach_teacher:
            with torch.no_grad():
                local = bundle.teacher(views).patches
        else:
            local = bundle.teacher(views).patches
        p_local = local.flatten(1, 2).mean(1)
        comps["dis"] = loss_dis(p_roi, p_local, detach_teacher=bundle.detach_teacher)
    if regions is not None:
        src = sorted({e[0] for e in regions.entries})
        pos = {r: k for k, r in enumerate(src)}
        in_batch = {r: k for k, r in enumerate(batch.indices)}
        if all(r in in_batch for r in src):
            region_images, lookup, patches = images, in_batch, enc.patches
        else:
            region_images = _images_tensor(np.stack([records[r].image for r in src]), dtype)
            lookup, patches = pos, None
        vr = region_features(bundle.student, region_images, [lookup[e[0]] for e in regions.entries],
                             [e[1] for e in regions.entries], config.region_mode, full_patches=patches)
        tc = bundle.text(regions.category_texts).cls
        comps["loc"] = loss_loc(vr, tc, positive_sets(regions.categories), bundle.temperature("loc"))
    return comps


def train_step(trainer: Trainer, batch: GlobalBatch, crops: Sequence[CropPlan] | None = None,
               regions: RegionBatch | None = None) -> LossReport:
    """One optimizer step on all unfrozen parameters, followed by the teacher update."""
    cfg, bundle, st = trainer.config, trainer.bundle, trainer.state
    if cfg.stage == "s1" and crops is None:
        raise ValueError("stage s1 needs crop plans")
    if cfg.stage == "s2" and regions is None:
        raise ValueError("stage s2 needs a region batch")
    lr = lr_at(st.step, cfg, trainer.total_steps)
    for group in trainer.optimizer.param_groups:
        group["lr"] = lr
    bundle.train()
    comps = compute_losses(bundle, batch, cfg, trainer.records, crops, regions)
    total = total_loss(comps, cfg.weights, cfg.stage)
    ids = [trainer.records[i].image_id for i in batch.indices]
    if not torch.isfinite(total):
        raise TrainingAborted(f"non-finite loss at step {st.step}; batch ids {ids}; "
                              f"components { {k: v.item() for k, v in comps.items()} }")
    trainer.optimizer.zero_grad(set_to_none=True)
    total.backward()
    params = bundle.trainable_parameters()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    trainer.optimizer.step()
    update_teacher(bundle)
    report = LossReport(st.step, lr, total.item(), {k: v.item() for k, v in comps.items()}, ids)
    st.step += 1
    st.history.append({"step": report.step, "total": report.total, **report.components})
    return report


# -- evaluation ---------------------------------------------------------------

@torch.no_grad()
def class_text_embeddings(bundle: TeacherStudentBundle, classes: Sequence[str],
                          template: str = DEFAULT_TEMPLATE) -> np.ndarray:
    return bundle.text([template_category(c, template) for c in classes]).cls.numpy()


@torch.no_grad()
def dense_grids(encoder, records: Sequence[ImageRecord], chunk: int = 64) -> list[np.ndarray]:
    out = []
    dtype = next(encoder.parameters()).dtype
    for i in range(0, len(records), chunk):
        imgs = _images_tensor(np.stack([r.image for r in records[i:i + chunk]]), dtype)
        out.extend(encoder.dense(imgs).numpy())
    return out


@torch.no_grad()
def evaluate(bundle: TeacherStudentBundle, records: Sequence[ImageRecord], masks: Sequence[np.ndarray],
             classes: Sequence[str], config: EvalConfig, seed: int,
             metrics: Sequence[str] = ("dbi", "acc1", "map", "miou", "zsc", "recall")) -> evalsuite.MetricReport:
    """Metric report for the student encoder on labeled scenes."""
    rng = rng_streams(seed)["eval"]
    bundle.eval()
    records, masks = list(records)[: config.max_images], list(masks)[: config.max_images]
    report = evalsuite.MetricReport(seed=seed, sampling={
        "n_cap": config.n_cap, "n_pairs": config.n_pairs, "images": len(records),
        "coherence_mode": config.coherence_mode})
    dense = dense_grids(bundle.student, records)
    texts = class_text_embeddings(bundle, classes, config.template)
    if "dbi" in metrics or "acc1" in metrics:
        inst = evalsuite.mask_pool_instances(dense, masks, classes, config.n_cap, rng)
        if inst.K >= 2:
            if "dbi" in metrics:
                report.dbi = evalsuite.dbi(inst, normalize=config.dbi_normalize)
            if "acc1" in metrics:
                report.acc1 = evalsuite.region_text_acc1(inst, dict(zip(classes, texts)))
        else:
            logger.warning("fewer than two categories retained at n_cap=%s; DBI/Acc@1 skipped", config.n_cap)
    if "map" in metrics:
        report.map_coherence = evalsuite.coherence_map(dense, masks, config.n_pairs, rng, config.coherence_mode)
    if "miou" in metrics:
        report.miou = evalsuite.dataset_miou(dense, masks, texts)
    if "zsc" in metrics:
        feats, labels = [], []
        dtype = bundle.logit_scale.dtype
        for rec in records:
            boxes = [o.bbox for o in rec.objects]
            if not boxes:
                continue
            img = _images_tensor(rec.image, dtype).unsqueeze(0)
            feats.append(region_features(bundle.student, img, [0] * len(boxes), boxes, "cls_of_crop").numpy())
            labels.extend(classes.index(o.category) for o in rec.objects)
        if feats:
            report.zsc_top1 = evalsuite.zsc_top1(np.concatenate(feats), labels, texts)
    if "recall" in metrics and len(records) >= 10:
        imgs = _images_tensor(np.stack([r.image for r in records]), bundle.logit_scale.dtype)
        caps = bundle.text([r.caption_short for r in records]).cls
        rec_all = evalsuite.retrieval_recall(bundle.student(imgs).cls, caps)
        report.recall_at = {k: rec_all[k] for k in ("r1", "r5", "r10", "mean_recall")}
    report.validate()
    return report


# -- stage runner -------------------------------------------------------------

@dataclass
class StageResult:
    checkpoint: Path
    metrics_log: Path
    reports: list[dict]
    trainer: Trainer


def run_stage(config: TrainConfig, records: Sequence[ImageRecord], run_dir, *,
              eval_records: Sequence[ImageRecord] | None = None, eval_masks: Sequence[np.ndarray] | None = None,
              classes: Sequence[str] | None = None, eval_config: EvalConfig | None = None,
              init_from=None, resume_from=None, bundle: TeacherStudentBundle | None = None,
              vision: VisionEncoderConfig | None = None, text: TextEncoderConfig | None = None,
              snapshot_every: int | None = None, stop_after: int | None = None) -> StageResult:
    """Train one stage and write ``checkpoint.npz``, ``metrics.jsonl`` and ``train_log.jsonl``.

    Eval events run before the first step and after every epoch when eval data
    is given. ``stop_after`` halts early (used to exercise resume).
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if bundle is None:
        if init_from is not None:
            bundle, meta = load_checkpoint(init_from)
            if bundle.strategy != config.strategy:
                bundle = _rebundle(bundle, config)
        else:
            bundle = build_bundle(config, vision, text)
    trainer = Trainer(bundle, config, records)
    if resume_from is not None:
        trainer.load_snapshot(resume_from)
    eval_config = eval_config or EvalConfig()
    metrics_log = run_dir / "metrics.jsonl"
    train_log = run_dir / "train_log.jsonl"
    reports: list[dict] = []
    if resume_from is None:
        metrics_log.write_text("")
        train_log.write_text("")
    do_eval = eval_records is not None and eval_masks is not None and classes is not None

    def eval_event(tag: str):
        if not do_eval:
            return
        rep = evalsuite.MetricReport(**evaluate(trainer.bundle, eval_records, eval_masks, classes,
                                                eval_config, config.seed).__dict__)
        entry = {"event": tag, "stage": config.stage, "step": trainer.state.step,
                 "epoch": trainer.state.epoch, **rep.to_dict()}
        reports.append(entry)
        with open(metrics_log, "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    if trainer.state.step == 0:
        eval_event("init")
    while trainer.state.step < trainer.total_steps:
        if stop_after is not None and trainer.state.step >= stop_after:
            break
        rep = trainer.step()
        with open(train_log, "a") as fh:
            fh.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
        if snapshot_every and trainer.state.step % snapshot_every == 0:
            trainer.save_snapshot(run_dir / f"snapshot_{trainer.state.step:06d}.pt")
        if trainer.state.step % trainer.steps_per_epoch == 0:
            eval_event(f"epoch_{trainer.state.step // trainer.steps_per_epoch}")
    ckpt = run_dir / "checkpoint.npz"
    save_checkpoint(ckpt, trainer.bundle, {"config_hash": config.hash(), "train_config": config.to_dict(),
                                           "stage": config.stage, "step": trainer.state.step})
    trainer.save_snapshot(run_dir / "snapshot_last.pt")
    return StageResult(ckpt, metrics_log, reports, trainer)


def _rebundle(bundle: TeacherStudentBundle, config: TrainConfig) -> TeacherStudentBundle:
    """Same weights under a different teacher strategy (teacher restarts from the student)."""
    cfg = bundle_config(bundle)
    new = TeacherStudentBundle(VisionEncoderConfig(**cfg["vision"]), TextEncoderConfig(**cfg["text"]),
                               strategy=config.strategy, momentum=config.momentum,
                               text_frozen=config.text_frozen, shared_temperature=cfg["shared_temperature"],
                               dtype=bundle.logit_scale.dtype)
    new.student.load_state_dict(bundle.student.state_dict())
    new.text.load_state_dict(bundle.text.state_dict())
    with torch.no_grad():
        new.logit_scale.copy_(bundle.logit_scale)
        if new.logit_scale_loc is not None and bundle.logit_scale_loc is not None:
            new.logit_scale_loc.copy_(bundle.logit_scale_loc)
    if new.teacher_copy is not None:
        new.teacher_copy.load_state_dict(bundle.student.state_dict())
    return new
