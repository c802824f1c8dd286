"""Multi-granularity sample format, manifest I/O, synthetic scenes and batch assembly."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "a satellite image of {}"


class ManifestError(ValueError):
    """Malformed manifest line."""


class RecordRejected(ValueError):
    """A manifest record violates a data invariant."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized image coordinates, (x1, y1) top-left."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite bbox {vals}")
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(f"degenerate bbox {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BBox":
        if len(values) != 4:
            raise ValueError(f"bbox needs 4 values, got {len(values)}")
        return cls(*(float(v) for v in values))

    @classmethod
    def full(cls) -> "BBox":
        return cls(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class ObjectAnnotation:
    bbox: BBox
    category: str

    def __post_init__(self):
        if not isinstance(self.category, str) or not self.category.strip():
            raise ValueError("empty category")


@dataclass(eq=False)
class ImageRecord:
    """One sample. Pixels are loaded from ``image_path`` on first access when
    ``image`` was not given directly."""

    image_id: str
    caption_short: str = ""
    caption_long: str = ""
    objects: list[ObjectAnnotation] = field(default_factory=list)
    image_path: str | None = None
    meta: dict = field(default_factory=dict)
    _image: np.ndarray | None = field(default=None, repr=False)

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            if self.image_path is None:
                raise ValueError(f"record {self.image_id!r} has neither pixels nor image_path")
            self._image = read_image(self.image_path)
        return self._image

    @image.setter
    def image(self, value: np.ndarray) -> None:
        self._image = None if value is None else np.asarray(value, dtype=np.float64)

    @property
    def has_pixels(self) -> bool:
        return self._image is not None

    def same_fields(self, other: "ImageRecord", tol: float = 1e-6) -> bool:
        """Field-wise equality with a tolerance on bbox coordinates."""
        if (self.image_id, self.caption_short, self.caption_long) != (
            other.image_id, other.caption_short, other.caption_long
        ):
            return False
        if len(self.objects) != len(other.objects) or self.meta != other.meta:
            return False
        for a, b in zip(self.objects, other.objects):
            if a.category != b.category:
                return False
            if max(abs(u - v) for u, v in zip(a.bbox.as_list(), b.bbox.as_list())) > tol:
                return False
        return True


def read_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    """Single-channel PNG with integer class ids (255 = unlabeled)."""
    m = np.asarray(mask)
    if m.min() < 0 or m.max() > 255:
        raise ValueError("mask ids must fit in uint8")
    Image.fromarray(m.astype(np.uint8), mode="L").save(path, format="PNG")


def read_mask(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int64)


# -- manifest ---------------------------------------------------------------

def _record_to_json(rec: ImageRecord, image_path: str | None) -> dict:
    out = {
        "image_id": rec.image_id,
        "image_path": image_path,
        "caption_short": rec.caption_short,
        "caption_long": rec.caption_long,
        "objects": [
            {"bbox": o.bbox.as_list(), "category": o.category}
            for o in rec.objects
        ],
    }
    if rec.meta:
        out["meta"] = rec.meta
    return out


def _record_from_json(obj: dict, base_dir: Path) -> ImageRecord:
    if not isinstance(obj, dict):
        raise ManifestError("line is not a JSON object")
    for key in ("caption_short", "caption_long", "objects"):
        if key not in obj:
            raise ManifestError(f"missing key {key!r}")
    path = obj.get("image_path")
    image_id = obj.get("image_id") or (Path(path).stem if path else None)
    if not image_id:
        raise ManifestError("record has neither image_id nor image_path")
    objects = []
    for o in obj["objects"]:
        try:
            bbox = BBox.from_list(o["bbox"])
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"bad object entry: {exc}") from exc
        except ValueError as exc:
            raise RecordRejected(str(exc)) from exc
        try:
            objects.append(ObjectAnnotation(bbox, o.get("category", "")))
        except ValueError as exc:
            raise RecordRejected(str(exc)) from exc
    if path is not None and not os.path.isabs(path):
        path = str(base_dir / path)
    return ImageRecord(
        image_id=str(image_id),
        caption_short=obj["caption_short"],
        caption_long=obj["caption_long"],
        objects=objects,
        image_path=path,
        meta=obj.get("meta", {}) or {},
    )


def load_manifest(path, *, eager: bool = False, rejects: list | None = None,
                  strict: bool = False) -> list[ImageRecord]:
    """Read a JSON-Lines manifest.

    Malformed lines raise :class:`ManifestError` with the line number. Records
    that parse but violate an invariant are skipped and, if ``rejects`` is a
    list, reported there as ``(line_number, reason)``; ``strict`` raises instead.
    """
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            try:
                rec = _record_from_json(obj, path.parent)
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            except RecordRejected as exc:
                if strict:
                    raise RecordRejected(f"{path}:{lineno}: {exc}") from exc
                logger.warning("rejected record at line %d: %s", lineno, exc)
                if rejects is not None:
                    rejects.append((lineno, str(exc)))
                continue
            if eager and rec.image_path is not None:
                _ = rec.image
            records.append(rec)
    return records


def save_manifest(records: Iterable[ImageRecord], path, *, image_dir: str = "images") -> None:
    """Write records as JSON-Lines. Records holding pixels but no path get a
    PNG written under ``image_dir`` next to the manifest."""
    path = Path(path)
    lines = []
    for rec in records:
        rel = None
        if rec.image_path is not None:
            p = Path(rec.image_path)
            try:
                rel = str(p.resolve().relative_to(path.parent.resolve()))
            except ValueError:
                rel = str(p)
        elif rec.has_pixels:
            target = path.parent / image_dir / f"{rec.image_id}.png"
            target.parent.mkdir(parents=True, exist_ok=True)
            write_image(target, rec.image)
            rel = str(Path(image_dir) / target.name)
        lines.append(json.dumps(_record_to_json(rec, rel), ensure_ascii=False, sort_keys=True))
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


# -- templating and region batches -------------------------------------------

def template_category(category: str, template: str = DEFAULT_TEMPLATE) -> str:
    if template.count("{}") != 1:
        raise ValueError(f"template must contain exactly one '{{}}' placeholder: {template!r}")
    head, tail = template.split("{}")
    return head + category + tail


@dataclass
class GlobalBatch:
    images: np.ndarray  # N x H x W x C
    captions: list[str]
    indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.captions):
            raise ValueError("images and captions must pair one-to-one")

    @property
    def N(self) -> int:
        return len(self.captions)


@dataclass
class RegionBatch:
    entries: list[tuple[int, BBox, str]]
    category_texts: list[str]

    @property
    def M(self) -> int:
        return len(self.entries)

    @property
    def categories(self) -> list[str]:
        return [e[2] for e in self.entries]

    def positive_sets(self) -> list[set[int]]:
        cats = self.categories
        return [{j for j, c in enumerate(cats) if c == ci} for ci in cats]


def make_global_batch(records: Sequence[ImageRecord], indices: Sequence[int],
                      caption: str = "short") -> GlobalBatch:
    key = "caption_short" if caption == "short" else "caption_long"
    imgs = np.stack([records[i].image for i in indices])
    return GlobalBatch(imgs, [getattr(records[i], key) for i in indices], list(indices))


def build_region_batch(records: Sequence[ImageRecord], M: int, rng: np.random.Generator,
                       template: str = DEFAULT_TEMPLATE,
                       record_indices: Sequence[int] | None = None) -> RegionBatch:
    """Sample ``M`` region-category pairs uniformly over all objects, with replacement.

    ``record_indices`` restricts the pool to a subset of records (e.g. the
    current image batch); entry image indices always refer to ``records``.
    """
    pool = record_indices if record_indices is not None else range(len(records))
    flat = [(i, o.bbox, o.category) for i in pool for o in records[i].objects]
    if not flat:
        raise ValueError("no objects available for region sampling")
    if M < 1:
        raise ValueError("M must be positive")
    picks = rng.integers(0, len(flat), size=M)
    entries = [flat[k] for k in picks]
    return RegionBatch(entries, [template_category(c, template) for _, _, c in entries])


# -- synthetic scenes -------------------------------------------------------

@dataclass(frozen=True)
class ClassPrototype:
    name: str
    color: tuple[float, float, float]
    pattern: str
    amplitude: float = 0.15


def _pattern(kind: str, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Zero-mean texture in [-1, 1]; every period divides 4 px so patches of a
    class share the same texture wherever they sit."""
    y, x = ys.astype(np.int64), xs.astype(np.int64)
    if kind == "flat":
        return np.zeros(ys.shape)
    if kind == "hstripe":
        return np.where((y // 2) % 2 == 0, 1.0, -1.0)
    if kind == "vstripe":
        return np.where((x // 2) % 2 == 0, 1.0, -1.0)
    if kind == "checker":
        return np.where((x + y) % 2 == 0, 1.0, -1.0)
    if kind == "diag":
        return np.where(((x + y) // 2) % 2 == 0, 1.0, -1.0)
    if kind == "antidiag":
        return np.where(((x - y) // 2) % 2 == 0, 1.0, -1.0)
    if kind == "dots":
        return np.where((x % 4 == 0) & (y % 4 == 0), 1.0, -1.0 / 15.0)
    if kind == "blocks":
        return np.where(((x // 4) + (y // 4)) % 2 == 0, 1.0, -1.0)
    raise ValueError(f"unknown pattern {kind!r}")


PALETTE: tuple[ClassPrototype, ...] = (
    ClassPrototype("forest", (0.20, 0.45, 0.20), "hstripe"),
    ClassPrototype("water", (0.15, 0.30, 0.60), "vstripe"),
    ClassPrototype("farmland", (0.65, 0.60, 0.30), "diag"),
    ClassPrototype("building", (0.55, 0.50, 0.50), "antidiag"),
    ClassPrototype("road", (0.40, 0.40, 0.42), "checker"),
    ClassPrototype("bare soil", (0.60, 0.45, 0.30), "dots"),
    ClassPrototype("grassland", (0.45, 0.65, 0.30), "blocks"),
    ClassPrototype("airport", (0.75, 0.75, 0.72), "flat"),
)

_QUADRANT_NAMES = {(0, 0): "top left", (0, 1): "top right", (1, 0): "bottom left", (1, 1): "bottom right"}


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Grid layout of ``rows x cols`` class regions tiling the image."""

    rows: int = 2
    cols: int = 2
    num_classes: int = 4
    image_size: int = 32
    noise: float = 0.05
    seed: int = 0
    color_jitter: float = 0.0  # per-region uniform offset on the class color
    cell_jitter: float = 0.3  # per-cell uniform color offset (illumination patchiness)
    jitter_cell: int = 8
    texture: bool = True

    @property
    def K(self) -> int:
        return self.rows * self.cols

    def classes(self) -> list[str]:
        return [p.name for p in PALETTE[: self.num_classes]]


def _region_name(r: int, c: int, rows: int, cols: int) -> str:
    if rows == 2 and cols == 2:
        return _QUADRANT_NAMES[(r, c)]
    if rows == 1 and cols == 1:
        return "the whole scene"
    return f"row {r + 1} column {c + 1}"


def _render_region(proto: ClassPrototype, ys: np.ndarray, xs: np.ndarray, texture: bool,
                   color: np.ndarray) -> np.ndarray:
    out = np.broadcast_to(color, ys.shape + (3,)).copy()
    if texture:
        out += proto.amplitude * _pattern(proto.pattern, ys, xs)[..., None]
    return out


def synthesize_dataset(spec: SyntheticSceneSpec, n: int) -> tuple[list[ImageRecord], list[np.ndarray]]:
    """Generate ``n`` grid-layout scenes with pixel masks.

    Each image tiles ``spec.K`` regions; classes are assigned per image by a
    random permutation of the palette prefix (cycled when K exceeds the class
    count). Returns records carrying pixels and masks of class indices.
    """
    if spec.num_classes > len(PALETTE) or spec.num_classes < 1:
        raise ValueError(f"num_classes={spec.num_classes} exceeds palette size {len(PALETTE)}")
    if spec.K < 1:
        raise ValueError("layout needs at least one region")
    S = spec.image_size
    if S < spec.rows or S < spec.cols:
        raise ValueError("image too small for layout")
    rng = np.random.default_rng(spec.seed)
    names = spec.classes()
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    row_edges = [round(r * S / spec.rows) for r in range(spec.rows + 1)]
    col_edges = [round(c * S / spec.cols) for c in range(spec.cols + 1)]
    records, masks = [], []
    for idx in range(n):
        perm = rng.permutation(spec.num_classes)
        assign = [int(perm[k % spec.num_classes]) for k in range(spec.K)]
        img = np.zeros((S, S, 3))
        mask = np.zeros((S, S), dtype=np.int64)
        objects, phrases = [], []
        for r in range(spec.rows):
            for c in range(spec.cols):
                cls = assign[r * spec.cols + c]
                y0, y1 = row_edges[r], row_edges[r + 1]
                x0, x1 = col_edges[c], col_edges[c + 1]
                color = np.asarray(PALETTE[cls].color)
                if spec.color_jitter:
                    color = color + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
                img[y0:y1, x0:x1] = _render_region(PALETTE[cls], yy[y0:y1, x0:x1], xx[y0:y1, x0:x1],
                                                   spec.texture, color)
                mask[y0:y1, x0:x1] = cls
                objects.append(ObjectAnnotation(BBox(x0 / S, y0 / S, x1 / S, y1 / S), names[cls]))
                phrases.append((names[cls], _region_name(r, c, spec.rows, spec.cols)))
        if spec.cell_jitter:
            n_cells = -(-S // spec.jitter_cell)
            offs = rng.uniform(-spec.cell_jitter, spec.cell_jitter, size=(n_cells, n_cells, 3))
            img += np.repeat(np.repeat(offs, spec.jitter_cell, 0), spec.jitter_cell, 1)[:S, :S]
        if spec.noise > 0:
            img += rng.normal(0.0, spec.noise, size=img.shape)
        img = np.clip(img, 0.0, 1.0)
        present = sorted({p[0] for p in phrases}, key=names.index)
        short = "a satellite image with " + ", ".join(f"{c} at the {w}" for c, w in phrases) + "."
        long = (f"an overhead scene containing {len(present)} land-cover classes: "
                + ", ".join(present) + ". "
                + " ".join(f"The {w} part of the image shows {c}." for c, w in phrases))
        rec = ImageRecord(image_id=f"synth_{spec.seed}_{idx:05d}", caption_short=short,
                          caption_long=long, objects=objects)
        rec.image = img
        records.append(rec)
        masks.append(mask)
    return records, masks


def save_synthetic(records: Sequence[ImageRecord], masks: Sequence[np.ndarray], out_dir) -> Path:
    """Write images, masks and manifest into ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for rec, mask in zip(records, masks):
        img_path = out / "images" / f"{rec.image_id}.png"
        write_image(img_path, rec.image)
        write_mask(out / "masks" / f"{rec.image_id}.png", mask)
        rec.image_path = str(img_path)
    manifest = out / "manifest.jsonl"
    save_manifest(records, manifest)
    return manifest


def load_masks(records: Sequence[ImageRecord], mask_dir) -> list[np.ndarray]:
    return [read_mask(Path(mask_dir) / f"{r.image_id}.png") for r in records]
