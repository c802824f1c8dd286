"""Dense-feature diagnostics (DBI, region-text Acc@1, pixel-pair coherence mAP) and task metrics."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

IGNORE = 255


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm feature vector")
    return x / n


@dataclass
class InstanceFeatureSet:
    features: dict[str, np.ndarray]  # category -> n x d
    n_cap: int | None = None

    @property
    def categories(self) -> list[str]:
        return list(self.features)

    @property
    def K(self) -> int:
        return len(self.features)


@dataclass
class MetricReport:
    dbi: float | None = None
    acc1: float | None = None
    map_coherence: float | None = None
    miou: float | None = None
    zsc_top1: float | None = None
    recall_at: dict[str, float] = field(default_factory=dict)
    sampling: dict = field(default_factory=dict)
    seed: int | None = None

    def validate(self) -> None:
        for name in ("dbi", "acc1", "map_coherence", "miou", "zsc_top1"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise ValueError(f"{name} is not finite")
        for name in ("acc1", "map_coherence", "miou", "zsc_top1"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.dbi is not None and self.dbi < 0:
            raise ValueError("dbi must be >= 0")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None and v != {}}

    def to_json(self) -> str:
        self.validate()
        return json.dumps(self.to_dict(), sort_keys=True)


# -- resolution handling ------------------------------------------------------

def downsample_mask(mask: np.ndarray, h: int, w: int, ignore: int = IGNORE) -> np.ndarray:
    """Majority label per grid cell; ties go to the smallest label, all-ignored cells stay ignored."""
    mask = np.asarray(mask)
    H, W = mask.shape
    ys = np.linspace(0, H, h + 1).round().astype(int)
    xs = np.linspace(0, W, w + 1).round().astype(int)
    out = np.full((h, w), ignore, dtype=np.int64)
    for i in range(h):
        for j in range(w):
            cell = mask[ys[i]:ys[i + 1], xs[j]:xs[j + 1]].ravel()
            cell = cell[cell != ignore]
            if cell.size:
                vals, counts = np.unique(cell, return_counts=True)
                out[i, j] = vals[np.argmax(counts)]
    return out


def upsample_nearest(grid: np.ndarray, H: int, W: int) -> np.ndarray:
    h, w = grid.shape[:2]
    ri = np.minimum((np.arange(H) * h) // H, h - 1)
    ci = np.minimum((np.arange(W) * w) // W, w - 1)
    return grid[ri][:, ci]


# -- instance features ------------------------------------------------------------

def mask_pool_instances(dense: Sequence, masks: Sequence[np.ndarray], categories: Sequence[str],
                        n_cap: int | None, rng: np.random.Generator | None = None,
                        ignore: int = IGNORE) -> InstanceFeatureSet:
    """One mean-pooled vector per (image, present class).

    ``dense`` holds ``h x w x d`` grids; masks are downsampled to the grid by
    majority vote. With ``n_cap`` set, only categories with more than ``n_cap``
    instances are kept and each is subsampled to exactly ``n_cap``.
    """
    pooled: dict[int, list[np.ndarray]] = {}
    for grid, mask in zip(dense, masks):
        grid = _np(grid)
        small = downsample_mask(mask, grid.shape[0], grid.shape[1], ignore)
        for label in np.unique(small):
            if label == ignore:
                continue
            if label >= len(categories):
                raise ValueError(f"mask label {label} has no category name")
            pooled.setdefault(int(label), []).append(grid[small == label].mean(axis=0))
    for k, name in enumerate(categories):
        if k not in pooled:
            logger.info("category %r has no labeled cells, skipped", name)
    features = {}
    for label in sorted(pooled):
        vecs = np.stack(pooled[label])
        if n_cap is not None:
            if len(vecs) <= n_cap:
                continue
            if rng is None:
                raise ValueError("rng required for subsampling")
            vecs = vecs[np.sort(rng.choice(len(vecs), size=n_cap, replace=False))]
        features[categories[label]] = vecs
    return InstanceFeatureSet(features, n_cap)


def dbi(features: InstanceFeatureSet | Mapping[str, np.ndarray], normalize: bool = False) -> float:
    """Davies-Bouldin index over category clusters (lower = more separable)."""
    feats = features.features if isinstance(features, InstanceFeatureSet) else dict(features)
    names = list(feats)
    if len(names) < 2:
        raise ValueError("DBI needs at least two categories")
    xs = [_np(feats[n]) for n in names]
    if normalize:
        xs = [_unit(x) for x in xs]
    cents = np.stack([x.mean(0) for x in xs])
    scatter = np.array([np.linalg.norm(x - c, axis=1).mean() for x, c in zip(xs, cents)])
    dist = np.linalg.norm(cents[:, None] - cents[None], axis=-1)
    K = len(names)
    for i in range(K):
        for j in range(i + 1, K):
            if dist[i, j] == 0:
                raise ValueError(f"coincident centroids for {names[i]!r} and {names[j]!r}")
    ratio = (scatter[:, None] + scatter[None]) / np.where(dist == 0, np.inf, dist)
    np.fill_diagonal(ratio, -np.inf)
    return float(ratio.max(axis=1).mean())


def region_text_acc1(features: InstanceFeatureSet | Mapping[str, np.ndarray],
                     text_embeddings: Mapping[str, np.ndarray]) -> float:
    """Share of instances whose most cosine-similar category text is their own."""
    feats = features.features if isinstance(features, InstanceFeatureSet) else dict(features)
    names = list(feats)
    if len(names) < 2:
        raise ValueError("Acc@1 needs at least two retained categories")
    missing = [n for n in names if n not in text_embeddings]
    if missing:
        raise ValueError(f"missing text embeddings for {missing}")
    T = _unit(np.stack([_np(text_embeddings[n]) for n in names]))
    correct = total = 0
    for k, n in enumerate(names):
        pred = np.argmax(_unit(_np(feats[n])) @ T.T, axis=1)
        correct += int((pred == k).sum())
        total += len(pred)
    return correct / total


# -- average precision and semantic coherence -----------------------------------------

def average_precision(scores, labels) -> float:
    """All-points interpolated AP; ties keep input order (stable sort)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("AP undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[hits].sum() / n_pos)


def sample_pixel_pairs(mask_grid: np.ndarray, n_pairs: int, rng: np.random.Generator,
                       ignore: int = IGNORE) -> tuple[np.ndarray, np.ndarray]:
    """Uniform pairs of distinct labeled cells, as flat indices (a, b)."""
    labeled = np.flatnonzero(mask_grid.ravel() != ignore)
    if labeled.size < 2:
        raise ValueError("fewer than two labeled cells")
    a = rng.integers(0, labeled.size, size=n_pairs)
    b = (a + rng.integers(1, labeled.size, size=n_pairs)) % labeled.size
    return labeled[a], labeled[b]


def coherence_map(dense: Sequence, masks: Sequence[np.ndarray], n_pairs: int,
                  rng: np.random.Generator, mode: str = "per_image", ignore: int = IGNORE) -> float:
    """Pixel-pair semantic coherence: AP of feature cosine vs same-class labels.

    ``per_image`` averages per-image AP (images without a positive pair are
    skipped); ``pooled`` ranks all pairs together.
    """
    if n_pairs < 2:
        raise ValueError("n_pairs must be >= 2")
    if mode not in ("per_image", "pooled"):
        raise ValueError(f"unknown mode {mode!r}")
    aps, all_s, all_y = [], [], []
    for grid, mask in zip(dense, masks):
        grid = _np(grid)
        small = downsample_mask(mask, grid.shape[0], grid.shape[1], ignore)
        if int((small != ignore).sum()) < 2:
            logger.info("image with fewer than 2 labeled cells skipped")
            continue
        a, b = sample_pixel_pairs(small, n_pairs, rng, ignore)
        flat = _unit(grid.reshape(-1, grid.shape[-1]))
        s = (flat[a] * flat[b]).sum(1)
        y = small.ravel()[a] == small.ravel()[b]
        all_s.append(s)
        all_y.append(y)
        if mode == "per_image" and y.any():
            aps.append(average_precision(s, y))
    if not all_s:
        raise ValueError("no image had labeled pixels")
    y = np.concatenate(all_y)
    if y.all() or not y.any():
        raise ValueError("pair labels are all one class")
    if mode == "pooled":
        return average_precision(np.concatenate(all_s), y)
    return float(np.mean(aps))


# -- segmentation and global metrics -------------------------------------------------

def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: int = IGNORE) -> np.ndarray:
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    keep = gt != ignore
    return np.bincount(gt[keep] * num_classes + pred[keep], minlength=num_classes ** 2).reshape(
        num_classes, num_classes)


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: int = IGNORE) -> float:
    """Mean IoU over classes present in the ground truth or the prediction."""
    cm = confusion_matrix(pred, gt, num_classes, ignore).astype(np.float64)
    inter = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - inter
    valid = union > 0
    if not valid.any():
        raise ValueError("no labeled pixels")
    return float((inter[valid] / union[valid]).mean())


def segment_logits(dense, text_embeddings) -> np.ndarray:
    T = _np(text_embeddings)
    if T.ndim != 2 or T.shape[0] == 0:
        raise ValueError("need at least one text embedding")
    return _unit(_np(dense)) @ _unit(T).T


def ovss_segment(dense, text_embeddings, gt_mask: np.ndarray | None = None, ignore: int = IGNORE):
    """Per-cell argmax over cosine logits. With ``gt_mask`` also returns the
    nearest-upsampled prediction and its mIoU."""
    pred = np.argmax(segment_logits(dense, text_embeddings), axis=-1)
    if gt_mask is None:
        return pred
    up = upsample_nearest(pred, *np.asarray(gt_mask).shape)
    return pred, up, miou(up, gt_mask, _np(text_embeddings).shape[0], ignore)


def dataset_miou(dense: Sequence, masks: Sequence[np.ndarray], text_embeddings, ignore: int = IGNORE) -> float:
    """mIoU from a confusion matrix accumulated over all images."""
    K = _np(text_embeddings).shape[0]
    cm = np.zeros((K, K))
    for grid, mask in zip(dense, masks):
        pred = ovss_segment(grid, text_embeddings)
        cm += confusion_matrix(upsample_nearest(pred, *mask.shape), mask, K, ignore)
    inter = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - inter
    valid = union > 0
    return float((inter[valid] / union[valid]).mean())


def zsc_top1(image_embeddings, labels, class_text_embeddings) -> float:
    logits = _unit(_np(image_embeddings)) @ _unit(_np(class_text_embeddings)).T
    return float((np.argmax(logits, axis=1) == np.asarray(labels)).mean())


def retrieval_recall(image_embeddings, text_embeddings, ks: Sequence[int] = (1, 5, 10)) -> dict[str, float]:
    """Recall@k for paired sets in both directions plus their mean."""
    I, T = _unit(_np(image_embeddings)), _unit(_np(text_embeddings))
    n = I.shape[0]
    if T.shape[0] != n:
        raise ValueError("image and text sets must be paired")
    if n < max(ks):
        raise ValueError(f"need at least {max(ks)} pairs")
    sim = I @ T.T
    out = {}
    for name, S in (("i2t", sim), ("t2i", sim.T)):
        order = np.argsort(-S, axis=1, kind="stable")
        rank = np.argmax(order == np.arange(n)[:, None], axis=1)
        for k in ks:
            out[f"{name}_r{k}"] = float((rank < k).mean())
    for k in ks:
        out[f"r{k}"] = 0.5 * (out[f"i2t_r{k}"] + out[f"t2i_r{k}"])
    out["mean_recall"] = float(np.mean([out[f"r{k}"] for k in ks]))
    return out


def similarity_map(dense, anchor) -> np.ndarray:
    """Cosine of every cell against an anchor: an ``(row, col)`` cell or a vector."""
    grid = _unit(_np(dense))
    if isinstance(anchor, tuple):
        vec = grid[anchor]
    else:
        vec = _unit(_np(anchor))
    return grid @ vec


def class_prototypes(dense: Sequence, masks: Sequence[np.ndarray], num_classes: int,
                     ignore: int = IGNORE) -> np.ndarray:
    """Mean dense feature per class over grid cells (masks downsampled to the grid).

    Usable as segmentation queries in place of text embeddings.
    """
    sums, counts = None, np.zeros(num_classes)
    for grid, mask in zip(dense, masks):
        g = _np(grid)
        cells = downsample_mask(mask, g.shape[0], g.shape[1], ignore)
        if sums is None:
            sums = np.zeros((num_classes, g.shape[-1]))
        for k in range(num_classes):
            sel = cells == k
            sums[k] += g[sel].sum(0)
            counts[k] += sel.sum()
    if sums is None or (counts == 0).any():
        raise ValueError(f"classes without labeled cells: {np.flatnonzero(counts == 0).tolist()}")
    return sums / counts[:, None]
