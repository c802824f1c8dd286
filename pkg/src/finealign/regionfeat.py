"""Region embeddings (crop CLS, pooled crop patches, RoI pooling) and local-view crop plans."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import BBox
from .encoders import VisionEncoder, _as_tensor

MODES = ("cls_of_crop", "pooled_patches_of_crop", "roi_embedding")


@dataclass
class RegionFeature:
    vector: torch.Tensor
    mode: str
    bbox: BBox


@dataclass
class CropPlan:
    boxes: list[BBox]
    method: str
    seed: int | None = None
    scale_range: tuple[float, float] = (0.2, 0.8)

    def __post_init__(self):
        if not self.boxes:
            raise ValueError("crop plan needs at least one box")

    @property
    def m(self) -> int:
        return len(self.boxes)

    def to_dict(self) -> dict:
        return {"method": self.method, "seed": self.seed, "scale_range": list(self.scale_range),
                "boxes": [b.as_list() for b in self.boxes]}

    @classmethod
    def from_dict(cls, d: dict) -> "CropPlan":
        return cls([BBox.from_list(b) for b in d["boxes"]], d["method"], d.get("seed"),
                   tuple(d.get("scale_range", (0.2, 0.8))))


def _axis_weights(lo: float, hi: float, n_cells: int, n_grid: int, samples: int,
                  dtype=torch.float64) -> torch.Tensor:
    """(n_cells, n_grid) matrix averaging ``samples`` bilinear taps per output cell.

    Grid cell i covers [i, i+1) with its value at the centre i+0.5; taps outside
    the centre range clamp to the border value.
    """
    start, length = lo * n_grid, (hi - lo) * n_grid
    cell = length / n_cells
    j = torch.arange(n_cells, dtype=dtype)[:, None]
    s = (torch.arange(samples, dtype=dtype)[None, :] + 0.5) / samples
    pos = (start + (j + s) * cell - 0.5).clamp(0.0, n_grid - 1.0)  # n_cells x samples
    left = pos.floor().clamp(max=max(n_grid - 2, 0))
    frac = pos - left
    W = torch.zeros(n_cells, samples, n_grid, dtype=dtype)
    li = left.long()
    W.scatter_add_(2, li.unsqueeze(-1), (1.0 - frac).unsqueeze(-1))
    if n_grid > 1:
        W.scatter_add_(2, (li + 1).unsqueeze(-1), frac.unsqueeze(-1))
    return W.mean(dim=1)


def roi_align(patches: torch.Tensor, bbox: BBox, out: tuple[int, int],
              sampling: tuple[int, int] = (1, 1)) -> torch.Tensor:
    """Bilinear RoIAlign of an ``h x w x d`` grid over a normalized box.

    One tap per output cell at the cell centre by default; ``sampling`` sets the
    taps per cell along (y, x). Half-pixel aligned.
    """
    h, w = patches.shape[0], patches.shape[1]
    oh, ow = out
    if oh < 1 or ow < 1:
        raise ValueError("output size must be positive")
    Wy = _axis_weights(bbox.y1, bbox.y2, oh, h, sampling[0], patches.dtype)
    Wx = _axis_weights(bbox.x1, bbox.x2, ow, w, sampling[1], patches.dtype)
    return torch.einsum("ah,bw,hwd->abd", Wy, Wx, patches)


def _point_weights(u: float, n: int) -> np.ndarray:
    t = min(max(u - 0.5, 0.0), n - 1.0)
    left = min(int(math.floor(t)), max(n - 2, 0))
    frac = t - left
    w = np.zeros(n)
    w[left] += 1.0 - frac
    if n > 1:
        w[left + 1] += frac
    return w


def _mean_weights(lo: float, hi: float, n: int) -> np.ndarray:
    """Weights giving the exact mean of the clamped bilinear interpolant over [lo, hi].

    The interpolant is linear between cell centres, so the trapezoid rule on
    the breakpoints is exact.
    """
    a, b = lo * n, hi * n
    pts = [a] + [i + 0.5 for i in range(n) if a < i + 0.5 < b] + [b]
    w = np.zeros(n)
    for u, v in zip(pts[:-1], pts[1:]):
        w += 0.5 * (v - u) * (_point_weights(u, n) + _point_weights(v, n))
    return w / (b - a)


def roi_pool(patches: torch.Tensor, bbox: BBox) -> torch.Tensor:
    """RoI vector: average of the bilinear interpolant of the grid over the box."""
    h, w = patches.shape[0], patches.shape[1]
    wy = torch.as_tensor(_mean_weights(bbox.y1, bbox.y2, h), dtype=patches.dtype)
    wx = torch.as_tensor(_mean_weights(bbox.x1, bbox.x2, w), dtype=patches.dtype)
    return torch.einsum("h,w,hwd->d", wy, wx, patches)


def roi_embedding(patches: torch.Tensor, bbox: BBox) -> RegionFeature:
    return RegionFeature(roi_pool(patches, bbox), "roi_embedding", bbox)


def roi_pool_many(patches: torch.Tensor, bboxes: Sequence[BBox]) -> torch.Tensor:
    return torch.stack([roi_pool(patches, b) for b in bboxes])


def _pixel_bounds(lo: float, hi: float, n: int) -> tuple[int, int]:
    a = int(math.floor(lo * n + 0.5))
    b = int(math.floor(hi * n + 0.5))
    return a, b


def crop_image(image, bbox: BBox, size: int | tuple[int, int] | None = None) -> torch.Tensor:
    """Pixel crop of an ``H x W x C`` image, bilinearly resized to ``size``."""
    img = image if isinstance(image, torch.Tensor) else torch.as_tensor(np.asarray(image), dtype=torch.float64)
    H, W = img.shape[0], img.shape[1]
    y0, y1 = _pixel_bounds(bbox.y1, bbox.y2, H)
    x0, x1 = _pixel_bounds(bbox.x1, bbox.x2, W)
    if y1 - y0 < 2 or x1 - x0 < 2:
        raise ValueError(f"crop {bbox.as_list()} is smaller than 2x2 pixels on a {H}x{W} image")
    crop = img[y0:y1, x0:x1]
    if size is None:
        return crop
    oh, ow = (size, size) if isinstance(size, int) else size
    if crop.shape[0] == oh and crop.shape[1] == ow:
        return crop
    chw = crop.permute(2, 0, 1).unsqueeze(0)
    return F.interpolate(chw, size=(oh, ow), mode="bilinear", align_corners=False)[0].permute(1, 2, 0)


def crop_batch(images: torch.Tensor, image_index: Sequence[int], boxes: Sequence[BBox], size: int) -> torch.Tensor:
    return torch.stack([crop_image(images[i], b, size) for i, b in zip(image_index, boxes)])


def region_feature(image, patches: torch.Tensor | None, bbox: BBox, mode: str,
                   encoder: VisionEncoder) -> RegionFeature:
    if mode not in MODES:
        raise ValueError(f"unknown region mode {mode!r}")
    if mode == "roi_embedding":
        if patches is None:
            raise ValueError("roi_embedding needs the full-image patch grid")
        return roi_embedding(patches, bbox)
    crop = crop_image(_as_tensor(image, encoder), bbox, encoder.config.image_size)
    enc = encoder(crop.unsqueeze(0))
    if mode == "cls_of_crop":
        vec = enc.cls[0]
    else:
        vec = enc.patches[0].reshape(-1, enc.patches.shape[-1]).mean(0)
    return RegionFeature(vec, mode, bbox)


def region_features(encoder: VisionEncoder, images: torch.Tensor, image_index: Sequence[int],
                    boxes: Sequence[BBox], mode: str, full_patches: torch.Tensor | None = None) -> torch.Tensor:
    """Batched ``region_feature``: one row per (image index, box)."""
    if mode not in MODES:
        raise ValueError(f"unknown region mode {mode!r}")
    if mode == "roi_embedding":
        if full_patches is None:
            full_patches = encoder(images).patches
        return torch.stack([roi_pool(full_patches[i], b) for i, b in zip(image_index, boxes)])
    enc = encoder(crop_batch(images, image_index, boxes, encoder.config.image_size))
    if mode == "cls_of_crop":
        return enc.cls
    return enc.patches.flatten(1, 2).mean(1)


def plan_crops(method: str, m: int, rng: np.random.Generator,
               scale_range: tuple[float, float] = (0.2, 0.8),
               aspect_range: tuple[float, float] = (3 / 4, 4 / 3)) -> CropPlan:
    """Local-view boxes: a regular ``g x g`` partition (``m = g**2``) or ``m``
    random boxes with area fraction uniform over ``scale_range``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if method == "grid":
        g = math.isqrt(m)
        if g * g != m:
            raise ValueError(f"grid crops need a perfect square m, got {m}")
        boxes = [BBox(c / g, r / g, (c + 1) / g, (r + 1) / g) for r in range(g) for c in range(g)]
        return CropPlan(boxes, "grid", None, tuple(scale_range))
    if method != "random":
        raise ValueError(f"unknown crop method {method!r}")
    lo, hi = scale_range
    if not 0 < lo <= hi < 1:
        raise ValueError("scale_range must satisfy 0 < lo <= hi < 1")
    a_lo, a_hi = aspect_range
    boxes = []
    for _ in range(m):
        area = rng.uniform(lo, hi)
        # feasible aspect range keeps both sides inside the unit square
        r_lo, r_hi = max(a_lo, area), min(a_hi, 1.0 / area)
        ratio = math.exp(rng.uniform(math.log(r_lo), math.log(r_hi)))
        bw, bh = math.sqrt(area * ratio), math.sqrt(area / ratio)
        bw, bh = min(bw, 1.0), min(bh, 1.0)
        x1 = rng.uniform(0.0, 1.0 - bw)
        y1 = rng.uniform(0.0, 1.0 - bh)
        boxes.append(BBox(x1, y1, min(x1 + bw, 1.0), min(y1 + bh, 1.0)))
    return CropPlan(boxes, "random", None, tuple(scale_range))
