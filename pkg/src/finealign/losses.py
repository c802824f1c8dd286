"""Global InfoNCE, multi-positive region-category contrastive loss, and patch distillation loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

STAGES = ("s1", "s2")


@dataclass(frozen=True)
class LossWeights:
    w_glo: float = 1.0
    w_loc: float = 1.0
    w_dis: float = 0.1

    def __post_init__(self):
        if min(self.w_glo, self.w_loc, self.w_dis) < 0:
            raise ValueError("loss weights must be non-negative")


def positive_sets(categories: Sequence[str]) -> torch.Tensor:
    """Boolean ``M x M`` matrix, ``[i, j]`` true iff entries i and j share a category."""
    codes = {c: k for k, c in enumerate(dict.fromkeys(categories))}
    idx = torch.tensor([codes[c] for c in categories])
    return idx[:, None] == idx[None, :]


def _check_tau(tau) -> torch.Tensor:
    if not isinstance(tau, torch.Tensor):
        tau = torch.tensor(float(tau), dtype=torch.float64)
    if not torch.isfinite(tau).all() or (tau <= 0).any():
        raise ValueError(f"temperature must be positive and finite, got {tau}")
    return tau


def _check_finite(*xs):
    for x in xs:
        if not torch.isfinite(x).all():
            raise ValueError("non-finite embeddings")


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.normalize(a, dim=-1) @ F.normalize(b, dim=-1).T


def loss_glo(V: torch.Tensor, T: torch.Tensor, tau) -> torch.Tensor:
    """Symmetric image-text InfoNCE over cosine similarities."""
    tau = _check_tau(tau)
    _check_finite(V, T)
    if V.shape[0] < 2 or V.shape != T.shape:
        raise ValueError(f"need matching N>=2 batches, got {tuple(V.shape)} and {tuple(T.shape)}")
    logits = cosine_matrix(V, T) / tau
    target = torch.arange(V.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def _multi_positive(logits: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    pos = pos.to(log_prob.dtype)
    return -((pos * log_prob).sum(1) / pos.sum(1)).mean()


def loss_loc(Vr: torch.Tensor, Tc: torch.Tensor, P, tau) -> torch.Tensor:
    """Multi-positive contrastive loss between region and category-text embeddings.

    ``P`` is a boolean ``M x M`` positive-set matrix or the list of categories.
    The text-to-region direction takes positives by the same category equality
    and keeps duplicate category texts in the denominator.
    """
    tau = _check_tau(tau)
    _check_finite(Vr, Tc)
    M = Vr.shape[0]
    if M < 2 or Vr.shape != Tc.shape:
        raise ValueError(f"need matching M>=2 batches, got {tuple(Vr.shape)} and {tuple(Tc.shape)}")
    if not isinstance(P, torch.Tensor):
        P = positive_sets(P)
    if P.shape != (M, M):
        raise ValueError("positive-set matrix shape mismatch")
    if not bool(P.diagonal().all()):
        raise ValueError("every sample must be its own positive")
    logits = cosine_matrix(Vr, Tc) / tau
    return 0.5 * (_multi_positive(logits, P) + _multi_positive(logits.T, P.T))


def loss_dis(p_roi: torch.Tensor, p_local: torch.Tensor, detach_teacher: bool = False) -> torch.Tensor:
    """Mean of ``1 - cos`` between student RoI rows and teacher local-view rows."""
    if p_roi.shape != p_local.shape or p_roi.shape[0] < 1:
        raise ValueError("p_roi and p_local must be matching non-empty m x d arrays")
    _check_finite(p_roi, p_local)
    if (p_roi.norm(dim=1) == 0).any() or (p_local.norm(dim=1) == 0).any():
        raise ValueError("zero-norm row in distillation features")
    if detach_teacher:
        p_local = p_local.detach()
    return (1.0 - F.cosine_similarity(p_roi, p_local, dim=1, eps=0.0)).mean()


def total_loss(components: Mapping[str, torch.Tensor | float], weights: LossWeights, stage: str,
               allow_loc_in_s1: bool = False):
    """Stage-weighted sum. s1 uses glo+dis, s2 uses glo+loc; missing terms count as 0."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if stage == "s1" and "loc" in components and not allow_loc_in_s1:
        raise ValueError("L_loc requested in stage s1 without override")
    active = {"s1": ("glo", "dis"), "s2": ("glo", "loc")}[stage]
    if allow_loc_in_s1 and stage == "s1":
        active = ("glo", "dis", "loc")
    w = {"glo": weights.w_glo, "loc": weights.w_loc, "dis": weights.w_dis}
    total = 0.0
    for name in active:
        if name not in components:
            logger.debug("loss component %s absent in stage %s, counted as 0", name, stage)
            continue
        total = total + w[name] * components[name]
    return total
