"""Segmentation and consistency losses plus their weighted combination.

The two-class softmax is evaluated through the logit difference: the
foreground probability is sigmoid(fg - bg) and the per-voxel cross-entropy
is softplus(+-(fg - bg)), which is the stabilized two-class log-sum-exp.

The BI-RADS consistency term divides a tanh-bounded feature distance by the
score change, pulling paired embeddings together when the radiological
assessment is stable and relaxing when it progresses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .engine import ShapeError, Tensor

DICE_SMOOTH = 1e-5
BIRADS_MIN, BIRADS_MAX = 0, 6
BCR_REDUCTIONS = ("sum", "mean")

# the production 6-level weight ladder; other depths interpolate (see schedule)
SIX_LEVEL_WEIGHTS = (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)


def level_weight_schedule(n_levels: int) -> tuple[float, ...]:
    """Non-decreasing per-level weights from 0.1 up to 1.0.

    Six levels return the canonical ladder verbatim; other depths linearly
    interpolate between the same endpoints.
    """
    if n_levels < 1:
        raise ValueError(f"need at least one level, got {n_levels}")
    if n_levels == 1:
        return (1.0,)
    if n_levels == 6:
        return SIX_LEVEL_WEIGHTS
    step = 0.9 / (n_levels - 1)
    return tuple(0.1 + step * m for m in range(n_levels - 1)) + (1.0,)


@dataclass(frozen=True)
class BcrConfig:
    eps: float = 0.1
    layer_weights: tuple[float, ...] = SIX_LEVEL_WEIGHTS
    lambda_bcr: float = 0.1
    reduction: str = "sum"  # "sum" = literal squared norm; "mean" avoids tanh saturation

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.lambda_bcr < 0:
            raise ValueError(f"lambda_bcr must be >= 0, got {self.lambda_bcr}")
        if self.reduction not in BCR_REDUCTIONS:
            raise ValueError(f"reduction must be one of {BCR_REDUCTIONS}, got {self.reduction!r}")
        if not self.layer_weights:
            raise ValueError("layer_weights must be non-empty")

    @classmethod
    def for_levels(cls, n_levels: int, eps: float = 0.1, lambda_bcr: float = 0.1,
                   reduction: str = "sum") -> "BcrConfig":
        return cls(eps=eps, layer_weights=level_weight_schedule(n_levels),
                   lambda_bcr=lambda_bcr, reduction=reduction)


@dataclass
class LossBreakdown:
    """Per-term values for one step; ``total`` is the quantity to differentiate."""

    dice: Tensor
    ce: Tensor
    bcr_per_level: tuple[Tensor, ...]
    bcr: Tensor
    total: Tensor

    def scalars(self) -> dict[str, float]:
        return {"dice": float(self.dice), "ce": float(self.ce),
                "bcr": float(self.bcr), "total": float(self.total)}


def _as_target(target, logits: Tensor) -> Tensor:
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target), dtype=logits.dtype)
    if t.shape != logits.shape[1:]:
        raise ShapeError(f"target shape {t.shape} must match logits spatial shape {logits.shape[1:]}")
    vals = t.data
    if not np.all((vals == 0) | (vals == 1)):
        raise ValueError("target mask must be binary (values in {0, 1})")
    if t.dtype != logits.dtype:
        t = Tensor(t.data.astype(logits.dtype))
    return t


def foreground_probability(logits: Tensor) -> Tensor:
    """Softmax foreground channel of (2, D, H, W) logits via the logit difference."""
    if logits.ndim != 4 or logits.shape[0] != 2:
        raise ShapeError(f"expected (2, D, H, W) logits, got {logits.shape}")
    return eng.sigmoid(eng.select(logits, 1) - eng.select(logits, 0))


def dice_loss(logits: Tensor, target, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - soft Dice overlap of the foreground probability against the mask."""
    t = _as_target(target, logits)
    p = foreground_probability(logits)
    inter = (p * t).sum()
    denom = p.sum() + t.sum() + smooth
    return 1.0 - (2.0 * inter + smooth) / denom


def cross_entropy_loss(logits: Tensor, target) -> Tensor:
    """Mean per-voxel negative log-softmax at the target class."""
    t = _as_target(target, logits)
    d = eng.select(logits, 1) - eng.select(logits, 0)
    sign = 1.0 - 2.0 * t  # +1 where background, -1 where foreground
    return eng.softplus(sign * d).mean()


def birads_delta(birads_curr: int, birads_prior: int) -> int:
    for name, v in (("current", birads_curr), ("prior", birads_prior)):
        if not isinstance(v, (int, np.integer)) or not (BIRADS_MIN <= v <= BIRADS_MAX):
            raise ValueError(f"{name} BI-RADS score must be an integer in "
                             f"[{BIRADS_MIN}, {BIRADS_MAX}], got {v!r}")
    return abs(int(birads_curr) - int(birads_prior))


def birads_level_loss(curr: Tensor, prior: Tensor, birads_curr: int, birads_prior: int,
                      cfg: BcrConfig) -> Tensor:
    """tanh(feature distance) over (score change + eps) at one pyramid level.

    ``sum`` reduction is the literal squared Euclidean distance; ``mean``
    divides by the element count so large feature maps cannot saturate tanh.
    """
    if curr.shape != prior.shape:
        raise ShapeError(f"feature pair must share a shape, got {curr.shape} vs {prior.shape}")
    delta = birads_delta(birads_curr, birads_prior)
    sq = eng.square(curr - prior)
    dist = sq.sum() if cfg.reduction == "sum" else sq.mean()
    return eng.tanh(dist) / (delta + cfg.eps)


def birads_consistency_loss(features: list[tuple[Tensor, Tensor]], birads_curr: int,
                            birads_prior: int, cfg: BcrConfig) -> tuple[Tensor, tuple[Tensor, ...]]:
    """Weighted sum of the per-level losses; returns (total, per-level terms)."""
    if len(features) != len(cfg.layer_weights):
        raise ValueError(
            f"got {len(features)} feature levels but {len(cfg.layer_weights)} layer weights")
    levels = tuple(birads_level_loss(c, p, birads_curr, birads_prior, cfg)
                   for c, p in features)
    total = levels[0] * cfg.layer_weights[0]
    for w, lv in zip(cfg.layer_weights[1:], levels[1:]):
        total = total + lv * w
    return total, levels


def total_loss(logits: Tensor, target, features: list[tuple[Tensor, Tensor]],
               birads_curr: int, birads_prior: int, cfg: BcrConfig,
               lambda_dice: float = 1.0, lambda_ce: float = 1.0) -> LossBreakdown:
    """Composite training loss: lambda_dice*dice + lambda_ce*ce + lambda_bcr*bcr.

    A zero lambda_bcr skips the consistency term entirely (logged as 0), so a
    "no consistency" variant and an explicit zero weight are the same code path.
    """
    if lambda_dice < 0 or lambda_ce < 0:
        raise ValueError(f"loss weights must be >= 0, got dice={lambda_dice}, ce={lambda_ce}")
    d = dice_loss(logits, target)
    c = cross_entropy_loss(logits, target)
    total = lambda_dice * d + lambda_ce * c
    if cfg.lambda_bcr > 0:
        bcr, levels = birads_consistency_loss(features, birads_curr, birads_prior, cfg)
        total = total + cfg.lambda_bcr * bcr
    else:
        bcr, levels = Tensor(np.zeros((), dtype=logits.dtype)), ()
    return LossBreakdown(dice=d, ce=c, bcr_per_level=levels, bcr=bcr, total=total)
