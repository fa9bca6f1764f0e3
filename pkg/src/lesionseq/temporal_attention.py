"""Temporal attention over a current/prior feature-map pair.

Two parts: a weight generator that reduces both feature maps to one scalar
gate each (pool -> shared channel-spanning projection -> sigmoid), and a
modulator that re-weights the current features by the normalized, gated
difference against the prior ones:

    out = curr * norm(w1 * curr - w2 * prior) + curr

with an affine-free instance norm. Identical inputs under equal gates leave
the current features untouched.
"""

from __future__ import annotations

import numpy as np

from . import engine as eng
from .engine import ShapeError, Tensor

MODULATOR_NORM_EPS = 1e-5


def init_attention(params: dict[str, Tensor], prefix: str, rng: np.random.Generator,
                   channels: int, dtype=np.float32) -> None:
    params[f"{prefix}.w"] = Tensor(
        rng.normal(0.0, 1.0 / np.sqrt(channels), size=channels).astype(dtype), requires_grad=True)
    params[f"{prefix}.b"] = Tensor(np.zeros((), dtype=dtype), requires_grad=True)


def attention_weights(curr: Tensor, prior: Tensor, proj_w: Tensor,
                      proj_b: Tensor) -> tuple[Tensor, Tensor]:
    """Scalar gates (w1, w2) in (0, 1) for the current and prior feature maps.

    Both maps are stacked, pooled to a per-timepoint channel descriptor, and
    each descriptor is projected to one logit by the shared kernel spanning
    the full channel axis.
    """
    if curr.shape != prior.shape:
        raise ShapeError(f"attention inputs must share a shape, got {curr.shape} vs {prior.shape}")
    if proj_w.shape != (curr.shape[0],):
        raise ShapeError(f"projection kernel must span all {curr.shape[0]} channels, got {proj_w.shape}")
    desc = eng.global_avg_pool(eng.stack([curr, prior]))  # (2, C)
    w1 = eng.sigmoid((eng.select(desc, 0) * proj_w).sum() + proj_b)
    w2 = eng.sigmoid((eng.select(desc, 1) * proj_w).sum() + proj_b)
    return w1, w2


def modulate(curr: Tensor, prior: Tensor, w1, w2,
             eps: float = MODULATOR_NORM_EPS) -> Tensor:
    """Gated residual-difference modulation of the current features."""
    if curr.shape != prior.shape:
        raise ShapeError(f"modulate inputs must share a shape, got {curr.shape} vs {prior.shape}")
    diff = eng.instance_norm3d(w1 * curr - w2 * prior, eps=eps)
    return curr * diff + curr


def temporal_attention(curr: Tensor, prior: Tensor, proj_w: Tensor, proj_b: Tensor,
                       eps: float = MODULATOR_NORM_EPS) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """Full block: returns the modulated skip features and the (w1, w2) gates."""
    w1, w2 = attention_weights(curr, prior, proj_w, proj_b)
    return modulate(curr, prior, w1, w2, eps=eps), (w1, w2)


def fixed_difference_modulate(curr: Tensor, prior: Tensor,
                              eps: float = MODULATOR_NORM_EPS) -> Tensor:
    """Ablation path: modulation with both gates pinned to 1 and no learned weights."""
    if curr.shape != prior.shape:
        raise ShapeError(f"modulate inputs must share a shape, got {curr.shape} vs {prior.shape}")
    diff = eng.instance_norm3d(curr - prior, eps=eps)
    return curr * diff + curr
