"""Finite-difference verification of every differentiable component.

Each component builds small random leaves, evaluates a scalar functional,
and compares the engine's reverse-mode gradients against central finite
differences computed in float64 (leaf data is temporarily promoted, so the
32-bit mode checks 32-bit analytic gradients against a 64-bit numeric
reference). Tensor-valued outputs are reduced with a fixed random projection
so one scalar check covers the full Jacobian action.

Coordinates whose step-h and step-h/2 difference quotients disagree sit on a
non-smooth point (a LeakyReLU pre-activation crossing zero within the probe
interval) and are excluded: they cannot provide a reference derivative. A
broken backward still fails, because it disagrees at the smooth coordinates
too; the per-component report counts how many coordinates were skipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import engine as eng
from . import layers, losses, network
from . import temporal_attention as ta
from .engine import Tensor

DEFAULT_STEP = 1e-5
PRIMITIVE_TOL = {"f64": 1e-6, "f32": 1e-3}
NETWORK_TOL = {"f64": 1e-5, "f32": 1e-3}


class VerificationError(RuntimeError):
    """A component's gradients disagree with the finite-difference reference."""


@dataclass
class ComponentReport:
    name: str
    max_rel_err: float
    tolerance: float
    skipped_coords: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _rel_gap(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def finite_difference(fn: Callable[[], float], leaf: Tensor, coords: np.ndarray,
                      step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of fn w.r.t. the given flat coordinates of leaf."""
    out = np.empty(len(coords), dtype=np.float64)
    flat = leaf.data.reshape(-1)
    for j, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + step
        f_plus = fn()
        flat[c] = orig - step
        f_minus = fn()
        flat[c] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise VerificationError(f"non-finite probe values at coordinate {c}")
        out[j] = (f_plus - f_minus) / (2.0 * step)
    return out


def check_component(name: str, leaves: dict[str, Tensor], fn: Callable[[], Tensor],
                    tol: float, rng: np.random.Generator, step: float = DEFAULT_STEP,
                    max_coords: int = 12) -> ComponentReport:
    """Compare analytic and numeric gradients on a coordinate subsample per leaf."""
    for t in leaves.values():
        t.zero_grad()
    out = fn()
    out.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in leaves.items()}

    def scalar_eval() -> float:
        with eng.no_grad():
            return float(fn().data)

    max_rel = 0.0
    skipped = 0
    originals = {k: t.data for k, t in leaves.items()}
    try:
        for k, t in leaves.items():
            t.data = t.data.astype(np.float64)
        for k, t in leaves.items():
            n = t.data.size
            coords = rng.choice(n, size=min(max_coords, n), replace=False)
            numeric = finite_difference(scalar_eval, t, coords, step)
            numeric_half = finite_difference(scalar_eval, t, coords, step / 2.0)
            a = analytic[k].reshape(-1)[coords]
            for av, nv, nh in zip(a, numeric, numeric_half):
                if _rel_gap(float(nv), float(nh)) > tol / 4.0:
                    skipped += 1  # non-smooth point; no usable reference here
                    continue
                max_rel = max(max_rel, _rel_gap(float(av), float(nh)))
    finally:
        for k, t in leaves.items():
            t.data = originals[k]
    return ComponentReport(name=name, max_rel_err=max_rel, tolerance=tol,
                           skipped_coords=skipped)


# -- component builders -------------------------------------------------------------


def _leaf(rng, shape, dtype, lo=-2.0, hi=2.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape).astype(dtype), requires_grad=True)


def _leaf_off_zero(rng, shape, dtype, lo=0.2, hi=2.0) -> Tensor:
    mag = rng.uniform(lo, hi, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return Tensor((mag * sign).astype(dtype), requires_grad=True)


def _projection(rng, shape, dtype) -> Tensor:
    return Tensor(rng.uniform(-1.0, 1.0, size=shape).astype(dtype))


def _components(rng: np.random.Generator, dtype) -> list[tuple[str, dict, Callable, str]]:
    """(name, leaves, scalar functional, tolerance class) for every component."""
    comps: list[tuple[str, dict, Callable, str]] = []
    shape = (3, 2, 4, 4)

    def add(name, leaves, fn, tol_class="primitive"):
        comps.append((name, leaves, fn, tol_class))

    # elementwise, same-shape and restricted-broadcast forms
    for op in ("add", "sub", "mul"):
        a, b = _leaf(rng, shape, dtype), _leaf(rng, shape, dtype)
        r = _projection(rng, shape, dtype)
        add(op, {"a": a, "b": b}, lambda a=a, b=b, r=r, op=op: (eng.elementwise(op, a, b) * r).sum())
    a, b = _leaf(rng, shape, dtype), _leaf_off_zero(rng, shape, dtype)
    r = _projection(rng, shape, dtype)
    add("div", {"a": a, "b": b}, lambda a=a, b=b, r=r: (eng.div(a, b) * r).sum())
    a, s = _leaf(rng, shape, dtype), _leaf(rng, (), dtype)
    r = _projection(rng, shape, dtype)
    add("mul/scalar-broadcast", {"a": a, "s": s}, lambda a=a, s=s, r=r: (eng.mul(s, a) * r).sum())
    a, c = _leaf(rng, shape, dtype), _leaf(rng, (shape[0],), dtype)
    r = _projection(rng, shape, dtype)
    add("add/channel-broadcast", {"a": a, "c": c}, lambda a=a, c=c, r=r: (eng.add(a, c) * r).sum())

    for op in ("tanh", "sigmoid", "square", "softplus", "neg"):
        x = _leaf(rng, shape, dtype)
        r = _projection(rng, shape, dtype)
        add(op, {"x": x}, lambda x=x, r=r, op=op: (eng.elementwise(op, x) * r).sum())
    x = _leaf_off_zero(rng, shape, dtype)
    r = _projection(rng, shape, dtype)
    add("leaky_relu", {"x": x}, lambda x=x, r=r: (eng.leaky_relu(x) * r).sum())
    x = _leaf(rng, shape, dtype, lo=0.5, hi=2.0)
    r = _projection(rng, shape, dtype)
    add("log", {"x": x}, lambda x=x, r=r: (eng.log(x) * r).sum())
    x = _leaf(rng, shape, dtype, lo=-1.0, hi=1.0)
    r = _projection(rng, shape, dtype)
    add("exp", {"x": x}, lambda x=x, r=r: (eng.exp(x) * r).sum())

    # reductions and shape ops
    x = _leaf(rng, shape, dtype)
    add("sum", {"x": x}, lambda x=x: x.sum())
    x = _leaf(rng, shape, dtype)
    add("mean", {"x": x}, lambda x=x: x.mean())
    x = _leaf(rng, shape, dtype)
    r = _projection(rng, (3, 32), dtype)
    add("reshape", {"x": x}, lambda x=x, r=r: (x.reshape((3, 32)) * r).sum())
    a, b = _leaf(rng, shape, dtype), _leaf(rng, shape, dtype)
    r = _projection(rng, (6, 2, 4, 4), dtype)
    add("concat", {"a": a, "b": b}, lambda a=a, b=b, r=r: (eng.concat([a, b]) * r).sum())
    a, b = _leaf(rng, shape, dtype), _leaf(rng, shape, dtype)
    r = _projection(rng, (2,) + shape, dtype)
    add("stack", {"a": a, "b": b}, lambda a=a, b=b, r=r: (eng.stack([a, b]) * r).sum())
    x = _leaf(rng, shape, dtype)
    r = _projection(rng, shape[1:], dtype)
    add("select", {"x": x}, lambda x=x, r=r: (eng.select(x, 1) * r).sum())
    x = _leaf(rng, shape, dtype)
    r = _projection(rng, (3,), dtype)
    add("global_avg_pool", {"x": x}, lambda x=x, r=r: (eng.global_avg_pool(x) * r).sum())

    # convolution kernels
    for stride, tag in ((1, "conv3d/stride1"), (2, "conv3d/stride2")):
        x = _leaf(rng, (2, 4, 4, 4), dtype)
        w = _leaf(rng, (3, 2, 3, 3, 3), dtype)
        b = _leaf(rng, (3,), dtype)
        osp = tuple((4 + 2 - 3) // stride + 1 for _ in range(3))
        r = _projection(rng, (3,) + osp, dtype)
        add(tag, {"x": x, "w": w, "b": b},
            lambda x=x, w=w, b=b, r=r, s=stride: (eng.conv3d(x, w, b, stride=s) * r).sum())
    x = _leaf(rng, (3, 4, 4, 4), dtype)
    w = _leaf(rng, (2, 3, 1, 1, 1), dtype)
    b = _leaf(rng, (2,), dtype)
    r = _projection(rng, (2, 4, 4, 4), dtype)
    add("conv3d/kernel1", {"x": x, "w": w, "b": b},
        lambda x=x, w=w, b=b, r=r: (eng.conv3d(x, w, b, stride=1, padding=0) * r).sum())
    x = _leaf(rng, (3, 2, 3, 3), dtype)
    w = _leaf(rng, (3, 2, 2, 2, 2), dtype)
    r = _projection(rng, (2, 4, 6, 6), dtype)
    add("conv_transpose3d", {"x": x, "w": w},
        lambda x=x, w=w, r=r: (eng.conv_transpose3d(x, w) * r).sum())

    # normalization
    x = _leaf(rng, shape, dtype)
    r = _projection(rng, shape, dtype)
    add("instance_norm3d", {"x": x},
        lambda x=x, r=r: (eng.instance_norm3d(x, eps=1e-5) * r).sum())
    x = _leaf(rng, shape, dtype)
    sc = _leaf(rng, (3,), dtype)
    sh = _leaf(rng, (3,), dtype)
    r = _projection(rng, shape, dtype)
    add("instance_norm3d/affine", {"x": x, "scale": sc, "shift": sh},
        lambda x=x, sc=sc, sh=sh, r=r: (eng.instance_norm3d(x, 1e-5, sc, sh) * r).sum())

    # composite layers
    def conv_block_leaves(cin, cout, prefix):
        p: dict[str, Tensor] = {}
        prng = np.random.default_rng(rng.integers(2 ** 31))
        layers.init_conv_block(p, prefix, prng, cin, cout, dtype)
        return p

    p = conv_block_leaves(2, 3, "cb")
    x = _leaf(rng, (2, 4, 4, 4), dtype)
    r = _projection(rng, (3, 4, 4, 4), dtype)
    add("conv_block", {**p, "x": x},
        lambda p=p, x=x, r=r: (layers.conv_block(x, p, "cb") * r).sum())

    spec = layers.StageSpec(2, 3, downsample=True)
    p = {}
    layers.init_encoder_stage(p, "st", np.random.default_rng(rng.integers(2 ** 31)), spec, dtype)
    x = _leaf(rng, (2, 4, 4, 4), dtype)
    r = _projection(rng, (3, 2, 2, 2), dtype)
    add("encoder_stage", {**p, "x": x},
        lambda p=p, x=x, r=r, spec=spec: (layers.encoder_stage(x, p, "st", spec) * r).sum())

    p = {}
    layers.init_decoder_stage(p, "de", np.random.default_rng(rng.integers(2 ** 31)),
                              layers.StageSpec(4, 2), dtype)
    x = _leaf(rng, (4, 2, 2, 2), dtype)
    skip = _leaf(rng, (2, 4, 4, 4), dtype)
    r = _projection(rng, (2, 4, 4, 4), dtype)
    add("decoder_stage", {**p, "x": x, "skip": skip},
        lambda p=p, x=x, skip=skip, r=r: (layers.decoder_stage(x, skip, p, "de") * r).sum())

    p = {}
    layers.init_seg_head(p, "head", np.random.default_rng(rng.integers(2 ** 31)), 3, 2, dtype)
    x = _leaf(rng, (3, 4, 4, 4), dtype)
    r = _projection(rng, (2, 4, 4, 4), dtype)
    add("seg_head", {**p, "x": x},
        lambda p=p, x=x, r=r: (layers.seg_head(x, p, "head") * r).sum())

    # temporal attention
    kc, kp = _leaf(rng, shape, dtype), _leaf(rng, shape, dtype)
    pw, pb = _leaf(rng, (3,), dtype), _leaf(rng, (), dtype)
    add("attention_weights", {"kc": kc, "kp": kp, "pw": pw, "pb": pb},
        lambda kc=kc, kp=kp, pw=pw, pb=pb:
        (lambda w: w[0] + 2.0 * w[1])(ta.attention_weights(kc, kp, pw, pb)))
    kc, kp = _leaf(rng, shape, dtype), _leaf(rng, shape, dtype)
    w1, w2 = _leaf(rng, (), dtype, 0.1, 0.9), _leaf(rng, (), dtype, 0.1, 0.9)
    r = _projection(rng, shape, dtype)
    add("modulate", {"kc": kc, "kp": kp, "w1": w1, "w2": w2},
        lambda kc=kc, kp=kp, w1=w1, w2=w2, r=r: (ta.modulate(kc, kp, w1, w2) * r).sum())
    kc, kp = _leaf(rng, shape, dtype), _leaf(rng, shape, dtype)
    pw, pb = _leaf(rng, (3,), dtype), _leaf(rng, (), dtype)
    r = _projection(rng, shape, dtype)
    add("temporal_attention", {"kc": kc, "kp": kp, "pw": pw, "pb": pb},
        lambda kc=kc, kp=kp, pw=pw, pb=pb, r=r:
        (ta.temporal_attention(kc, kp, pw, pb)[0] * r).sum())
    kc, kp = _leaf(rng, shape, dtype), _leaf(rng, shape, dtype)
    r = _projection(rng, shape, dtype)
    add("fixed_difference_modulate", {"kc": kc, "kp": kp},
        lambda kc=kc, kp=kp, r=r: (ta.fixed_difference_modulate(kc, kp) * r).sum())

    # losses
    rng_mask = np.random.default_rng(rng.integers(2 ** 31))
    target = (rng_mask.random((4, 4, 4)) < 0.3).astype(np.float64)
    logits = _leaf(rng, (2, 4, 4, 4), dtype)
    add("dice_loss", {"logits": logits},
        lambda lg=logits, t=target: losses.dice_loss(lg, t))
    logits = _leaf(rng, (2, 4, 4, 4), dtype)
    add("cross_entropy_loss", {"logits": logits},
        lambda lg=logits, t=target: losses.cross_entropy_loss(lg, t))
    for reduction in ("sum", "mean"):
        cfg = losses.BcrConfig.for_levels(1, reduction=reduction)
        kc = _leaf(rng, (2, 2, 2, 2), dtype, lo=-0.4, hi=0.4)
        kp = _leaf(rng, (2, 2, 2, 2), dtype, lo=-0.4, hi=0.4)
        add(f"birads_level_loss/{reduction}", {"kc": kc, "kp": kp},
            lambda kc=kc, kp=kp, cfg=cfg: losses.birads_level_loss(kc, kp, 4, 3, cfg))
    cfg = losses.BcrConfig.for_levels(2, reduction="mean")
    f0c, f0p = _leaf(rng, (2, 4, 4, 4), dtype), _leaf(rng, (2, 4, 4, 4), dtype)
    f1c, f1p = _leaf(rng, (3, 2, 2, 2), dtype), _leaf(rng, (3, 2, 2, 2), dtype)
    add("birads_consistency_loss", {"f0c": f0c, "f0p": f0p, "f1c": f1c, "f1p": f1p},
        lambda a=f0c, b=f0p, c=f1c, d=f1p, cfg=cfg:
        losses.birads_consistency_loss([(a, b), (c, d)], 4, 4, cfg)[0])

    # end-to-end toy networks
    for variant in ("full", "no-tpa"):
        netcfg = network.NetworkConfig(stages=2, channels=(4, 8), variant=variant)
        nparams = network.init_params(netcfg, seed=int(rng.integers(2 ** 31)), dtype=dtype)
        curr = _leaf(rng, (1, 8, 8, 8), dtype, lo=-1.0, hi=1.0)
        prior = _leaf(rng, (1, 8, 8, 8), dtype, lo=-1.0, hi=1.0)
        tmask = (np.random.default_rng(rng.integers(2 ** 31)).random((8, 8, 8)) < 0.2)
        tmask = tmask.astype(np.float64)
        cfg = losses.BcrConfig.for_levels(2, reduction="mean")

        def e2e(nparams=nparams, curr=curr, prior=prior, tmask=tmask, cfg=cfg, netcfg=netcfg):
            res = network.forward(curr, prior, nparams, netcfg)
            return losses.total_loss(res.logits, tmask, res.features, 4, 3, cfg).total

        add(f"network/{variant}", {**nparams, "curr": curr, "prior": prior}, e2e, "network")

    return comps


def run_suite(seed: int = 0, mode: str = "f64", only: list[str] | None = None,
              max_coords: int = 12) -> list[ComponentReport]:
    """Run every component check; returns per-component reports.

    mode 'f64' checks the verification precision (tolerances 1e-6 primitive /
    1e-5 network); mode 'f32' checks training precision against a float64
    numeric reference (tolerance 1e-3).
    """
    if mode not in ("f64", "f32"):
        raise ValueError(f"mode must be 'f64' or 'f32', got {mode!r}")
    dtype = np.float64 if mode == "f64" else np.float32
    rng = np.random.default_rng(seed)
    reports = []
    for name, leaves, fn, tol_class in _components(rng, dtype):
        if only is not None and name not in only:
            continue
        tol = (NETWORK_TOL if tol_class == "network" else PRIMITIVE_TOL)[mode]
        coord_rng = np.random.default_rng(seed + 1)
        reports.append(check_component(name, leaves, fn, tol, coord_rng,
                                       max_coords=max_coords))
    return reports


def format_report(reports: list[ComponentReport]) -> str:
    width = max(len(r.name) for r in reports)
    lines = []
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        note = f"  (skipped {r.skipped_coords} non-smooth coords)" if r.skipped_coords else ""
        lines.append(f"{r.name:<{width}}  max_rel={r.max_rel_err:.3e}  tol={r.tolerance:.1e}  "
                     f"{status}{note}")
    failed = [r.name for r in reports if not r.passed]
    lines.append(f"{len(reports) - len(failed)}/{len(reports)} components passed")
    if failed:
        lines.append("FAILED: " + ", ".join(failed))
    return "\n".join(lines)
