"""Conv-norm-activation blocks and the encoder/decoder stages built from them.

All parameters live in a flat ordered ``dict[str, Tensor]``; layer functions
take the dict plus a name prefix, so one parameter set can be shared by any
number of forward passes (the dual-encoder case).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .engine import ShapeError, Tensor

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5
KERNEL = 3


@dataclass(frozen=True)
class StageSpec:
    """One encoder/decoder stage: channel change plus optional 2x downsampling."""

    in_channels: int
    out_channels: int
    downsample: bool = False
    convs: int = 2

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"stage channels must be positive, got {self}")
        if self.convs != 2:
            raise ValueError("stages use exactly 2 conv layers")


def kaiming_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                   slope: float = LEAKY_SLOPE) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)


def init_conv_block(params: dict[str, Tensor], prefix: str, rng: np.random.Generator,
                    cin: int, cout: int, dtype=np.float32, kernel: int = KERNEL) -> None:
    k3 = kernel ** 3
    params[f"{prefix}.w"] = Tensor(
        kaiming_normal(rng, (cout, cin, kernel, kernel, kernel), cin * k3).astype(dtype),
        requires_grad=True)
    params[f"{prefix}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    params[f"{prefix}.ns"] = Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
    params[f"{prefix}.nb"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)


def conv_block(x: Tensor, params: dict[str, Tensor], prefix: str, stride: int = 1) -> Tensor:
    """conv3d -> instance norm (affine) -> LeakyReLU."""
    kernel = params[f"{prefix}.w"].shape[-1]
    y = eng.conv3d(x, params[f"{prefix}.w"], params[f"{prefix}.b"],
                   stride=stride, padding=kernel // 2)
    y = eng.instance_norm3d(y, eps=NORM_EPS,
                            scale=params[f"{prefix}.ns"], shift=params[f"{prefix}.nb"])
    return eng.leaky_relu(y, LEAKY_SLOPE)


def init_encoder_stage(params: dict[str, Tensor], prefix: str, rng: np.random.Generator,
                       spec: StageSpec, dtype=np.float32) -> None:
    init_conv_block(params, f"{prefix}.c0", rng, spec.in_channels, spec.out_channels, dtype)
    init_conv_block(params, f"{prefix}.c1", rng, spec.out_channels, spec.out_channels, dtype)


def encoder_stage(x: Tensor, params: dict[str, Tensor], prefix: str, spec: StageSpec) -> Tensor:
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"stage '{prefix}' expects {spec.in_channels} channels, got {x.shape[0]}")
    if spec.downsample and any(e < 2 or e % 2 for e in x.shape[1:]):
        raise ShapeError(f"stage '{prefix}' cannot halve spatial extents {x.shape[1:]}: "
                         "input too small (or odd) for this depth")
    y = conv_block(x, params, f"{prefix}.c0", stride=2 if spec.downsample else 1)
    return conv_block(y, params, f"{prefix}.c1", stride=1)


def init_decoder_stage(params: dict[str, Tensor], prefix: str, rng: np.random.Generator,
                       spec: StageSpec, dtype=np.float32) -> None:
    # spec.in_channels = channels arriving from the deeper level, spec.out_channels =
    # skip channels at this level; upsample halves channels, concat doubles them back.
    cin, cout = spec.in_channels, spec.out_channels
    params[f"{prefix}.up"] = Tensor(
        kaiming_normal(rng, (cin, cout, 2, 2, 2), cin * 8).astype(dtype), requires_grad=True)
    init_conv_block(params, f"{prefix}.c0", rng, 2 * cout, cout, dtype)
    init_conv_block(params, f"{prefix}.c1", rng, cout, cout, dtype)


def decoder_stage(x: Tensor, skip: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Upsample x 2x, concat with the skip features, then two conv blocks."""
    up = eng.conv_transpose3d(x, params[f"{prefix}.up"], stride=2)
    if up.shape[1:] != skip.shape[1:]:
        raise ShapeError(
            f"decoder stage '{prefix}': upsampled spatial shape {up.shape[1:]} "
            f"does not match skip {skip.shape[1:]} (inconsistent architecture config)")
    y = eng.concat([up, skip], axis=0)
    y = conv_block(y, params, f"{prefix}.c0")
    return conv_block(y, params, f"{prefix}.c1")


def init_seg_head(params: dict[str, Tensor], prefix: str, rng: np.random.Generator,
                  cin: int, n_classes: int = 2, dtype=np.float32) -> None:
    params[f"{prefix}.w"] = Tensor(
        kaiming_normal(rng, (n_classes, cin, 1, 1, 1), cin).astype(dtype), requires_grad=True)
    params[f"{prefix}.b"] = Tensor(np.zeros(n_classes, dtype=dtype), requires_grad=True)


def seg_head(x: Tensor, params: dict[str, Tensor], prefix: str = "head") -> Tensor:
    """1x1x1 convolution to per-voxel class logits."""
    return eng.conv3d(x, params[f"{prefix}.w"], params[f"{prefix}.b"], stride=1, padding=0)
