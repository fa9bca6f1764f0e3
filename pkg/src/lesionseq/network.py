"""Full segmentation model: shared-weight dual encoder, temporal attention at
every skip level (bottleneck included), a single decoder, and the 1x1x1 head.

Variants:
  full    - learned temporal attention at each skip level.
  no-bcr  - identical network to ``full`` (the difference is a loss switch).
  no-tpa  - attention replaced by a fixed gated difference (both gates = 1).
  single  - prior volume ignored entirely; skips are the raw current features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers, temporal_attention as ta
from .engine import Tensor

VARIANTS = ("full", "no-tpa", "no-bcr", "single")


class ConfigError(ValueError):
    """Invalid network/training configuration."""


@dataclass(frozen=True)
class NetworkConfig:
    stages: int = 3
    channels: tuple[int, ...] = (8, 16, 32)
    in_channels: int = 1
    variant: str = "full"
    n_classes: int = 2

    def __post_init__(self):
        if self.stages < 1:
            raise ConfigError(f"need at least 1 stage, got {self.stages}")
        if len(self.channels) != self.stages:
            raise ConfigError(
                f"channel list {self.channels} must have one entry per stage ({self.stages})")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.stages - 1)

    def stage_specs(self) -> list[layers.StageSpec]:
        specs = []
        for m in range(self.stages):
            cin = self.in_channels if m == 0 else self.channels[m - 1]
            specs.append(layers.StageSpec(cin, self.channels[m], downsample=m > 0))
        return specs

    def uses_learned_attention(self) -> bool:
        return self.variant in ("full", "no-bcr")


def toy_config(variant: str = "full") -> NetworkConfig:
    """3-stage configuration used for tests and desk-scale training."""
    return NetworkConfig(stages=3, channels=(8, 16, 32), variant=variant)


def full_scale_config(variant: str = "full") -> NetworkConfig:
    """6-stage configuration with the production channel progression."""
    return NetworkConfig(stages=6, channels=(32, 64, 128, 256, 320, 320), variant=variant)


@dataclass
class ForwardResult:
    logits: Tensor
    # per-level (current, prior) encoder features, shallow to deep, pre-attention
    features: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    # per-level gate pair; Tensors for the full variant, plain floats otherwise
    attention: list[tuple] = field(default_factory=list)


def init_params(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Build the flat named parameter dict in a deterministic order."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for m, spec in enumerate(config.stage_specs()):
        layers.init_encoder_stage(params, f"enc{m}", rng, spec, dtype)
    if config.uses_learned_attention():
        for m in range(config.stages):
            ta.init_attention(params, f"att{m}", rng, config.channels[m], dtype)
    for m in range(config.stages - 2, -1, -1):
        spec = layers.StageSpec(config.channels[m + 1], config.channels[m])
        layers.init_decoder_stage(params, f"dec{m}", rng, spec, dtype)
    layers.init_seg_head(params, "head", rng, config.channels[0], config.n_classes, dtype)
    return params


def zero_grad(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.zero_grad()


def _validate_volume(x: Tensor, config: NetworkConfig, name: str) -> None:
    if x.ndim != 4:
        raise ConfigError(f"{name} must be (C, D, H, W), got shape {x.shape}")
    if x.shape[0] != config.in_channels:
        raise ConfigError(f"{name} has {x.shape[0]} channels, config expects {config.in_channels}")
    f = config.downsample_factor
    bad = [e for e in x.shape[1:] if e % f != 0]
    if bad:
        raise ConfigError(
            f"{name} spatial extents {x.shape[1:]} must be divisible by {f} "
            f"for a {config.stages}-stage network")


def encode(x: Tensor, params: dict[str, Tensor], config: NetworkConfig) -> list[Tensor]:
    """Run the encoder, returning the per-stage feature maps shallow to deep."""
    feats = []
    y = x
    for m, spec in enumerate(config.stage_specs()):
        y = layers.encoder_stage(y, params, f"enc{m}", spec)
        feats.append(y)
    return feats


def forward(curr_vol, prior_vol, params: dict[str, Tensor], config: NetworkConfig) -> ForwardResult:
    """Segment the current volume given the registered prior volume.

    Returns logits with the input's spatial shape, the per-level encoder
    features of both timepoints (for the consistency loss), and the per-level
    attention gates.
    """
    curr_vol = curr_vol if isinstance(curr_vol, Tensor) else Tensor(curr_vol)
    prior_vol = prior_vol if isinstance(prior_vol, Tensor) else Tensor(prior_vol)
    _validate_volume(curr_vol, config, "current volume")
    if config.variant != "single":
        if curr_vol.shape != prior_vol.shape:
            raise ConfigError(
                f"volume pair must share a shape, got {curr_vol.shape} vs {prior_vol.shape}")
        _validate_volume(prior_vol, config, "prior volume")

    curr_feats = encode(curr_vol, params, config)
    if config.variant == "single":
        prior_feats = curr_feats
    else:
        prior_feats = encode(prior_vol, params, config)

    skips: list[Tensor] = []
    attention: list[tuple] = []
    for m in range(config.stages):
        kc, kp = curr_feats[m], prior_feats[m]
        if config.variant == "single":
            skips.append(kc)
            attention.append((1.0, 0.0))
        elif config.variant == "no-tpa":
            skips.append(ta.fixed_difference_modulate(kc, kp))
            attention.append((1.0, 1.0))
        else:
            mod, gates = ta.temporal_attention(kc, kp, params[f"att{m}.w"], params[f"att{m}.b"])
            skips.append(mod)
            attention.append(gates)

    y = skips[-1]
    for m in range(config.stages - 2, -1, -1):
        y = layers.decoder_stage(y, skips[m], params, f"dec{m}")
    logits = layers.seg_head(y, params, "head")

    features = list(zip(curr_feats, prior_feats))
    return ForwardResult(logits=logits, features=features, attention=attention)


def forward_no_tpa(curr_vol, prior_vol, params: dict[str, Tensor],
                   config: NetworkConfig) -> ForwardResult:
    """Ablation entry point: same pipeline with the fixed-gate difference skip."""
    cfg = NetworkConfig(config.stages, config.channels, config.in_channels,
                        "no-tpa", config.n_classes)
    return forward(curr_vol, prior_vol, params, cfg)


def parameter_count(config: NetworkConfig) -> dict[str, int]:
    """Closed-form parameter census; pins the architecture wiring in tests.

    ``conv_weights`` counts the 3x3x3 and upsampling 2x2x2 kernels whose
    in/out channels both follow the config's channel list (the head is kept
    separate because its output extent is the fixed class count).
    """
    ch, cin0 = config.channels, config.in_channels
    k3 = layers.KERNEL ** 3
    conv_w = conv_b = norm = 0
    for m in range(config.stages):
        cin = cin0 if m == 0 else ch[m - 1]
        conv_w += ch[m] * cin * k3 + ch[m] * ch[m] * k3
        conv_b += 2 * ch[m]
        norm += 4 * ch[m]
    for m in range(config.stages - 1):
        conv_w += ch[m + 1] * ch[m] * 8          # upsample kernel
        conv_w += ch[m] * 2 * ch[m] * k3 + ch[m] * ch[m] * k3
        conv_b += 2 * ch[m]
        norm += 4 * ch[m]
    attention = sum(c + 1 for c in ch) if config.uses_learned_attention() else 0
    head = config.n_classes * ch[0] + config.n_classes
    total = conv_w + conv_b + norm + attention + head
    return {"conv_weights": conv_w, "conv_biases": conv_b, "norm": norm,
            "attention": attention, "head": head, "total": total}
