"""Longitudinal 3D lesion segmentation at desk scale.

A from-scratch stack: a numpy-backed reverse-mode tensor engine, a
shared-weight dual-encoder U-Net with temporal attention on every skip
connection, a BI-RADS-aware consistency loss, segmentation metrics, a
synthetic longitudinal phantom generator, and a deterministic training
harness with a finite-difference verification suite.
"""

from .engine import Tensor, no_grad
from .network import NetworkConfig, ConfigError, toy_config, full_scale_config
from .trainer import TrainConfig, train, evaluate, embed_analysis

__all__ = [
    "Tensor",
    "no_grad",
    "NetworkConfig",
    "ConfigError",
    "toy_config",
    "full_scale_config",
    "TrainConfig",
    "train",
    "evaluate",
    "embed_analysis",
]

__version__ = "0.1.0"
