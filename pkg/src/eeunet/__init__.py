"""Early-exit Tiny U-Net for multi-channel radar oil-slick thickness maps."""

from .netgraph import ModelConfig, PathKind, build, forward, load_weights, mac_count, param_count, save_weights
from .gate import confidence, decide, infer

__all__ = [
    "ModelConfig", "PathKind", "build", "forward", "load_weights", "mac_count",
    "param_count", "save_weights", "confidence", "decide", "infer",
]
__version__ = "0.1.0"
