"""Scene confidence, the exit rule, and confidence-gated inference."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import netgraph as ng
from .netgraph import ConfigError, MacPath, ModelConfig, ParameterSet, PathKind
from .tensorkit import softmax_c


@dataclass(frozen=True)
class ExitDecision:
    confidence: float
    threshold: float
    path_taken: PathKind  # EARLY or FULL
    macs_spent: int


@dataclass
class Prediction:
    class_map: np.ndarray
    decision: ExitDecision
    early_logits: np.ndarray


def confidence(logits: np.ndarray) -> float:
    """Mean over pixels of the top softmax probability (class axis first)."""
    return float(softmax_c(logits).max(axis=-3).mean(dtype=np.float64))


def check_threshold(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"confidence threshold must lie in [0, 1], got {t}")


def decide(c: float, t: float) -> PathKind:
    check_threshold(t)
    return PathKind.EARLY if c >= t else PathKind.FULL


def argmax_classes(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the smallest class index on ties
    return logits.argmax(axis=-3).astype(np.uint8)


def infer(params: ParameterSet, config: ModelConfig, x: np.ndarray, t: float,
          hook: ng.ActivationHook | None = None) -> Prediction:
    """Run encoder + exit branch, then the deep path only if the gate declines.

    The encoder output is reused by the deep path; it is never recomputed.
    """
    check_threshold(t)
    ng.check_input(config, x)
    s1, s2 = ng.encode(params, x, hook=hook)
    early = ng.early_branch(params, s1, s2, hook=hook)
    c = confidence(early)
    path = decide(c, t)
    if path is PathKind.EARLY:
        class_map = argmax_classes(early)
        macs = ng.mac_count(config, MacPath.EARLY)
    else:
        class_map = argmax_classes(ng.deep_path(params, s1, s2, hook=hook))
        macs = ng.mac_count(config, MacPath.FULL_WITH_EE)
    return Prediction(class_map, ExitDecision(c, t, path, macs), early)
