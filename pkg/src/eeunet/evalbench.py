"""Segmentation metrics, MAC/power accounting and the confidence-threshold sweep."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import gate
from . import netgraph as ng
from .netgraph import MacPath, ModelConfig, ParameterSet, PathKind

WATTS_PER_MAC = 4.78e-10

SWEEP_HEADER = [
    "threshold", "exit_rate_float", "mean_iou_float", "exit_rate_quant",
    "mean_iou_quant", "avg_macs", "mac_reduction_pct", "est_power_mw",
]


# --------------------------------------------------------------------------
# IoU and per-class analysis
# --------------------------------------------------------------------------

def confusion(pred: np.ndarray, truth: np.ndarray, classes: int) -> np.ndarray:
    """``cm[t, p]`` = number of pixels with true class t predicted as p."""
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    idx = truth.astype(np.int64).ravel() * classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=classes * classes).reshape(classes, classes)


def class_counts(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(cm)
    return tp, cm.sum(axis=0) - tp, cm.sum(axis=1) - tp


def iou_from_confusion(cm: np.ndarray) -> float:
    """Mean of per-class IoU over classes with a non-empty union."""
    tp, fp, fn = class_counts(cm)
    union = tp + fp + fn
    present = union > 0
    # fsum makes the result independent of summation order
    return math.fsum((tp[present] / union[present]).tolist()) / int(present.sum())


def mean_iou(pred: np.ndarray, truth: np.ndarray, classes: int) -> float:
    return iou_from_confusion(confusion(pred, truth, classes))


def dataset_iou(pairs: Sequence[tuple[np.ndarray, np.ndarray]], classes: int,
                micro: bool = False) -> float:
    """Macro (mean of per-scene mean IoU) by default; ``micro`` pools pixel counts first."""
    if not pairs:
        raise ValueError("dataset_iou needs at least one scene")
    if micro:
        return iou_from_confusion(sum(confusion(p, t, classes) for p, t in pairs))
    return float(np.mean([mean_iou(p, t, classes) for p, t in pairs]))


def per_class_recall(preds: Iterable[np.ndarray], truths: Iterable[np.ndarray],
                     classes: int) -> np.ndarray:
    """Pooled TP / (TP + FN) per class; NaN marks classes absent from every truth map."""
    cm = sum(confusion(p, t, classes) for p, t in zip(preds, truths))
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    out = np.full(classes, np.nan)
    has = support > 0
    out[has] = tp[has] / support[has]
    return out


def class_histogram(preds: Iterable[np.ndarray], truths: Iterable[np.ndarray],
                    target_class: int, classes: int) -> np.ndarray:
    """Counts of predicted classes over pixels whose true class is ``target_class``."""
    if not 0 <= target_class < classes:
        raise ValueError(f"target_class {target_class} outside 0..{classes - 1}")
    hist = np.zeros(classes, dtype=np.int64)
    for p, t in zip(preds, truths):
        hist += np.bincount(p[t == target_class].astype(np.int64), minlength=classes)
    return hist


# --------------------------------------------------------------------------
# cost model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    watts_per_mac: float = WATTS_PER_MAC
    baseline_macs: int = ng.mac_count(ModelConfig(), MacPath.BASELINE)

    def __post_init__(self):
        if not self.watts_per_mac > 0:
            raise ValueError("watts_per_mac must be positive")

    @classmethod
    def for_config(cls, config: ModelConfig, watts_per_mac: float = WATTS_PER_MAC) -> "CostModel":
        return cls(watts_per_mac, ng.mac_count(config, MacPath.BASELINE))


def reduction_pct(avg: float, cost: CostModel) -> float:
    return 100.0 * (cost.baseline_macs - avg) / cost.baseline_macs


def avg_macs(decisions: Sequence[gate.ExitDecision], cost: CostModel) -> tuple[float, float]:
    """Mean MACs per inference and the reduction (%) against the baseline model."""
    if not decisions:
        raise ValueError("avg_macs needs at least one decision")
    avg = float(np.mean([d.macs_spent for d in decisions]))
    return avg, reduction_pct(avg, cost)


def power_estimate(macs: float, cost: CostModel = CostModel()) -> float:
    """Dynamic power in watts."""
    if macs < 0:
        raise ValueError("macs must be non-negative")
    return macs * cost.watts_per_mac


# --------------------------------------------------------------------------
# threshold sweep
# --------------------------------------------------------------------------

@dataclass
class SweepRow:
    threshold: float
    exit_rate_float: float
    mean_iou_float: float
    exit_rate_quant: float | None
    mean_iou_quant: float | None
    avg_macs: float
    mac_reduction_pct: float
    est_power_w: float
    avg_macs_quant: float | None = None
    mac_reduction_pct_quant: float | None = None


@dataclass
class _SceneCache:
    """Per-scene outcomes of both heads; thresholds only choose between them."""
    conf: np.ndarray  # (N,)
    cm_early: np.ndarray  # (N, C, C)
    cm_full: np.ndarray

    def __post_init__(self):
        self.iou_early = np.array([iou_from_confusion(c) for c in self.cm_early])
        self.iou_full = np.array([iou_from_confusion(c) for c in self.cm_full])

    def at(self, t: float, micro: bool) -> tuple[float, float]:
        """(exit fraction, dataset IoU) at threshold ``t``."""
        exits = self.conf >= t
        if micro:
            cm = self.cm_early[exits].sum(axis=0) + self.cm_full[~exits].sum(axis=0)
            iou = iou_from_confusion(cm)
        else:
            iou = float(np.mean(np.where(exits, self.iou_early, self.iou_full)))
        return float(exits.mean()), iou


def thresholds(t_min: float, t_max: float, t_step: float) -> list[float]:
    if t_min > t_max:
        raise ValueError(f"t_min {t_min} exceeds t_max {t_max}")
    if not t_step > 0:
        raise ValueError("t_step must be positive")
    n = int(math.floor((t_max - t_min) / t_step + 1e-9)) + 1
    return [round(t_min + i * t_step, 10) for i in range(n)]


def scene_outcomes(params: ParameterSet, config: ModelConfig, xs: np.ndarray, ys: np.ndarray,
                   hook: ng.ActivationHook | None = None) -> _SceneCache:
    """Run encoder, exit branch and deep path once per scene."""
    conf, cm_e, cm_f = [], [], []
    for x, y in zip(xs, ys):
        s1, s2 = ng.encode(params, x, hook=hook)
        early = ng.early_branch(params, s1, s2, hook=hook)
        full = ng.deep_path(params, s1, s2, hook=hook)
        conf.append(gate.confidence(early))
        cm_e.append(confusion(gate.argmax_classes(early), y, config.classes))
        cm_f.append(confusion(gate.argmax_classes(full), y, config.classes))
    return _SceneCache(np.array(conf), np.stack(cm_e), np.stack(cm_f))


def _direct_outcome(params, config, xs, ys, t, infer_fn, micro):
    preds = [infer_fn(params, config, x, t) for x in xs]
    pairs = [(p.class_map, y) for p, y in zip(preds, ys)]
    rate = float(np.mean([p.decision.path_taken is PathKind.EARLY for p in preds]))
    return rate, dataset_iou(pairs, config.classes, micro), [p.decision for p in preds]


def sweep(params: ParameterSet, config: ModelConfig, xs: np.ndarray, ys: np.ndarray,
          t_min: float = 0.850, t_max: float = 0.990, t_step: float = 0.001,
          cost: CostModel | None = None, qp=None, micro: bool = False,
          reuse_logits: bool = True) -> list[SweepRow]:
    """IoU / exit-rate / MAC / power table over a grid of confidence thresholds.

    ``qp`` (a :class:`~eeunet.quant.QuantParams`) adds the quantized columns.
    ``reuse_logits=False`` re-runs gated inference per threshold instead of
    reusing cached per-scene outcomes; both give identical rows.
    """
    from . import quant

    cost = cost or CostModel.for_config(config)
    early_macs = ng.mac_count(config, MacPath.EARLY)
    full_macs = ng.mac_count(config, MacPath.FULL_WITH_EE)
    grid = thresholds(t_min, t_max, t_step)

    def macs_for(rate):
        return rate * early_macs + (1.0 - rate) * full_macs

    if reuse_logits:
        fcache = scene_outcomes(params, config, xs, ys)
        qcache = None
        if qp is not None:
            qparams, hook = quant.quantized_model(params, qp)
            qcache = scene_outcomes(qparams, config, xs, ys, hook=hook)

    rows = []
    n = len(xs)
    for t in grid:
        if reuse_logits:
            rate_f, iou_f = fcache.at(t, micro)
            rate_q, iou_q = qcache.at(t, micro) if qcache is not None else (None, None)
            n_exit = int(round(rate_f * n))
        else:
            rate_f, iou_f, decisions = _direct_outcome(params, config, xs, ys, t, gate.infer, micro)
            rate_q = iou_q = None
            if qp is not None:
                rate_q, iou_q, _ = _direct_outcome(
                    params, config, xs, ys, t,
                    lambda p, c, x, tt: quant.quantized_infer(p, qp, c, x, tt), micro)
            n_exit = sum(d.path_taken is PathKind.EARLY for d in decisions)
        # exact integer MAC total keeps avg = rate*early + (1-rate)*full free of drift
        avg = (n_exit * early_macs + (n - n_exit) * full_macs) / n
        row = SweepRow(
            threshold=t,
            exit_rate_float=100.0 * rate_f,
            mean_iou_float=iou_f,
            exit_rate_quant=None if rate_q is None else 100.0 * rate_q,
            mean_iou_quant=iou_q,
            avg_macs=avg,
            mac_reduction_pct=reduction_pct(avg, cost),
            est_power_w=power_estimate(avg, cost),
        )
        if rate_q is not None:
            row.avg_macs_quant = macs_for(rate_q)
            row.mac_reduction_pct_quant = reduction_pct(row.avg_macs_quant, cost)
        rows.append(row)
    return rows


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([
                f"{r.threshold:.6g}", _fmt(r.exit_rate_float), _fmt(r.mean_iou_float),
                _fmt(r.exit_rate_quant), _fmt(r.mean_iou_quant), _fmt(r.avg_macs),
                _fmt(r.mac_reduction_pct), _fmt(r.est_power_w * 1e3),
            ])
