import csv
import math

import numpy as np
import pytest

from eeunet import evalbench as eb
from eeunet import netgraph as ng
from eeunet import quant as qt
from eeunet.gate import ExitDecision
from eeunet.netgraph import MacPath, ModelConfig, PathKind

from conftest import TOY

REFERENCE_COST = eb.CostModel(baseline_macs=260_560_000)


def oracle_iou(pred, truth, classes):
    """Pixel-by-pixel counting, undefined classes skipped."""
    vals = []
    for c in range(classes):
        tp = fp = fn = 0
        for p, t in zip(pred.ravel().tolist(), truth.ravel().tolist()):
            tp += p == c and t == c
            fp += p == c and t != c
            fn += p != c and t == c
        if tp + fp + fn:
            vals.append(tp / (tp + fp + fn))
    return math.fsum(vals) / len(vals)


def decisions(macs):
    return [ExitDecision(0.9, 0.9, PathKind.EARLY, m) for m in macs]


class TestIoU:
    def test_perfect(self, rng):
        truth = rng.permutation(np.arange(121) % 11).reshape(11, 11)
        assert eb.mean_iou(truth, truth, 11) == 1.0

    def test_disjoint(self):
        assert eb.mean_iou(np.ones((4, 4), int), np.full((4, 4), 2), 11) == 0.0

    def test_oracle(self, rng):
        for _ in range(50):
            k = int(rng.integers(1, 12))
            pred = rng.integers(0, k, (16, 16))
            truth = rng.integers(0, k, (16, 16))
            assert eb.mean_iou(pred, truth, 11) == oracle_iou(pred, truth, 11)

    def test_relabel_symmetric(self, rng):
        perm = rng.permutation(11)
        pred, truth = rng.integers(0, 11, (2, 16, 16))
        assert eb.mean_iou(perm[pred], perm[truth], 11) == pytest.approx(eb.mean_iou(pred, truth, 11), abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            eb.mean_iou(np.zeros((4, 4), int), np.zeros((4, 5), int), 11)


class TestDatasetIoU:
    def test_identical_scenes(self, rng):
        p, t = rng.integers(0, 11, (2, 16, 16))
        assert eb.dataset_iou([(p, t)] * 3, 11) == pytest.approx(eb.mean_iou(p, t, 11), abs=1e-15)

    def test_macro_of_two(self):
        truth = np.ones(5, int)
        s1 = (np.array([1, 1, 1, 0, 0]), truth)
        s2 = (np.array([1, 1, 1, 1, 0]), truth)
        # class 0 is only predicted, so it enters the mean with IoU 0
        v1, v2 = eb.mean_iou(*s1, 2), eb.mean_iou(*s2, 2)
        assert (v1, v2) == (0.3, 0.4)
        assert eb.dataset_iou([s1, s2], 2) == pytest.approx(0.35, abs=1e-15)

    def test_scalar_oracle_5_scenes(self, rng):
        pairs = [tuple(rng.integers(0, 11, (2, 12, 12))) for _ in range(5)]
        assert eb.dataset_iou(pairs, 11) == pytest.approx(np.mean([oracle_iou(p, t, 11) for p, t in pairs]), abs=1e-12)

    def test_micro_pools_counts(self, rng):
        pairs = [tuple(rng.integers(0, 4, (2, 6, 6))) for _ in range(3)]
        pred = np.concatenate([p for p, _ in pairs])
        truth = np.concatenate([t for _, t in pairs])
        assert eb.dataset_iou(pairs, 4, micro=True) == pytest.approx(oracle_iou(pred, truth, 4), abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            eb.dataset_iou([], 11)


class TestPerClass:
    def test_recall_perfect_and_absent(self):
        t = np.array([[0, 1], [1, 3]])
        r = eb.per_class_recall([t], [t], 5)
        assert r[[0, 1, 3]].tolist() == [1.0, 1.0, 1.0]
        assert np.isnan(r[2]) and np.isnan(r[4])

    def test_recall_oracle(self, rng):
        preds = list(rng.integers(0, 6, (4, 8, 8)))
        truths = list(rng.integers(0, 5, (4, 8, 8)))
        r = eb.per_class_recall(preds, truths, 6)
        for c in range(5):
            hit = sum(int(((p == c) & (t == c)).sum()) for p, t in zip(preds, truths))
            sup = sum(int((t == c).sum()) for t in truths)
            assert r[c] == hit / sup
        assert np.isnan(r[5])

    def test_histogram(self, rng):
        preds = list(rng.integers(0, 11, (3, 8, 8)))
        truths = list(rng.integers(0, 11, (3, 8, 8)))
        h = eb.class_histogram(preds, truths, 5, 11)
        assert h.sum() == sum(int((t == 5).sum()) for t in truths)
        for c in range(11):
            assert h[c] == sum(int(((p == c) & (t == 5)).sum()) for p, t in zip(preds, truths))
        perfect = eb.class_histogram(truths, truths, 5, 11)
        assert perfect[5] == perfect.sum()

    def test_histogram_target_range(self):
        with pytest.raises(ValueError):
            eb.class_histogram([], [], 11, 11)


class TestCost:
    def test_all_early_reference_geometry(self):
        avg, red = eb.avg_macs(decisions([150_560_000] * 4), REFERENCE_COST)
        assert avg == 150_560_000
        assert red == pytest.approx(42.22, abs=0.005)

    def test_all_full_reference_geometry(self):
        _, red = eb.avg_macs(decisions([336_400_000] * 2), REFERENCE_COST)
        assert red == pytest.approx(-29.11, abs=0.005)

    def test_half_half_desk(self):
        avg, _ = eb.avg_macs(decisions([146_560_000, 331_360_000]), eb.CostModel())
        assert avg == 238_960_000

    def test_default_baseline(self):
        assert eb.CostModel().baseline_macs == ng.mac_count(ModelConfig(), MacPath.BASELINE)

    def test_empty(self):
        with pytest.raises(ValueError):
            eb.avg_macs([], eb.CostModel())

    @pytest.mark.parametrize("macs, mw", [(425e6, 203.15), (150.56e6, 71.97), (336.4e6, 160.8), (261e6, 124.8)])
    def test_power(self, macs, mw):
        assert eb.power_estimate(macs) * 1e3 == pytest.approx(mw, abs=0.05)

    def test_power_zero_and_linear(self, rng):
        assert eb.power_estimate(0) == 0
        for a, b in rng.uniform(0, 5e8, (20, 2)):
            assert eb.power_estimate(a + b) == pytest.approx(eb.power_estimate(a) + eb.power_estimate(b), rel=1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            eb.CostModel(watts_per_mac=0)
        with pytest.raises(ValueError):
            eb.power_estimate(-1)


class TestSweep:
    def setup_method(self):
        self.params = ng.build(TOY, 6)
        rng = np.random.default_rng(8)
        self.xs = rng.standard_normal((5, 3, 8, 8)).astype(np.float32)
        self.ys = rng.integers(0, 4, (5, 8, 8))
        # spread confidences by scaling inputs
        self.xs *= np.array([0.1, 1, 3, 10, 30], np.float32)[:, None, None, None]

    def test_grid_size(self):
        assert len(eb.thresholds(0.850, 0.990, 0.001)) == 141
        rows = eb.sweep(self.params, TOY, self.xs, self.ys)
        assert len(rows) == 141
        assert rows[0].threshold == 0.85 and rows[-1].threshold == 0.99

    def test_bad_grid(self):
        with pytest.raises(ValueError):
            eb.thresholds(0.9, 0.8, 0.01)
        with pytest.raises(ValueError):
            eb.thresholds(0.8, 0.9, 0)

    def test_monotone_and_bounded(self):
        rows = eb.sweep(self.params, TOY, self.xs, self.ys, 0.0, 1.0, 0.01)
        early, full = ng.mac_count(TOY, MacPath.EARLY), ng.mac_count(TOY, MacPath.FULL_WITH_EE)
        rates = [r.exit_rate_float for r in rows]
        macs = [r.avg_macs for r in rows]
        assert rates[0] == 100 and rates[-1] == 0
        assert all(b <= a for a, b in zip(rates, rates[1:]))
        assert all(b >= a for a, b in zip(macs, macs[1:]))
        for r in rows:
            assert early <= r.avg_macs <= full
            frac = r.exit_rate_float / 100
            assert r.avg_macs == pytest.approx(frac * early + (1 - frac) * full, rel=1e-15)

    def test_cached_equals_direct(self):
        qp = qt.calibrate(self.params, TOY, self.xs[:2])
        kw = dict(t_min=0.0, t_max=1.0, t_step=0.05, qp=qp)
        assert eb.sweep(self.params, TOY, self.xs, self.ys, **kw) == \
            eb.sweep(self.params, TOY, self.xs, self.ys, reuse_logits=False, **kw)
        kw["micro"] = True
        assert eb.sweep(self.params, TOY, self.xs, self.ys, **kw) == \
            eb.sweep(self.params, TOY, self.xs, self.ys, reuse_logits=False, **kw)

    def test_csv(self, tmp_path):
        rows = eb.sweep(self.params, TOY, self.xs, self.ys, 0.5, 0.6, 0.05)
        eb.write_sweep_csv(rows, tmp_path / "s.csv")
        text = (tmp_path / "s.csv").read_text().splitlines()
        assert text[0] == ("threshold,exit_rate_float,mean_iou_float,exit_rate_quant,"
                           "mean_iou_quant,avg_macs,mac_reduction_pct,est_power_mw")
        body = list(csv.reader(text[1:]))
        assert len(body) == 3
        assert all(r[3] == "" and r[4] == "" for r in body)
        assert float(body[0][7]) == pytest.approx(rows[0].avg_macs * eb.WATTS_PER_MAC * 1e3, rel=1e-12)

    def test_quant_columns(self, tmp_path):
        qp = qt.calibrate(self.params, TOY, self.xs[:2])
        rows = eb.sweep(self.params, TOY, self.xs, self.ys, 0.5, 0.6, 0.05, qp=qp)
        eb.write_sweep_csv(rows, tmp_path / "s.csv")
        body = list(csv.reader((tmp_path / "s.csv").read_text().splitlines()[1:]))
        assert all(r[3] != "" and r[4] != "" for r in body)
        assert all(0 <= r.exit_rate_quant <= 100 for r in rows)
