import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eeunet import gate
from eeunet import netgraph as ng
from eeunet.netgraph import MacPath, PathKind

from conftest import TOY


def scalar_confidence(logits):
    c, h, w = logits.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            zs = [float(logits[k, y, x]) for k in range(c)]
            m = max(zs)
            es = [math.exp(z - m) for z in zs]
            total += max(es) / sum(es)
    return total / (h * w)


class TestConfidence:
    def test_uniform(self):
        assert gate.confidence(np.zeros((11, 4, 4))) == pytest.approx(1 / 11, abs=1e-7)

    def test_two_pixel_mean(self):
        # two classes: p = sigmoid(z0 - z1)
        z = np.zeros((2, 1, 2))
        z[0, 0, 0] = math.log(0.6 / 0.4)
        z[0, 0, 1] = math.log(0.8 / 0.2)
        assert gate.confidence(z) == pytest.approx(0.7, abs=1e-7)

    def test_matches_scalar_oracle(self, rng):
        for _ in range(20):
            z = 3 * rng.standard_normal((11, 8, 8)).astype(np.float32)
            assert abs(gate.confidence(z) - scalar_confidence(z)) < 1e-6


class TestDecide:
    def test_rules(self):
        assert gate.decide(0.95, 0.945) is PathKind.EARLY
        assert gate.decide(0.90, 0.945) is PathKind.FULL
        assert gate.decide(0.93, 0.93) is PathKind.EARLY

    @pytest.mark.parametrize("t", [-0.01, 1.0 + 1e-9])
    def test_out_of_range(self, t):
        with pytest.raises(ng.ConfigError):
            gate.decide(0.5, t)

    @settings(max_examples=200)
    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_monotone_in_threshold(self, c, t1, t2):
        lo, hi = sorted((t1, t2))
        if gate.decide(c, lo) is PathKind.FULL:
            assert gate.decide(c, hi) is PathKind.FULL


class TestInfer:
    def setup_method(self):
        self.params = ng.build(TOY, 9)
        self.x = np.random.default_rng(3).standard_normal((3, 8, 8)).astype(np.float32)

    def test_zero_threshold_exits_early(self):
        pred = gate.infer(self.params, TOY, self.x, 0.0)
        assert pred.decision.path_taken is PathKind.EARLY
        assert pred.decision.macs_spent == ng.mac_count(TOY, MacPath.EARLY)
        early = ng.forward(self.params, self.x, PathKind.EARLY)
        np.testing.assert_array_equal(pred.class_map, early.argmax(axis=0))

    def test_threshold_one(self):
        pred = gate.infer(self.params, TOY, self.x, 1.0)
        assert pred.decision.confidence < 1.0
        assert pred.decision.path_taken is PathKind.FULL
        assert pred.decision.macs_spent == ng.mac_count(TOY, MacPath.FULL_WITH_EE)
        full = ng.forward(self.params, self.x, PathKind.FULL)
        np.testing.assert_array_equal(pred.class_map, full.argmax(axis=0))

    def test_rejects_threshold_above_one(self):
        with pytest.raises(ng.ConfigError):
            gate.infer(self.params, TOY, self.x, 1.0 + 1e-6)

    def test_logits_independent_of_threshold(self):
        preds = [gate.infer(self.params, TOY, self.x, t) for t in np.linspace(0, 1, 11)]
        assert len({p.early_logits.tobytes() for p in preds}) == 1
        assert {p.decision.macs_spent for p in preds} <= {
            ng.mac_count(TOY, MacPath.EARLY), ng.mac_count(TOY, MacPath.FULL_WITH_EE)}

    def test_argmax_ties_to_smallest(self):
        z = np.zeros((4, 2, 2))
        z[2] = 1.0
        z[3] = 1.0
        assert np.all(gate.argmax_classes(z) == 2)
