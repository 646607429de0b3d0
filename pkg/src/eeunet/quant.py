"""Post-training int8 quantization simulated with fake-quant (quantize, then dequantize).

Weights use one symmetric signed scale per layer (zero-point 0, codes
-127..127). Activations use one affine unsigned scale/zero-point per site
(codes 0..255). Biases stay in float; they would be int32 on real hardware.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import gate
from . import netgraph as ng
from .netgraph import Layer, ModelConfig, ParameterSet, PathKind

SCALE_FLOOR = 1e-8


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class SiteQuant:
    scale: float
    zero_point: int


@dataclass
class QuantParams:
    weight_scales: dict[str, float] = field(default_factory=dict)
    sites: dict[str, SiteQuant] = field(default_factory=dict)
    bits: int = 8

    @property
    def weight_range(self) -> tuple[int, int]:
        hi = 2 ** (self.bits - 1) - 1
        return -hi, hi

    @property
    def act_range(self) -> tuple[int, int]:
        return 0, 2 ** self.bits - 1

    def to_json(self) -> str:
        doc = {
            "bits": self.bits,
            "layers": [{"name": n, "w_scale": s} for n, s in self.weight_scales.items()],
            "sites": [{"name": n, "scale": q.scale, "zero_point": q.zero_point} for n, q in self.sites.items()],
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "QuantParams":
        doc = json.loads(text)
        return cls(
            {d["name"]: float(d["w_scale"]) for d in doc["layers"]},
            {d["name"]: SiteQuant(float(d["scale"]), int(d["zero_point"])) for d in doc["sites"]},
            int(doc.get("bits", 8)),
        )


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def fake_quant(t: np.ndarray, scale: float, zero_point: int, signed: bool, bits: int = 8) -> np.ndarray:
    """Quantize to integer codes, saturate, and map back to real values."""
    if signed:
        lo, hi = -(2 ** (bits - 1) - 1), 2 ** (bits - 1) - 1
    else:
        lo, hi = 0, 2 ** bits - 1
    q = np.clip(round_half_away(np.asarray(t, dtype=np.float64) / scale) + zero_point, lo, hi)
    return ((q - zero_point) * scale).astype(np.float32)


def weight_scale(w: np.ndarray, bits: int = 8) -> float:
    return max(float(np.abs(w).max()) / (2 ** (bits - 1) - 1), SCALE_FLOOR)


def affine_params(lo: float, hi: float, bits: int = 8) -> SiteQuant:
    # the range is widened to contain 0 so that zero is exactly representable
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    levels = 2 ** bits - 1
    scale = max((hi - lo) / levels, SCALE_FLOOR)
    zp = int(np.clip(round_half_away(np.float64(-lo / scale)), 0, levels))
    return SiteQuant(scale, zp)


def calibrate(params: ParameterSet, config: ModelConfig, calib_scenes, bits: int = 8) -> QuantParams:
    """Weight scales from max|w|; activation ranges from Dual forward passes."""
    if len(calib_scenes) == 0:
        raise CalibrationError("empty calibration set")
    ranges: dict[str, list[float]] = {}

    def observe(name, y):
        lo, hi = float(y.min()), float(y.max())
        if name in ranges:
            r = ranges[name]
            r[0], r[1] = min(r[0], lo), max(r[1], hi)
        else:
            ranges[name] = [lo, hi]
        return y

    for x in calib_scenes:
        ng.check_input(config, x)
        ng.forward(params, x, PathKind.DUAL, hook=observe)
    return QuantParams(
        {name: weight_scale(layer.kernel, bits) for name, layer in params.items()},
        {name: affine_params(lo, hi, bits) for name, (lo, hi) in ranges.items()},
        bits,
    )


def quantize_weights(params: ParameterSet, qp: QuantParams) -> ParameterSet:
    return {
        name: Layer(fake_quant(layer.kernel, qp.weight_scales[name], 0, True, qp.bits), layer.bias)
        for name, layer in params.items()
    }


def activation_hook(qp: QuantParams) -> ng.ActivationHook:
    def hook(name, y):
        site = qp.sites[name]
        return fake_quant(y, site.scale, site.zero_point, False, qp.bits)
    return hook


def quantized_model(params: ParameterSet, qp: QuantParams) -> tuple[ParameterSet, ng.ActivationHook]:
    return quantize_weights(params, qp), activation_hook(qp)


def quantized_infer(params: ParameterSet, qp: QuantParams, config: ModelConfig,
                    x: np.ndarray, t: float) -> gate.Prediction:
    """Gated inference with every weight and activation site fake-quantized."""
    qparams, hook = quantized_model(params, qp)
    return gate.infer(qparams, config, x, t, hook=hook)
