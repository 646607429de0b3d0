"""Two-block Tiny U-Net with an early-exit branch off the second encoder block.

The graph is fixed. ``ModelConfig`` only varies the input channel count, the
class count, the three block widths and the square input resolution.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable, NamedTuple

import numpy as np

from . import tensorkit as tk

MAGIC = b"TUW1"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class WeightFormatError(ValueError):
    """Bad magic, unsupported version, truncation or shape corruption in a TUW1 file."""


class PathKind(str, enum.Enum):
    EARLY = "early"
    FULL = "full"
    DUAL = "dual"


class MacPath(str, enum.Enum):
    EARLY = "EarlyPath"
    FULL_WITH_EE = "FullPathWithEE"
    BASELINE = "BaselineNoEE"


class ParamScope(str, enum.Enum):
    BASELINE = "Baseline"
    WITH_EE = "WithEE"
    EE_ONLY = "EEOnly"


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 9
    classes: int = 11
    widths: tuple[int, int, int] = (16, 32, 64)
    resolution: int = 100

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 3 or not (0 < self.widths[0] < self.widths[1] < self.widths[2]):
            raise ConfigError(f"widths must be three strictly increasing counts, got {self.widths}")
        if self.resolution < 4 or self.resolution % 4:
            raise ConfigError(f"resolution must be a positive multiple of 4, got {self.resolution}")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.in_channels < 1:
            raise ConfigError(f"need at least 1 input channel, got {self.in_channels}")


class LayerSpec(NamedTuple):
    name: str
    kind: str  # "conv" or "tconv"
    cin: int
    cout: int
    k: int
    level: int  # conv: output level; tconv: input level (0 = full resolution)
    ee: bool


class Layer(NamedTuple):
    kernel: np.ndarray
    bias: np.ndarray


ParameterSet = dict  # ordered name -> Layer


def architecture(config: ModelConfig) -> list[LayerSpec]:
    r, c = config.in_channels, config.classes
    w1, w2, w3 = config.widths
    return [
        LayerSpec("enc1a", "conv", r, w1, 3, 0, False),
        LayerSpec("enc1b", "conv", w1, w1, 3, 0, False),
        LayerSpec("enc2a", "conv", w1, w2, 3, 1, False),
        LayerSpec("enc2b", "conv", w2, w2, 3, 1, False),
        LayerSpec("bott_a", "conv", w2, w3, 3, 2, False),
        LayerSpec("bott_b", "conv", w3, w3, 3, 2, False),
        LayerSpec("up2", "tconv", w3, w2, 2, 2, False),
        LayerSpec("dec2a", "conv", 2 * w2, w2, 3, 1, False),
        LayerSpec("dec2b", "conv", w2, w2, 3, 1, False),
        LayerSpec("up1", "tconv", w2, w1, 2, 1, False),
        LayerSpec("dec1a", "conv", 2 * w1, w1, 3, 0, False),
        LayerSpec("dec1b", "conv", w1, w1, 3, 0, False),
        LayerSpec("head", "conv", w1, c, 1, 0, False),
        LayerSpec("ee_up", "tconv", w2, w1, 2, 1, True),
        LayerSpec("ee_a", "conv", 2 * w1, w1, 3, 0, True),
        LayerSpec("ee_b", "conv", w1, w1, 3, 0, True),
        LayerSpec("ee_head", "conv", w1, c, 1, 0, True),
    ]


ENCODER = ("enc1a", "enc1b", "enc2a", "enc2b")
EARLY_BRANCH = ("ee_up", "ee_a", "ee_b", "ee_head")
DEEP_PATH = ("bott_a", "bott_b", "up2", "dec2a", "dec2b", "up1", "dec1a", "dec1b", "head")


def kernel_shape(spec: LayerSpec) -> tuple[int, ...]:
    if spec.kind == "tconv":
        return (spec.cin, spec.cout, spec.k, spec.k)
    return (spec.cout, spec.cin, spec.k, spec.k)


def build(config: ModelConfig, seed: int) -> ParameterSet:
    """He-normal kernels (std = sqrt(2 / (Cin * k^2))), zero biases."""
    rng = np.random.default_rng(seed)
    params: ParameterSet = {}
    for spec in architecture(config):
        std = np.sqrt(2.0 / (spec.cin * spec.k * spec.k))
        kernel = (rng.standard_normal(kernel_shape(spec)) * std).astype(tk.DTYPE)
        params[spec.name] = Layer(kernel, np.zeros(spec.cout, dtype=tk.DTYPE))
    return params


def copy_params(params: ParameterSet) -> ParameterSet:
    return {name: Layer(l.kernel.copy(), l.bias.copy()) for name, l in params.items()}


def params_equal(a: ParameterSet, b: ParameterSet) -> bool:
    """Bit-exact equality of two parameter sets."""
    if list(a) != list(b):
        return False
    return all(
        a[n].kernel.shape == b[n].kernel.shape
        and a[n].kernel.tobytes() == b[n].kernel.tobytes()
        and a[n].bias.tobytes() == b[n].bias.tobytes()
        for n in a
    )


def _scope_layers(config: ModelConfig, scope: ParamScope) -> list[LayerSpec]:
    scope = ParamScope(scope)
    specs = architecture(config)
    if scope is ParamScope.BASELINE:
        return [s for s in specs if not s.ee]
    if scope is ParamScope.EE_ONLY:
        return [s for s in specs if s.ee]
    return specs


def layer_params(spec: LayerSpec) -> int:
    return spec.k * spec.k * spec.cin * spec.cout + spec.cout


def param_count(config: ModelConfig, scope: ParamScope | str = ParamScope.WITH_EE) -> int:
    return sum(layer_params(s) for s in _scope_layers(config, scope))


def layer_macs(config: ModelConfig, spec: LayerSpec) -> int:
    side = config.resolution >> spec.level
    return side * side * spec.k * spec.k * spec.cin * spec.cout


def mac_count(config: ModelConfig, path: MacPath | str) -> int:
    """Multiplications executed along ``path``; pooling, ReLU and softmax count zero."""
    path = MacPath(path)
    specs = architecture(config)
    if path is MacPath.EARLY:
        names = set(ENCODER) | set(EARLY_BRANCH)
    elif path is MacPath.BASELINE:
        names = set(ENCODER) | set(DEEP_PATH)
    else:
        names = {s.name for s in specs}
    return sum(layer_macs(config, s) for s in specs if s.name in names)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

ActivationHook = Callable[[str, np.ndarray], np.ndarray]


def _concat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([a, b], axis=-3)


def _split(g: np.ndarray, n_first: int) -> tuple[np.ndarray, np.ndarray]:
    return g[..., :n_first, :, :], g[..., n_first:, :, :]


def _layer(params, name, x, cache, hook, kind="conv", act=True):
    layer = params[name]
    z = (tk.tconv2d if kind == "tconv" else tk.conv2d)(x, layer.kernel, layer.bias)
    y = tk.relu(z) if act else z
    if hook is not None:
        y = hook(name, y)
    if cache is not None:
        cache[name] = (x, z)
    return y


def encode(params: ParameterSet, x: np.ndarray, cache: dict | None = None,
           hook: ActivationHook | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Shared encoder. Returns the full-resolution skip and the block-2 output."""
    if hook is not None:
        x = hook("input", x)
    h = _layer(params, "enc1a", x, cache, hook)
    s1 = _layer(params, "enc1b", h, cache, hook)
    p1, m1 = tk.maxpool2(s1)
    h = _layer(params, "enc2a", p1, cache, hook)
    s2 = _layer(params, "enc2b", h, cache, hook)
    if cache is not None:
        cache["pool1"] = m1
    return s1, s2


def early_branch(params: ParameterSet, s1: np.ndarray, s2: np.ndarray,
                 cache: dict | None = None, hook: ActivationHook | None = None) -> np.ndarray:
    u = _layer(params, "ee_up", s2, cache, hook, kind="tconv")
    h = _layer(params, "ee_a", _concat(u, s1), cache, hook)
    h = _layer(params, "ee_b", h, cache, hook)
    return _layer(params, "ee_head", h, cache, hook, act=False)


def deep_path(params: ParameterSet, s1: np.ndarray, s2: np.ndarray,
              cache: dict | None = None, hook: ActivationHook | None = None) -> np.ndarray:
    p2, m2 = tk.maxpool2(s2)
    h = _layer(params, "bott_a", p2, cache, hook)
    h = _layer(params, "bott_b", h, cache, hook)
    u = _layer(params, "up2", h, cache, hook, kind="tconv")
    h = _layer(params, "dec2a", _concat(u, s2), cache, hook)
    h = _layer(params, "dec2b", h, cache, hook)
    u = _layer(params, "up1", h, cache, hook, kind="tconv")
    h = _layer(params, "dec1a", _concat(u, s1), cache, hook)
    h = _layer(params, "dec1b", h, cache, hook)
    if cache is not None:
        cache["pool2"] = m2
    return _layer(params, "head", h, cache, hook, act=False)


def check_input(config: ModelConfig, x: np.ndarray) -> None:
    want = (config.in_channels, config.resolution, config.resolution)
    if x.ndim not in (3, 4) or x.shape[-3:] != want:
        raise tk.ShapeError(f"input shape {x.shape} does not match config {want}")


def forward(params: ParameterSet, x: np.ndarray, path: PathKind | str = PathKind.FULL,
            cache: dict | None = None, hook: ActivationHook | None = None):
    """Logits for ``path``; ``DUAL`` returns ``(early, full)`` from one encoder pass.

    Pass a dict as ``cache`` to keep the activations :func:`backward` needs.
    """
    path = PathKind(path)
    s1, s2 = encode(params, x, cache, hook)
    if path is PathKind.EARLY:
        return early_branch(params, s1, s2, cache, hook)
    if path is PathKind.FULL:
        return deep_path(params, s1, s2, cache, hook)
    return early_branch(params, s1, s2, cache, hook), deep_path(params, s1, s2, cache, hook)


def _layer_back(params, name, cache, g, grads, kind="conv", act=True):
    x, z = cache[name]
    if act:
        g = tk.relu_backward(z, g)
    back = tk.tconv2d_backward if kind == "tconv" else tk.conv2d_backward
    dx, dk, db = back(x, params[name].kernel, g)
    grads[name] = Layer(dk, db)
    return dx


def backward(params: ParameterSet, cache: dict, d_early: np.ndarray | None,
             d_full: np.ndarray | None) -> ParameterSet:
    """Gradients of every layer touched by the cached forward pass.

    ``d_early`` / ``d_full`` are the loss gradients w.r.t. the two logit maps;
    either may be ``None`` when that path was not run.
    """
    grads: ParameterSet = {}
    w1 = params["enc1b"].bias.shape[0]
    w2 = params["enc2b"].bias.shape[0]
    d_s1 = 0.0
    d_s2 = 0.0
    if d_full is not None:
        g = _layer_back(params, "head", cache, d_full, grads, act=False)
        g = _layer_back(params, "dec1b", cache, g, grads)
        g = _layer_back(params, "dec1a", cache, g, grads)
        g, gs = _split(g, w1)
        d_s1 = d_s1 + gs
        g = _layer_back(params, "up1", cache, g, grads, kind="tconv")
        g = _layer_back(params, "dec2b", cache, g, grads)
        g = _layer_back(params, "dec2a", cache, g, grads)
        g, gs = _split(g, w2)
        d_s2 = d_s2 + gs
        g = _layer_back(params, "up2", cache, g, grads, kind="tconv")
        g = _layer_back(params, "bott_b", cache, g, grads)
        g = _layer_back(params, "bott_a", cache, g, grads)
        d_s2 = d_s2 + tk.maxpool2_backward(cache["pool2"], g)
    if d_early is not None:
        g = _layer_back(params, "ee_head", cache, d_early, grads, act=False)
        g = _layer_back(params, "ee_b", cache, g, grads)
        g = _layer_back(params, "ee_a", cache, g, grads)
        g, gs = _split(g, w1)
        d_s1 = d_s1 + gs
        d_s2 = d_s2 + _layer_back(params, "ee_up", cache, g, grads, kind="tconv")
    g = _layer_back(params, "enc2b", cache, d_s2, grads)
    g = _layer_back(params, "enc2a", cache, g, grads)
    d_s1 = d_s1 + tk.maxpool2_backward(cache["pool1"], g)
    g = _layer_back(params, "enc1b", cache, d_s1, grads)
    _layer_back(params, "enc1a", cache, g, grads)
    return {name: grads[name] for name in params if name in grads}


# --------------------------------------------------------------------------
# TUW1 persistence
# --------------------------------------------------------------------------

def save_weights(params: ParameterSet, config: ModelConfig, sink: BinaryIO) -> None:
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    out.append(struct.pack("<HHH3H", config.in_channels, config.classes, config.resolution, *config.widths))
    out.append(struct.pack("<I", len(params)))
    for name, layer in params.items():
        raw = name.encode("utf-8")
        kernel = np.ascontiguousarray(layer.kernel, dtype="<f4")
        bias = np.ascontiguousarray(layer.bias, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<B{kernel.ndim}I", kernel.ndim, *kernel.shape))
        out.append(kernel.tobytes())
        out.append(struct.pack("<I", bias.size))
        out.append(bias.tobytes())
    sink.write(b"".join(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFormatError(
                f"truncated weight file: need {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(source: BinaryIO) -> tuple[ModelConfig, ParameterSet]:
    rd = _Reader(source.read())
    magic = rd.take(4)
    if magic != MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = rd.unpack("<I")
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported TUW1 version {version}")
    r, c, res, w1, w2, w3 = rd.unpack("<HHH3H")
    try:
        config = ModelConfig(r, c, (w1, w2, w3), res)
    except ConfigError as exc:
        raise WeightFormatError(f"corrupt header: {exc}") from None
    expected = {s.name: s for s in architecture(config)}
    (count,) = rd.unpack("<I")
    params: ParameterSet = {}
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8")
        (rank,) = rd.unpack("<B")
        dims = rd.unpack(f"<{rank}I")
        kernel = np.frombuffer(rd.take(4 * int(np.prod(dims))), dtype="<f4").reshape(dims)
        (blen,) = rd.unpack("<I")
        bias = np.frombuffer(rd.take(4 * blen), dtype="<f4")
        spec = expected.get(name)
        if spec is None:
            raise WeightFormatError(f"corrupt weight file: unknown layer {name!r}")
        if tuple(dims) != kernel_shape(spec) or blen != spec.cout:
            raise WeightFormatError(
                f"corrupt weight file: layer {name!r} has kernel {tuple(dims)} / bias {blen}, "
                f"expected {kernel_shape(spec)} / {spec.cout}")
        params[name] = Layer(kernel.astype(tk.DTYPE), bias.astype(tk.DTYPE))
    missing = [n for n in expected if n not in params]
    if missing:
        raise WeightFormatError(f"corrupt weight file: missing layers {missing}")
    return config, {n: params[n] for n in expected}
