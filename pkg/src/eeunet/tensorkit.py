"""Dense float32 kernels with hand-paired gradients.

Tensors are plain ``numpy`` arrays laid out as ``(C, H, W)`` or, with a
leading batch axis, ``(N, C, H, W)``. Every forward kernel has a matching
``*_backward`` that returns the exact adjoint. Nothing here mutates its inputs.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor extents violate a kernel contract."""


def _dtype(*arrays: np.ndarray) -> np.dtype:
    # float32 unless a caller deliberately works in float64 (gradient checks)
    return np.result_type(DTYPE, *arrays)


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected rank 3 or 4 tensor, got rank {x.ndim}")


def _unbatch(y: np.ndarray, squeeze: bool) -> np.ndarray:
    return y[0] if squeeze else y


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N, H, W, C, k, k) zero-padded 'same' windows."""
    p = k // 2
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # N, C, H, W, k, k
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 correlation with zero 'same' padding.

    ``kernel`` is ``(Cout, Cin, k, k)`` with odd ``k`` (3 for block convs,
    1 for the output heads).
    """
    xb, squeeze = _batched(x)
    cout, cin, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel spatial size must be odd and square, got {kh}x{kw}")
    if xb.shape[1] != cin:
        raise ShapeError(f"channel axis: input has {xb.shape[1]}, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias axis: expected ({cout},), got {bias.shape}")
    cols = _patches(xb, kh)
    out = np.tensordot(cols, kernel, axes=([3, 4, 5], [1, 2, 3]))  # N, H, W, Cout
    out += bias
    return _unbatch(np.ascontiguousarray(out.transpose(0, 3, 1, 2), dtype=_dtype(x, kernel)), squeeze)


def conv2d_backward(
    x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(d_input, d_kernel, d_bias)`` for :func:`conv2d`."""
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_out)
    k = kernel.shape[-1]
    cols = _patches(xb, k)
    d_kernel = np.tensordot(gb, cols, axes=([0, 2, 3], [0, 1, 2]))  # Cout, Cin, k, k
    d_bias = gb.sum(axis=(0, 2, 3))
    # adjoint of a 'same' correlation is a 'same' correlation with the flipped,
    # channel-transposed kernel
    flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gcols = _patches(gb, k)
    d_x = np.tensordot(gcols, flipped, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    dt = _dtype(x, kernel, grad_out)
    return (
        _unbatch(np.ascontiguousarray(d_x, dtype=dt), squeeze),
        d_kernel.astype(dt),
        d_bias.astype(dt),
    )


def tconv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-2, 2x2 transposed convolution; ``kernel`` is ``(Cin, Cout, 2, 2)``.

    Each input pixel scatters ``value * kernel`` into its own 2x2 output block.
    """
    xb, squeeze = _batched(x)
    cin, cout, kh, kw = kernel.shape
    if (kh, kw) != (2, 2):
        raise ShapeError(f"transposed kernel must be 2x2, got {kh}x{kw}")
    if xb.shape[1] != cin:
        raise ShapeError(f"channel axis: input has {xb.shape[1]}, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias axis: expected ({cout},), got {bias.shape}")
    n, _, h, w = xb.shape
    out = np.tensordot(xb, kernel, axes=([1], [0]))  # N, H, W, Cout, 2, 2
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * w)
    out += bias[None, :, None, None]
    return _unbatch(np.ascontiguousarray(out, dtype=_dtype(x, kernel)), squeeze)


def tconv2d_backward(
    x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_out)
    n, cout, h2, w2 = gb.shape
    blocks = gb.reshape(n, cout, h2 // 2, 2, w2 // 2, 2)  # N, Cout, H, a, W, b
    d_x = np.einsum("nohawb,coab->nchw", blocks, kernel, optimize=True)
    d_kernel = np.einsum("nchw,nohawb->coab", xb, blocks, optimize=True)
    d_bias = gb.sum(axis=(0, 2, 3))
    dt = _dtype(x, kernel, grad_out)
    return (
        _unbatch(np.ascontiguousarray(d_x, dtype=dt), squeeze),
        d_kernel.astype(dt),
        d_bias.astype(dt),
    )


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pool. Returns the pooled tensor and the argmax mask.

    The mask holds the winning row-major window offset (0..3); ties go to the
    lowest offset.
    """
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even height and width, got {h}x{w}")
    win = xb.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    mask = win.argmax(axis=-1)
    out = np.take_along_axis(win, mask[..., None], axis=-1)[..., 0]
    return _unbatch(np.ascontiguousarray(out), squeeze), _unbatch(mask.astype(np.uint8), squeeze)


def maxpool2_backward(mask: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    mb, squeeze = _batched(mask)
    gb, _ = _batched(grad_out)
    n, c, h, w = gb.shape
    onehot = mb[..., None] == np.arange(4, dtype=np.uint8)
    d = (onehot * gb[..., None]).astype(gb.dtype)  # N, C, H, W, 4
    d = d.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h, 2 * w)
    return _unbatch(np.ascontiguousarray(d), squeeze)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def softmax_c(logits: np.ndarray) -> np.ndarray:
    """Softmax over the channel axis (axis -3), overflow-safe."""
    z = logits - logits.max(axis=-3, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-3, keepdims=True)


def ce_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-pixel cross-entropy and its gradient w.r.t. ``logits``.

    Works on ``(C, H, W)`` with ``(H, W)`` labels, or on a batch, in which case
    the loss and gradient are additionally averaged over the batch.
    """
    lb, squeeze = _batched(logits)
    yb = labels[None] if squeeze else labels
    n, c, h, w = lb.shape
    if yb.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    bad = np.argwhere((yb < 0) | (yb >= c))
    if bad.size:
        raise ValueError(f"label {int(yb[tuple(bad[0])])} out of range 0..{c - 1} at pixel {tuple(int(v) for v in bad[0][1:])}")
    z = lb.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, yb[:, None].astype(np.intp), axis=1)[:, 0]
    loss = float((logsum - picked).mean())
    grad = np.exp(z - logsum[:, None])
    np.put_along_axis(grad, yb[:, None].astype(np.intp), np.take_along_axis(grad, yb[:, None].astype(np.intp), axis=1) - 1.0, axis=1)
    grad /= n * h * w
    return loss, _unbatch(grad.astype(np.result_type(logits.dtype, DTYPE)), squeeze)
