"""The differentiable operator set of the edge-detection network.

All spatial operators work on (batch, channels, height, width) arrays.
Convolutions are cross-correlations (the usual deep-learning convention)
implemented with im2col plus one GEMM; the transposed convolution is the
exact adjoint of ``conv2d`` for the same kernel and geometry.
"""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .tensor import Tensor, record_op

__all__ = [
    "conv2d",
    "transposed_conv2d",
    "maxpool2d",
    "batchnorm2d",
    "BatchNormStats",
    "leaky_relu",
    "sigmoid",
    "concat_channels",
    "add",
    "scale",
    "mul_const",
    "sum_all",
    "BN_EPSILON",
    "BN_MOMENTUM",
]

# Batch-norm constants; stated here once rather than threaded through call sites.
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


# ---------------------------------------------------------------------------
# im2col machinery
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad_h: int, pad_w: int):
    """Unfold sliding windows into a (N*out_h*out_w, C*kh*kw) matrix."""
    n, c, h, w = x.shape
    out_h = (h + 2 * pad_h - kh) // stride + 1
    out_w = (w + 2 * pad_w - kw) // stride + 1
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, a, b] = x[:, :, a : a + stride * out_h : stride, b : b + stride * out_w : stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * out_h * out_w, c * kh * kw), out_h, out_w


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad_h: int, pad_w: int):
    """Scatter-add the adjoint of ``_im2col`` back onto the input shape."""
    n, c, h, w = x_shape
    out_h = (h + 2 * pad_h - kh) // stride + 1
    out_w = (w + 2 * pad_w - kw) // stride + 1
    cols = cols.reshape(n, out_h, out_w, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad_h, w + 2 * pad_w), dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            img[:, :, a : a + stride * out_h : stride, b : b + stride * out_w : stride] += cols[:, :, a, b]
    return img[:, :, pad_h : pad_h + h, pad_w : pad_w + w]


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with symmetric zero padding.

    Shapes: x (N, Cin, H, W), kernel (Cout, Cin, kH, kW), bias (Cout,).
    Output spatial size is H + 2*padding - kH + 1 (and likewise for width).
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    cout, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(
            f"conv2d channel mismatch: input has {c} channels (shape {tuple(x.shape)}), "
            f"kernel expects {kc} (shape {tuple(kernel.shape)})"
        )
    if bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {cout} output channels")
    if padding < 0:
        raise ValueError("conv2d padding must be non-negative")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )

    w_mat = kernel.data.reshape(cout, -1)
    cols, out_h, out_w = _im2col(x.data, kh, kw, 1, padding, padding)
    out = cols @ w_mat.T
    out += bias.data
    out = out.reshape(n, out_h, out_w, cout).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dk = (g2.T @ cols).reshape(kernel.shape)
        db = g2.sum(axis=0)
        dx = _col2im(g2 @ w_mat, x.shape, kh, kw, 1, padding, padding)
        return dx, dk, db

    return record_op("conv2d", (x, kernel, bias), out, vjp)


def transposed_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of ``conv2d`` with the given stride/padding geometry.

    Shapes: x (N, Cin, H, W), kernel (Cin, Cout, kH, kW). Output spatial size
    is (H-1)*stride - 2*padding + kH. Implemented by zero-stuffing the input
    by ``stride`` and correlating with the channel-swapped, spatially flipped
    kernel, which is exactly the transpose of the forward correlation.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(
            f"transposed_conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, c, h, w = x.shape
    kc, cout, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(
            f"transposed_conv2d channel mismatch: input has {c} channels "
            f"(shape {tuple(x.shape)}), kernel expects {kc} (shape {tuple(kernel.shape)})"
        )
    if stride < 1:
        raise ValueError("transposed_conv2d stride must be >= 1")
    if padding < 0 or padding > kh - 1 or padding > kw - 1:
        raise ValueError(f"transposed_conv2d padding must be in [0, kernel-1], got {padding}")
    out_h = (h - 1) * stride - 2 * padding + kh
    out_w = (w - 1) * stride - 2 * padding + kw
    if out_h < 1 or out_w < 1:
        raise ValueError(f"transposed_conv2d output extent {out_h}x{out_w} is not positive")

    h_up = (h - 1) * stride + 1
    w_up = (w - 1) * stride + 1
    x_up = np.zeros((n, c, h_up, w_up), dtype=x.data.dtype)
    x_up[:, :, ::stride, ::stride] = x.data

    # Equivalent forward correlation kernel: swap channel axes, flip spatially.
    k_conv = np.ascontiguousarray(kernel.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    k_mat = k_conv.reshape(cout, -1)
    pad_h = kh - 1 - padding
    pad_w = kw - 1 - padding
    cols, oh, ow = _im2col(x_up, kh, kw, 1, pad_h, pad_w)
    out = (cols @ k_mat.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dk_conv = (g2.T @ cols).reshape(k_conv.shape)
        dk = np.ascontiguousarray(dk_conv.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        dx_up = _col2im(g2 @ k_mat, x_up.shape, kh, kw, 1, pad_h, pad_w)
        dx = np.ascontiguousarray(dx_up[:, :, ::stride, ::stride])
        return dx, dk

    return record_op("transposed_conv2d", (x, kernel), out, vjp)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max pooling; trailing rows/columns that do not fill a window are dropped.

    Backward routes the gradient to the argmax of each window; ties go to the
    lowest linear index, which makes the routing deterministic.
    """
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects a 4-d input, got {x.shape}")
    if window < 1 or stride < 1:
        raise ValueError("maxpool2d window and stride must be >= 1")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"maxpool2d window {window} exceeds spatial extent {h}x{w}")
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1

    stack = np.empty((n, c, out_h, out_w, window * window), dtype=x.data.dtype)
    for a in range(window):
        for b in range(window):
            stack[..., a * window + b] = x.data[
                :, :, a : a + stride * out_h : stride, b : b + stride * out_w : stride
            ]
    idx = np.argmax(stack, axis=-1)  # first max = lowest linear index in the window
    out = np.take_along_axis(stack, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        rows = np.arange(out_h)[None, None, :, None] * stride + idx // window
        cols = np.arange(out_w)[None, None, None, :] * stride + idx % window
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(dx, (nn, cc, rows, cols), g)
        return (dx,)

    return record_op("maxpool2d", (x,), out, vjp)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNormStats:
    """Running per-channel statistics, updated by EMA during training.

    ``updates`` counts train-mode passes; inference before the first update
    is rejected because the running statistics would be meaningless.
    """

    __slots__ = ("mean", "var", "updates")

    def __init__(self, channels: int, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.updates = 0

    def reset(self) -> None:
        self.mean[...] = 0.0
        self.var[...] = 1.0
        self.updates = 0


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: BatchNormStats,
    mode: str,
    epsilon: float = BN_EPSILON,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel normalization over the (N, H, W) axes.

    Train mode normalizes with batch statistics (biased variance) and folds
    them into ``stats`` with EMA weight ``momentum``; infer mode normalizes
    with the running statistics. Differentiable w.r.t. input, gamma and beta
    in both modes.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"batchnorm2d mode must be 'train' or 'infer', got {mode!r}")
    if epsilon <= 0:
        raise ValueError("batchnorm2d epsilon must be positive")
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batchnorm2d affine shapes {gamma.shape}/{beta.shape} do not match {c} channels"
        )
    if stats.mean.shape != (c,):
        raise ValueError(f"batchnorm2d running stats cover {stats.mean.shape[0]} channels, input has {c}")

    d = x.data
    if mode == "train":
        mu = d.mean(axis=(0, 2, 3))
        var = d.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + epsilon)
        xhat = (d - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
        stats.mean[...] = momentum * stats.mean + (1.0 - momentum) * mu
        stats.var[...] = momentum * stats.var + (1.0 - momentum) * var
        stats.updates += 1
        m = n * h * w

        def vjp(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dxhat = g * gamma.data.reshape(1, c, 1, 1)
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta

    else:
        if stats.updates == 0:
            raise ValueError("batchnorm2d infer mode requires initialized running stats; train first")
        inv = 1.0 / np.sqrt(stats.var + epsilon)
        xhat = (d - stats.mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

        def vjp(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dx = g * (gamma.data * inv).reshape(1, c, 1, 1)
            return dx, dgamma, dbeta

    return record_op("batchnorm2d", (x, gamma, beta), out.astype(d.dtype, copy=False), vjp)


# ---------------------------------------------------------------------------
# activations and glue
# ---------------------------------------------------------------------------

def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """x if x > 0 else slope*x; the derivative at exactly 0 is ``slope``."""
    d = x.data
    out = np.where(d > 0, d, slope * d)

    def vjp(g):
        return (g * np.where(d > 0, 1.0, slope).astype(g.dtype),)

    return record_op("leaky_relu", (x,), out, vjp)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; outputs lie strictly inside (0, 1) in exact arithmetic."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return record_op("sigmoid", (x,), out, vjp)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; a's channels come first."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError(f"concat_channels expects 4-d tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"concat_channels batch/spatial mismatch: {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def vjp(g):
        return g[:, :ca], g[:, ca:]

    return record_op("concat_channels", (a, b), out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def vjp(g):
        return g, g

    return record_op("add", (a, b), out, vjp)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out = x.data * c

    def vjp(g):
        return (g * c,)

    return record_op("scale", (x,), out, vjp)


def mul_const(x: Tensor, w) -> Tensor:
    """Elementwise multiply by a constant array broadcastable into x's shape."""
    w = np.asarray(w, dtype=x.data.dtype)
    if np.broadcast_shapes(x.shape, w.shape) != x.shape:
        raise ValueError(f"mul_const constant of shape {w.shape} would broadcast beyond {x.shape}")
    out = x.data * w

    def vjp(g):
        return (g * w,)

    return record_op("mul_const", (x,), out, vjp)


def sum_all(x: Tensor) -> Tensor:
    """Sum every element into a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def vjp(g):
        return (np.full(x.shape, float(g), dtype=x.data.dtype),)

    return record_op("sum_all", (x,), out, vjp)
