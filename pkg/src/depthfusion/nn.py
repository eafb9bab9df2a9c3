"""Neural network layers: strided convolution, transposed convolution,
batch normalization, ReLU, per-pixel two-way softmax, initialization.

Activation batches are channel-major, [C, N, H, W]: a convolution is then
exactly one im2col plus one BLAS matmul whose output reshapes into the next
activation without any transposition, and per-channel statistics reduce
over contiguous rows. Transposed convolutions reuse the same patch kernels
through the adjoint (col2im) path, so a transposed convolution's gradient
is literally the forward of the matching convolution and vice versa. The
im2col buffer is kept alive for the backward pass.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import (InvalidShape, ShapeMismatch, Tensor, add, div, exp,
                     maximum, record_op, sub)


class DegenerateBatch(ValueError):
    """Batch statistics were requested over fewer than two elements."""


def fan_in_bound(fan_in: int) -> float:
    """Half-width of the fan-in-scaled uniform initialization interval."""
    return float(np.sqrt(3.0 / fan_in))


def init_params(layer, rng_seed: int) -> None:
    """Re-initialize a layer in place: fan-in uniform weights, zero bias.

    Deterministic per seed. Batch-norm layers reset to identity affine and
    zeroed running statistics.
    """
    rng = np.random.default_rng(rng_seed)
    if isinstance(layer, BatchNorm):
        layer.gamma.data[:] = 1.0
        layer.beta.data[:] = 0.0
        layer.running_mean[:] = 0.0
        layer.running_var[:] = 1.0
        return
    w = layer.weights.data
    if isinstance(layer, Conv2d):
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
    else:  # TransConv2d: weights are [in_ch, out_ch, kh, kw]
        fan_in = w.shape[0] * w.shape[2] * w.shape[3]
    bound = fan_in_bound(fan_in)
    w[...] = rng.uniform(-bound, bound, size=w.shape)
    layer.bias.data[:] = 0.0


class Conv2d:
    """2-D cross-correlation with optional fused ReLU.

    Weights are [out_ch, in_ch, kh, kw]; output spatial size is
    floor((H + 2*pad - kh)/stride) + 1.
    """

    def __init__(self, in_ch: int, out_ch: int, kh: int = 3, kw: int = 3,
                 stride: int = 1, padding: int = 0, relu: bool = False,
                 dtype=np.float64, seed: int = 0):
        self.stride = stride
        self.padding = padding
        self.relu = relu
        self.weights = Tensor(np.empty((out_ch, in_ch, kh, kw), dtype=dtype),
                              requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        init_params(self, seed)

    def params(self):
        return [("weight", self.weights), ("bias", self.bias)]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_forward(self, x)


class TransConv2d:
    """Stride-s fractional convolution; with a 2x2 kernel and stride 2 the
    output spatial dims are exactly twice the input dims.

    Weights are [in_ch, out_ch, kh, kw]; output size is (H-1)*stride + kh.
    """

    def __init__(self, in_ch: int, out_ch: int, kh: int = 2, kw: int = 2,
                 stride: int = 2, relu: bool = False, dtype=np.float64,
                 seed: int = 0):
        self.stride = stride
        self.relu = relu
        self.weights = Tensor(np.empty((in_ch, out_ch, kh, kw), dtype=dtype),
                              requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        init_params(self, seed)

    def params(self):
        return [("weight", self.weights), ("bias", self.bias)]

    def __call__(self, x: Tensor) -> Tensor:
        return transconv2d_forward(self, x)


class BatchNorm:
    """Per-channel batch normalization with running statistics and an
    optional fused ReLU on the output."""

    def __init__(self, ch: int, eps: float = 1e-5, momentum: float = 0.1,
                 relu: bool = False, dtype=np.float64):
        self.eps = eps
        self.momentum = momentum
        self.relu = relu
        self.gamma = Tensor(np.ones(ch, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(ch, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(ch, dtype=dtype)
        self.running_var = np.ones(ch, dtype=dtype)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return batchnorm_forward(self, x, training)


def _check_4d(x: Tensor, in_ch: int, op: str) -> tuple:
    if x.data.ndim != 4:
        raise ShapeMismatch(f"{op}: expected [C,N,H,W] input, got shape {x.shape}")
    if x.shape[0] != in_ch:
        raise ShapeMismatch(f"{op}: input has {x.shape[0]} channels, layer expects {in_ch}")
    return x.shape


def conv2d_forward(layer: Conv2d, x: Tensor) -> Tensor:
    w, b = layer.weights, layer.bias
    oc, ic, kh, kw = w.shape
    _, n, h, wd = _check_4d(x, ic, "conv2d")
    s, p = layer.stride, layer.padding
    oh = (h + 2 * p - kh) // s + 1
    ow = (wd + 2 * p - kw) // s + 1
    if oh < 1 or ow < 1:
        raise InvalidShape(f"conv2d: kernel {kh}x{kw}/{s} does not fit input {h}x{wd} with pad {p}")

    pointwise = kh == 1 and kw == 1 and s == 1 and p == 0
    if pointwise:
        col = x.data.reshape(ic, -1)                     # 1x1: plain channel mixing
    else:
        col = kernels.im2col(x.data, p, kh, kw, s, oh, ow)   # [IC*kh*kw, N*oh*ow]
    wmat = w.data.reshape(oc, -1)
    out2 = wmat @ col                                    # [OC, N*oh*ow]
    out2 += b.data[:, None]
    if layer.relu:
        np.maximum(out2, 0.0, out=out2)
    out_data = out2.reshape(oc, n, oh, ow)

    def backward(g, needs):
        if layer.relu:
            g = g * (out_data > 0)
        g2 = g.reshape(oc, -1)
        gw = gb = gx = None
        if needs[1]:
            gw = (g2 @ col.T).reshape(w.shape)
        if needs[2]:
            gb = g2.sum(axis=1)
        if needs[0]:
            gcol = wmat.T @ g2                           # [IC*kh*kw, N*oh*ow]
            if pointwise:
                gx = gcol.reshape(ic, n, h, wd)
            else:
                gx = kernels.col2im(gcol, n, ic, h, wd, p, kh, kw, s, oh, ow)
        return gx, gw, gb

    return record_op("conv2d", (x, w, b), out_data, backward)


def transconv2d_forward(layer: TransConv2d, x: Tensor) -> Tensor:
    w, b = layer.weights, layer.bias
    ic, oc, kh, kw = w.shape
    _, n, ih, iw = _check_4d(x, ic, "transconv2d")
    s = layer.stride
    oh = (ih - 1) * s + kh
    ow = (iw - 1) * s + kw

    wmat = w.data.reshape(ic, -1)                        # [IC, OC*kh*kw]
    x2 = x.data.reshape(ic, -1)                          # [IC, N*ih*iw]
    col = wmat.T @ x2                                    # [OC*kh*kw, N*ih*iw]
    out = kernels.col2im(col, n, oc, oh, ow, 0, kh, kw, s, ih, iw)
    out += b.data[:, None, None, None]
    if layer.relu:
        np.maximum(out, 0.0, out=out)
    out_data = out

    def backward(g, needs):
        if layer.relu:
            g = g * (out_data > 0)
        gcol = kernels.im2col(g, 0, kh, kw, s, ih, iw)   # [OC*kh*kw, N*ih*iw]
        gw = gb = gx = None
        if needs[0]:
            gx = (wmat @ gcol).reshape(ic, n, ih, iw)
        if needs[1]:
            gw = (x2 @ gcol.T).reshape(w.shape)
        if needs[2]:
            gb = g.sum(axis=(1, 2, 3))
        return gx, gw, gb

    return record_op("transconv2d", (x, w, b), out_data, backward)


def batchnorm_forward(layer: BatchNorm, x: Tensor, training: bool) -> Tensor:
    gamma, beta = layer.gamma, layer.beta
    ch = gamma.shape[0]
    _, n, h, wd = _check_4d(x, ch, "batchnorm")
    eps = layer.eps
    cview = (ch, 1, 1, 1)

    if training:
        m = n * h * wd
        if m < 2:
            raise DegenerateBatch("batch norm needs >= 2 elements per channel in training mode")
        rows = x.data.reshape(ch, -1)
        mean = rows.mean(axis=1)
        xc = x.data - mean.reshape(cview)
        xc_rows = xc.reshape(ch, -1)
        var = np.einsum("cp,cp->c", xc_rows, xc_rows) / m
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = xc
        xhat *= invstd.reshape(cview)
        mom = layer.momentum
        layer.running_mean *= 1.0 - mom
        layer.running_mean += mom * mean
        layer.running_var *= 1.0 - mom
        layer.running_var += mom * var * (m / (m - 1))

        def backward(g, needs):
            if layer.relu:
                g = g * (out_data > 0)
            gxhat = g * gamma.data.reshape(cview)
            gx = ggamma = gbeta = None
            if needs[0]:
                sum_g = gxhat.reshape(ch, -1).sum(axis=1).reshape(cview)
                sum_gx = np.einsum("cp,cp->c", gxhat.reshape(ch, -1),
                                   xhat.reshape(ch, -1)).reshape(cview)
                gx = gxhat
                gx -= sum_g / m
                gx -= xhat * (sum_gx / m)
                gx *= invstd.reshape(cview)
            if needs[1]:
                ggamma = np.einsum("cp,cp->c", g.reshape(ch, -1), xhat.reshape(ch, -1))
            if needs[2]:
                gbeta = g.reshape(ch, -1).sum(axis=1)
            return gx, ggamma, gbeta
    else:
        invstd = 1.0 / np.sqrt(layer.running_var + eps)
        xhat = (x.data - layer.running_mean.reshape(cview)) * invstd.reshape(cview)

        def backward(g, needs):
            if layer.relu:
                g = g * (out_data > 0)
            gx = ggamma = gbeta = None
            if needs[0]:
                gx = g * (gamma.data * invstd).reshape(cview)
            if needs[1]:
                ggamma = np.einsum("cp,cp->c", g.reshape(ch, -1), xhat.reshape(ch, -1))
            if needs[2]:
                gbeta = g.reshape(ch, -1).sum(axis=1)
            return gx, ggamma, gbeta

    out_data = gamma.data.reshape(cview) * xhat + beta.data.reshape(cview)
    if layer.relu:
        np.maximum(out_data, 0.0, out=out_data)
    return record_op("batchnorm", (x, gamma, beta), out_data, backward)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def backward(g, needs):
        return (g * (out_data > 0),)

    return record_op("relu", (x,), out_data, backward)


def concat_channels(parts: list[Tensor]) -> Tensor:
    """Concatenate [C,N,H,W] tensors along the channel axis."""
    first = parts[0].shape
    for t in parts[1:]:
        if t.shape[1:] != first[1:]:
            raise ShapeMismatch(f"concat: incompatible shapes {[p.shape for p in parts]}")
    out_data = np.concatenate([t.data for t in parts], axis=0)
    widths = [t.shape[0] for t in parts]

    def backward(g, needs):
        grads, c0 = [], 0
        for width, need in zip(widths, needs):
            grads.append(g[c0:c0 + width].copy() if need else None)
            c0 += width
        return grads

    return record_op("concat_channels", tuple(parts), out_data, backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channel slice [start, stop) of a [C,N,H,W] tensor (a view, not a copy)."""
    out_data = x.data[start:stop]

    def backward(g, needs):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return record_op("slice_channels", (x,), out_data, backward)


def softmax_pair(x: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
    """Per-pixel two-way softmax: (e^x, e^y) / (e^x + e^y).

    Computed with max-subtraction so arbitrarily large logits cannot
    overflow; composed from primitive ops so gradients come for free.
    """
    if x.shape != y.shape:
        raise ShapeMismatch(f"softmax_pair: shapes {x.shape} and {y.shape} differ")
    m = maximum(x, y)
    ex = exp(sub(x, m))
    ey = exp(sub(y, m))
    total = add(ex, ey)
    return div(ex, total), div(ey, total)
