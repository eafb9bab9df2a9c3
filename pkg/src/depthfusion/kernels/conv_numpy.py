"""Pure-numpy fallback for the patch gather/scatter kernels.

Used when the compiled extension is unavailable (or forced via
``DEPTHFUSION_KERNELS=numpy``). Batches are channel-major ([C, N, H, W]).
The kernel-offset loop is outermost and each offset touches disjoint
cells, so accumulation order matches the Cython kernels and results are
bit-identical across backends.
"""

import numpy as np


def im2col(x, pad, kh, kw, stride, out_h, out_w):
    """Gather kh*kw patches of a [C,N,H,W] batch into [C*kh*kw, N*out_h*out_w]."""
    c, n = x.shape[0], x.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    col = np.zeros((c, kh, kw, n, out_h, out_w), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            col[:, ki, kj] = xp[:, :, ki:ki + stride * out_h:stride,
                                kj:kj + stride * out_w:stride]
    return col.reshape(c * kh * kw, n * out_h * out_w)


def col2im(col, n_batch, channels, h, w, pad, kh, kw, stride, out_h, out_w):
    """Scatter-add [C*kh*kw, N*out_h*out_w] patches into a [C,N,h,w] batch."""
    col6 = col.reshape(channels, kh, kw, n_batch, out_h, out_w)
    xp = np.zeros((channels, n_batch, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    for ki in range(kh):
        for kj in range(kw):
            xp[:, :, ki:ki + stride * out_h:stride,
               kj:kj + stride * out_w:stride] += col6[:, ki, kj]
    if pad:
        xp = np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp
