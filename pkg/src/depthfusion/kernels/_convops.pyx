# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch gather/scatter kernels for convolution layers.

These are the hot inner loops of the whole package: every convolution and
transposed convolution is one of these plus a single BLAS matmul. Batches
are laid out channel-major ([C, N, H, W]) so the column matrix
[C*kh*kw, N*out_h*out_w] reshapes to and from activation arrays without any
transposition, and zero padding is implicit (no padded copies exist).

The kernel-offset loops are ordered identically to the numpy fallback in
``conv_numpy.py``, so both backends accumulate in the same order and
produce bit-identical results.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int pad, int kh, int kw, int stride,
           int out_h, int out_w):
    """Gather kh*kw patches of a [C,N,H,W] batch into [C*kh*kw, N*out_h*out_w]."""
    cdef Py_ssize_t channels = x.shape[0], n_batch = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t c, ki, kj, n, oh, ow, row, ih, jw0, ow_lo, ow_hi, base
    if real is float:
        out = np.zeros((channels * kh * kw, n_batch * out_h * out_w), dtype=np.float32)
    else:
        out = np.zeros((channels * kh * kw, n_batch * out_h * out_w), dtype=np.float64)
    cdef real[:, ::1] col = out
    with nogil:
        for c in range(channels):
            for ki in range(kh):
                for kj in range(kw):
                    row = (c * kh + ki) * kw + kj
                    jw0 = kj - pad
                    ow_lo = 0 if jw0 >= 0 else (-jw0 + stride - 1) // stride
                    ow_hi = (w - 1 - jw0) // stride + 1
                    if ow_hi > out_w:
                        ow_hi = out_w
                    for n in range(n_batch):
                        for oh in range(out_h):
                            ih = oh * stride + ki - pad
                            if ih < 0 or ih >= h:
                                continue
                            base = (n * out_h + oh) * out_w
                            if stride == 1:
                                for ow in range(ow_lo, ow_hi):
                                    col[row, base + ow] = x[c, n, ih, jw0 + ow]
                            else:
                                for ow in range(ow_lo, ow_hi):
                                    col[row, base + ow] = x[c, n, ih, jw0 + ow * stride]
    return out


def col2im(real[:, ::1] col, int n_batch, int channels, int h, int w,
           int pad, int kh, int kw, int stride, int out_h, int out_w):
    """Scatter-add [C*kh*kw, N*out_h*out_w] patches into a [C,N,h,w] batch.

    Contributions that fall into the implicit padding band are discarded.
    """
    cdef Py_ssize_t c, ki, kj, n, oh, ow, row, ih, jw0, ow_lo, ow_hi, base
    if real is float:
        out = np.zeros((channels, n_batch, h, w), dtype=np.float32)
    else:
        out = np.zeros((channels, n_batch, h, w), dtype=np.float64)
    cdef real[:, :, :, ::1] x = out
    with nogil:
        for c in range(channels):
            for ki in range(kh):
                for kj in range(kw):
                    row = (c * kh + ki) * kw + kj
                    jw0 = kj - pad
                    ow_lo = 0 if jw0 >= 0 else (-jw0 + stride - 1) // stride
                    ow_hi = (w - 1 - jw0) // stride + 1
                    if ow_hi > out_w:
                        ow_hi = out_w
                    for n in range(n_batch):
                        for oh in range(out_h):
                            ih = oh * stride + ki - pad
                            if ih < 0 or ih >= h:
                                continue
                            base = (n * out_h + oh) * out_w
                            if stride == 1:
                                for ow in range(ow_lo, ow_hi):
                                    x[c, n, ih, jw0 + ow] += col[row, base + ow]
                            else:
                                for ow in range(ow_lo, ow_hi):
                                    x[c, n, ih, jw0 + ow * stride] += col[row, base + ow]
    return out
