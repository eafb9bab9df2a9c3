"""Shared oracles and utilities for the test suite.

The convolution oracles are deliberately naive nested loops, written before
the library implementations and kept independent of them.
"""

import numpy as np


def naive_conv2d(x, w, b, stride, pad):
    """Direct cross-correlation; x is [C,N,H,W], w is [OC,IC,kh,kw]."""
    ic, n, h, wd = x.shape
    oc, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = np.zeros((ic, n, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((oc, n, oh, ow), dtype=x.dtype)
    for o in range(oc):
        for ni in range(n):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(ic):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += w[o, c, ki, kj] * xp[c, ni, i * stride + ki,
                                                            j * stride + kj]
                    out[o, ni, i, j] = acc + b[o]
    return out


def naive_transconv2d(x, w, b, stride):
    """Direct fractionally-strided convolution (scatter form);
    x is [IC,N,H,W], w is [IC,OC,kh,kw]."""
    ic, n, ih, iw = x.shape
    _, oc, kh, kw = w.shape
    oh = (ih - 1) * stride + kh
    ow = (iw - 1) * stride + kw
    out = np.zeros((oc, n, oh, ow), dtype=x.dtype)
    for c in range(ic):
        for o in range(oc):
            for ni in range(n):
                for i in range(ih):
                    for j in range(iw):
                        v = x[c, ni, i, j]
                        for ki in range(kh):
                            for kj in range(kw):
                                out[o, ni, i * stride + ki, j * stride + kj] += \
                                    v * w[c, o, ki, kj]
    for o in range(oc):
        out[o] += b[o]
    return out


def masked_mse(pred, target, mask):
    """Independent masked-MSE oracle mirroring the 1/n sum definition."""
    m = np.asarray(mask, dtype=pred.dtype)
    return ((pred - target) ** 2 * m).sum() / m.sum()


def tiny_scene_samples(n, h=32, w=64, seed0=100):
    """Small synthetic samples for fast training tests."""
    from depthfusion import simdata
    out = []
    for i in range(n):
        spec = simdata.SceneSpec(seed=seed0 + i, h=h, w=w)
        s = simdata.generate_scene_sample(spec)
        s.sample_id = f"{i:05d}"
        out.append(s)
    return out
