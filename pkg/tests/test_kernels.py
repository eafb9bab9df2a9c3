"""Backend parity: compiled patch kernels vs the numpy fallback."""

import numpy as np
import pytest

from depthfusion import kernels
from depthfusion.kernels import conv_numpy

CASES = [(1, 0, 3, 3), (1, 1, 3, 3), (2, 1, 3, 3), (2, 0, 2, 2), (3, 2, 5, 5)]


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride,pad,kh,kw", CASES)
def test_im2col_backends_bit_identical(dtype, stride, pad, kh, kw):
    rng = np.random.default_rng(42)
    x = rng.standard_normal((3, 2, 11, 13)).astype(dtype)
    oh = (11 + 2 * pad - kh) // stride + 1
    ow = (13 + 2 * pad - kw) // stride + 1
    a = kernels.im2col(x, pad, kh, kw, stride, oh, ow)
    b = conv_numpy.im2col(x, pad, kh, kw, stride, oh, ow)
    assert a.dtype == dtype
    assert np.array_equal(a, b)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride,pad,kh,kw", CASES)
def test_col2im_backends_bit_identical(dtype, stride, pad, kh, kw):
    rng = np.random.default_rng(43)
    oh = (11 + 2 * pad - kh) // stride + 1
    ow = (13 + 2 * pad - kw) // stride + 1
    col = rng.standard_normal((3 * kh * kw, 2 * oh * ow)).astype(dtype)
    a = kernels.col2im(col, 2, 3, 11, 13, pad, kh, kw, stride, oh, ow)
    b = conv_numpy.col2im(col, 2, 3, 11, 13, pad, kh, kw, stride, oh, ow)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("stride,pad,kh,kw", CASES)
def test_gather_and_scatter_are_adjoint(stride, pad, kh, kw):
    # <im2col(x), col> == <x, col2im(col)> for any x, col
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 2, 9, 10))
    oh = (9 + 2 * pad - kh) // stride + 1
    ow = (10 + 2 * pad - kw) // stride + 1
    col = rng.standard_normal((2 * kh * kw, 2 * oh * ow))
    lhs = float((kernels.im2col(x, pad, kh, kw, stride, oh, ow) * col).sum())
    rhs = float((x * kernels.col2im(col, 2, 2, 9, 10, pad, kh, kw, stride, oh, ow)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_backend_selection_reports_name():
    assert kernels.backend in ("compiled", "numpy")
    assert kernels.im2col is not None and kernels.col2im is not None
