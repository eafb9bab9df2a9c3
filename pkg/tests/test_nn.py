"""Layer ops against independent oracles; activations are [C, N, H, W]."""

import numpy as np
import pytest
from helpers import naive_conv2d, naive_transconv2d

from depthfusion import nn
from depthfusion.gradcheck import check_gradients, run_suite
from depthfusion.tensor import ShapeMismatch, Tensor, mul, reduce_mean


def make_conv(in_ch, out_ch, kh=3, kw=3, stride=1, padding=0, relu=False, seed=0):
    return nn.Conv2d(in_ch, out_ch, kh, kw, stride=stride, padding=padding,
                     relu=relu, seed=seed)


class TestConv2d:
    def test_identity_1x1_kernel(self):
        conv = make_conv(2, 2, kh=1, kw=1)
        conv.weights.data[:] = np.eye(2).reshape(2, 2, 1, 1)
        conv.bias.data[:] = 0.0
        x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 5, 7)))
        out = conv(x)
        assert np.array_equal(out.data, x.data)

    def test_ones_kernel_on_constant_image(self):
        c = 2.5
        conv = make_conv(1, 1, padding=0)
        conv.weights.data[:] = 1.0
        conv.bias.data[:] = 0.0
        x = Tensor(np.full((1, 1, 5, 5), c))
        out = conv(x)
        assert out.shape == (1, 1, 3, 3)
        assert out.data[0, 0, 1, 1] == pytest.approx(9 * c, rel=1e-15)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_naive_loop_oracle(self, stride, pad):
        rng = np.random.default_rng(5)
        conv = make_conv(3, 4, stride=stride, padding=pad, seed=9)
        x = rng.standard_normal((3, 2, 5, 6))
        out = conv(Tensor(x))
        ref = naive_conv2d(x, conv.weights.data, conv.bias.data, stride, pad)
        # same math, different summation order: exact up to accumulation rounding
        np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)

    def test_output_shape_formula_random_sweep(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            h, w = rng.integers(4, 34, size=2)
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            kh = kw = 3
            if h + 2 * pad < kh or w + 2 * pad < kw:
                continue
            conv = make_conv(2, 3, stride=stride, padding=pad)
            out = conv(Tensor(rng.standard_normal((2, 1, h, w))))
            oh = (h + 2 * pad - kh) // stride + 1
            ow = (w + 2 * pad - kw) // stride + 1
            assert out.shape == (3, 1, oh, ow)

    def test_channel_mismatch(self):
        conv = make_conv(3, 4)
        with pytest.raises(ShapeMismatch):
            conv(Tensor(np.zeros((2, 1, 5, 5))))

    def test_fused_relu_clamps_and_masks_gradient(self):
        rng = np.random.default_rng(3)
        conv = make_conv(2, 2, padding=1, relu=True, seed=4)
        x = Tensor(rng.standard_normal((2, 1, 4, 4)), requires_grad=True)
        out = conv(x)
        assert out.data.min() >= 0.0
        proj = rng.standard_normal(out.shape)
        res = check_gradients(lambda: reduce_mean(mul(conv(x), Tensor(proj))),
                              [("x", x), ("w", conv.weights), ("b", conv.bias)], rng)
        assert res.max_rel_err <= 1e-4


class TestTransConv2d:
    def test_single_pixel_paints_kernel(self):
        t = nn.TransConv2d(1, 1, seed=2)
        x_val = 1.7
        out = t(Tensor(np.full((1, 1, 1, 1), x_val)))
        assert out.shape == (1, 1, 2, 2)
        expected = t.weights.data[0, 0] * x_val + t.bias.data[0]
        np.testing.assert_allclose(out.data[0, 0], expected, rtol=1e-15)

    def test_table_final_layer_doubles_spatial_dims(self):
        # 64-channel half-resolution features up to 32 channels at full size
        t = nn.TransConv2d(64, 32, seed=1)
        out = t(Tensor(np.zeros((64, 1, 32, 96))))
        assert out.shape == (32, 1, 64, 192)

    def test_matches_naive_scatter_oracle(self):
        rng = np.random.default_rng(8)
        t = nn.TransConv2d(3, 2, seed=3)
        x = rng.standard_normal((3, 2, 4, 5))
        out = t(Tensor(x))
        ref = naive_transconv2d(x, t.weights.data, t.bias.data, 2)
        np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)

    def test_adjoint_of_convolution(self):
        # bias-free transposed conv is the exact adjoint of the matching
        # stride-2 VALID convolution with the same kernel
        rng = np.random.default_rng(9)
        t = nn.TransConv2d(3, 2, seed=6)
        t.bias.data[:] = 0.0
        x = rng.standard_normal((3, 2, 4, 5))
        y = rng.standard_normal((2, 2, 8, 10))
        tx = t(Tensor(x)).data
        # adjoint = stride-2 valid conv whose [out,in] axes are the
        # transposed conv's [in,out] axes, i.e. the same weight array
        conv = make_conv(2, 3, kh=2, kw=2, stride=2, padding=0)
        conv.weights.data[:] = t.weights.data
        conv.bias.data[:] = 0.0
        cy = conv(Tensor(y)).data
        assert float((tx * y).sum()) == pytest.approx(float((x * cy).sum()), rel=1e-12)

    def test_channel_mismatch(self):
        t = nn.TransConv2d(4, 2)
        with pytest.raises(ShapeMismatch):
            t(Tensor(np.zeros((3, 1, 4, 4))))


class TestBatchNorm:
    def test_identity_on_standardized_input(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 4, 8, 8))
        x -= x.reshape(3, -1).mean(1).reshape(3, 1, 1, 1)
        x /= x.reshape(3, -1).std(1).reshape(3, 1, 1, 1)
        bn = nn.BatchNorm(3)
        out = bn(Tensor(x), training=True)
        # out = x / sqrt(1 + eps): identity up to the eps guard
        np.testing.assert_allclose(out.data, x, rtol=1e-5, atol=1e-5)

    def test_affine_transform(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 4, 6, 6))
        x -= x.reshape(2, -1).mean(1).reshape(2, 1, 1, 1)
        x /= x.reshape(2, -1).std(1).reshape(2, 1, 1, 1)
        bn = nn.BatchNorm(2)
        bn.gamma.data[:] = 2.0
        bn.beta.data[:] = 1.0
        out = bn(Tensor(x), training=True)
        np.testing.assert_allclose(out.data, 2.0 * x + 1.0, atol=1e-4)

    def test_normalizes_random_batch(self):
        rng = np.random.default_rng(2)
        x = 3.0 + 2.0 * rng.standard_normal((4, 3, 10, 12))
        bn = nn.BatchNorm(4)   # gamma=1, beta=0: output is the normalized map
        out = bn(Tensor(x), training=True).data
        mean = out.reshape(4, -1).mean(1)
        var = out.reshape(4, -1).var(1)
        assert np.abs(mean).max() <= 1e-5
        assert np.abs(var - 1.0).max() <= 1e-4

    def test_degenerate_batch(self):
        bn = nn.BatchNorm(2)
        with pytest.raises(nn.DegenerateBatch):
            bn(Tensor(np.zeros((2, 1, 1, 1))), training=True)

    def test_eval_mode_uses_running_stats(self):
        bn = nn.BatchNorm(1)
        bn.running_mean[:] = 5.0
        bn.running_var[:] = 4.0
        out = bn(Tensor(np.full((1, 1, 2, 2), 7.0)), training=False)
        np.testing.assert_allclose(out.data, (7.0 - 5.0) / np.sqrt(4.0 + bn.eps),
                                   rtol=1e-12)

    def test_running_stats_update_with_momentum(self):
        rng = np.random.default_rng(3)
        bn = nn.BatchNorm(2, momentum=0.1)
        x = rng.standard_normal((2, 2, 4, 4)) + 3.0
        bn(Tensor(x), training=True)
        batch_mean = x.reshape(2, -1).mean(1)
        np.testing.assert_allclose(bn.running_mean, 0.1 * batch_mean, rtol=1e-12)

    def test_fused_relu(self):
        rng = np.random.default_rng(4)
        bn = nn.BatchNorm(2, relu=True)
        out = bn(Tensor(rng.standard_normal((2, 2, 5, 5))), training=True)
        assert out.data.min() >= 0.0


class TestSoftmaxPair:
    def test_equal_logits_give_half(self):
        x = Tensor(np.zeros((1, 1, 3, 3)))
        y = Tensor(np.zeros((1, 1, 3, 3)))
        wx, wy = nn.softmax_pair(x, y)
        assert np.all(wx.data == 0.5) and np.all(wy.data == 0.5)

    def test_log2_case(self):
        wx, _ = nn.softmax_pair(Tensor(np.array([[[[np.log(2.0)]]]])),
                                Tensor(np.zeros((1, 1, 1, 1))))
        assert wx.data[0, 0, 0, 0] == pytest.approx(2.0 / 3.0, rel=1e-12)

    def test_huge_logit_saturates_without_overflow(self):
        wx, wy = nn.softmax_pair(Tensor(np.array([[[[1000.0]]]])),
                                 Tensor(np.zeros((1, 1, 1, 1))))
        assert wx.data[0, 0, 0, 0] == 1.0
        assert wy.data[0, 0, 0, 0] == 0.0

    def test_sum_to_one_within_ulp_and_in_range(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(-30, 30, size=(1, 1, 40, 40)))
        y = Tensor(rng.uniform(-30, 30, size=(1, 1, 40, 40)))
        wx, wy = nn.softmax_pair(x, y)
        total = wx.data + wy.data
        assert np.abs(total - 1.0).max() <= np.finfo(np.float64).eps
        assert wx.data.min() >= 0.0 and wx.data.max() <= 1.0
        assert wy.data.min() >= 0.0 and wy.data.max() <= 1.0

    def test_shift_invariance(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(-5, 5, size=(1, 1, 8, 8))
        y = rng.uniform(-5, 5, size=(1, 1, 8, 8))
        for c in (-100.0, -1.0, 0.5, 300.0):
            wx0, _ = nn.softmax_pair(Tensor(x), Tensor(y))
            wx1, _ = nn.softmax_pair(Tensor(x + c), Tensor(y + c))
            np.testing.assert_allclose(wx1.data, wx0.data, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            nn.softmax_pair(Tensor(np.zeros((1, 1, 2, 2))),
                            Tensor(np.zeros((1, 1, 3, 3))))


class TestInit:
    def test_same_seed_identical(self):
        a = make_conv(4, 8, seed=123)
        b = make_conv(4, 8, seed=123)
        assert np.array_equal(a.weights.data, b.weights.data)

    def test_different_seed_differs(self):
        a = make_conv(4, 8, seed=1)
        b = make_conv(4, 8, seed=2)
        assert not np.array_equal(a.weights.data, b.weights.data)

    def test_fan_in_bound_for_3x3_64ch(self):
        conv = make_conv(64, 8, seed=0)
        bound = np.sqrt(3.0 / (64 * 9))
        assert np.abs(conv.weights.data).max() <= bound
        # values actually fill the interval rather than collapsing near 0
        assert np.abs(conv.weights.data).max() > 0.8 * bound

    def test_bias_zero(self):
        assert np.all(make_conv(4, 8, seed=7).bias.data == 0.0)
        assert np.all(nn.TransConv2d(4, 8, seed=7).bias.data == 0.0)


def test_gradient_suite_all_ops_pass():
    results = run_suite(seed=0)
    failures = [(r.name, r.max_rel_err) for r in results if not r.ok]
    assert not failures, failures
