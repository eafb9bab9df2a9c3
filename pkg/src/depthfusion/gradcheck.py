"""Finite-difference verification of every backward rule.

Analytic gradients are compared against central differences of the scalar
loss computed by forward evaluation only (step 1e-5, double precision).
Large tensors are checked at a random sample of coordinates. The suite
covers each layer op, both focal-loss variants, the composite loss, and the
full fusion network on a toy input.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import nn
from .loss import FOCAL_RAMP, LossWeights, composite_loss, focal_mse
from .model import FusionNet, ModelConfig
from .tensor import Tape, Tensor, backward, mul, reduce_mean, square, sub

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-7   # below this, compare absolutely (FD noise dominates)


@dataclasses.dataclass
class CheckResult:
    name: str
    max_rel_err: float
    checked_coords: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= REL_TOL


def _coord_sample(rng, size: int, max_coords: int) -> np.ndarray:
    if size <= max_coords:
        return np.arange(size)
    return rng.choice(size, size=max_coords, replace=False)


def check_gradients(build, wrt: list[tuple[str, Tensor]], rng,
                    max_coords: int = 8, step: float = FD_STEP,
                    fd_build=None) -> CheckResult:
    """Compare analytic and numeric gradients of ``build()``.

    ``build`` re-runs the forward pass from the current tensor data and
    returns the scalar loss tensor; it must be a pure function of the
    tensors in ``wrt``. ``fd_build`` overrides the function being
    finite-differenced: ops with detached factors claim the gradient of the
    frozen-factor function, so that is what the oracle must probe.
    """
    for _, t in wrt:
        t.zero_grad()
    with Tape() as tape:
        loss = build()
    backward(loss, tape)
    probe = fd_build or build

    def fd_at(flat, c, h):
        orig = flat[c]
        flat[c] = orig + h
        f_plus = probe().item()
        flat[c] = orig - h
        f_minus = probe().item()
        flat[c] = orig
        return (f_plus - f_minus) / (2.0 * h)

    def rel_err(a, numeric):
        denom = max(abs(a), abs(numeric))
        err = abs(a - numeric)
        return 0.0 if denom < ABS_FLOOR and err < ABS_FLOOR else err / max(denom, ABS_FLOOR)

    worst = 0.0
    checked = 0
    for _, t in wrt:
        analytic = t.grad.reshape(-1) if t.grad is not None else np.zeros(t.size)
        flat = t.data.reshape(-1)
        for c in _coord_sample(rng, t.size, max_coords):
            a = analytic[c]
            rel = rel_err(a, fd_at(flat, c, step))
            # Central differences are only valid where the function is
            # smooth inside [x-h, x+h]; a ReLU kink in that interval
            # corrupts the quotient. Re-probing with smaller steps separates
            # that case from a genuinely wrong backward rule, which stays
            # wrong at every step size.
            shrink = step
            while rel > REL_TOL and shrink > step / 100.0:
                shrink /= 8.0
                rel = min(rel, rel_err(a, fd_at(flat, c, shrink)))
            worst = max(worst, rel)
            checked += 1
    return CheckResult(name="", max_rel_err=worst, checked_coords=checked)


def _projected_mean(out: Tensor, proj: np.ndarray) -> Tensor:
    return reduce_mean(mul(out, Tensor(proj)))


def _named(result: CheckResult, name: str) -> CheckResult:
    result.name = name
    return result


def run_suite(seed: int = 0) -> list[CheckResult]:
    """Run every gradient check; returns one result per op."""
    rng = np.random.default_rng(seed)
    results = []

    # conv2d, stride 1 and 2, gradients w.r.t. input, weights, bias
    for stride in (1, 2):
        conv = nn.Conv2d(3, 4, stride=stride, padding=1, relu=True, seed=int(rng.integers(2**31)))
        x = Tensor(rng.standard_normal((3, 2, 6, 7)), requires_grad=True)
        proj = rng.standard_normal(conv(x).shape)
        wrt = [("x", x), ("w", conv.weights), ("b", conv.bias)]
        res = check_gradients(lambda: _projected_mean(conv(x), proj), wrt, rng)
        results.append(_named(res, f"conv2d_3x3_s{stride}_relu"))

    # transconv2d 2x2 stride 2
    tconv = nn.TransConv2d(3, 2, seed=int(rng.integers(2**31)))
    x = Tensor(rng.standard_normal((3, 2, 4, 5)), requires_grad=True)
    proj = rng.standard_normal(tconv(x).shape)
    wrt = [("x", x), ("w", tconv.weights), ("b", tconv.bias)]
    results.append(_named(check_gradients(lambda: _projected_mean(tconv(x), proj), wrt, rng),
                          "transconv2d_2x2_s2"))

    # batch norm, training and eval modes
    for training in (True, False):
        bn = nn.BatchNorm(3)
        bn.running_mean[:] = rng.standard_normal(3)
        bn.running_var[:] = 0.5 + rng.random(3)
        x = Tensor(rng.standard_normal((3, 2, 4, 5)), requires_grad=True)
        proj = rng.standard_normal(x.shape)
        wrt = [("x", x), ("gamma", bn.gamma), ("beta", bn.beta)]
        res = check_gradients(lambda: _projected_mean(bn(x, training), proj), wrt, rng)
        results.append(_named(res, f"batchnorm_{'train' if training else 'eval'}"))

    # relu (inputs kept away from the kink)
    x_data = rng.standard_normal((3, 4))
    x_data += np.sign(x_data) * 0.05
    x = Tensor(x_data, requires_grad=True)
    proj = rng.standard_normal(x.shape)
    results.append(_named(check_gradients(lambda: _projected_mean(nn.relu(x), proj),
                                          [("x", x)], rng), "relu"))

    # softmax_pair through both outputs
    a = Tensor(rng.standard_normal((1, 1, 3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 1, 3, 4)), requires_grad=True)
    pa = rng.standard_normal(a.shape)
    pb = rng.standard_normal(a.shape)

    def softmax_loss():
        wx, wy = nn.softmax_pair(a, b)
        return reduce_mean(mul(wx, Tensor(pa)) + mul(wy, Tensor(pb)))

    results.append(_named(check_gradients(softmax_loss, [("x", a), ("y", b)], rng),
                          "softmax_pair"))

    # focal loss, non-detached (true FD) and detached (FD of the
    # frozen-factor function, which is what the detached gradient claims)
    target = rng.uniform(1.0, 10.0, size=(1, 1, 5, 6))
    mask = (rng.random(target.shape) < 0.6).astype(np.float64)
    mask.flat[0] = 1.0
    pred = Tensor(target + rng.standard_normal(target.shape), requires_grad=True)
    res = check_gradients(
        lambda: focal_mse(pred, target, mask, epoch=7, detach_focal=False),
        [("pred", pred)], rng)
    results.append(_named(res, "focal_mse_attached"))

    w0 = 1.0 + FOCAL_RAMP * 7 * np.abs(pred.data - target)
    res = check_gradients(
        lambda: focal_mse(pred, target, mask, epoch=7, detach_focal=True),
        [("pred", pred)], rng,
        fd_build=lambda: reduce_mean(mul(square(sub(pred, Tensor(target))), Tensor(w0)), mask))
    results.append(_named(res, "focal_mse_detached"))

    # composite loss through all three prediction maps (non-detached so the
    # finite differences probe the exact function being differentiated)
    p_out = Tensor(target + rng.standard_normal(target.shape), requires_grad=True)
    p_glo = Tensor(target + rng.standard_normal(target.shape), requires_grad=True)
    p_loc = Tensor(target + rng.standard_normal(target.shape), requires_grad=True)
    res = check_gradients(
        lambda: composite_loss(p_out, p_glo, p_loc, target, mask, epoch=3,
                               weights=LossWeights(), detach_focal=False),
        [("out", p_out), ("global", p_glo), ("local", p_loc)], rng)
    results.append(_named(res, "composite_loss"))

    # full fusion network on a 2x8x24 toy batch, sampling every parameter
    # (two encoder levels so the toy height is still divisible by the
    # global branch's total downsampling factor)
    model = FusionNet(ModelConfig(global_widths=(16, 32), seed=int(rng.integers(2**31))))
    rgb = Tensor(rng.random((3, 2, 8, 24)), requires_grad=False)
    lidar_np = rng.uniform(1.0, 10.0, size=(1, 2, 8, 24))
    lidar_np *= rng.random(lidar_np.shape) < 0.3
    lidar = Tensor(lidar_np)
    proj = rng.standard_normal((1, 2, 8, 24))

    def net_loss():
        return _projected_mean(model(rgb, lidar, training=False).d_out, proj)

    # Step 1e-6 here: with thousands of composed ReLUs some pre-activation
    # lands within 1e-5 of its kink, which corrupts the central-difference
    # quotient at the default step.
    wrt = list(model.named_params())
    res = check_gradients(net_loss, wrt, rng, max_coords=2, step=1e-6)
    results.append(_named(res, "fusionnet_forward_toy"))

    return results
