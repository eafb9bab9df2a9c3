"""Tensor substrate: construction, elementwise ops, masked mean, backward."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthfusion import tensor as T
from depthfusion.gradcheck import check_gradients
from depthfusion.tensor import (EmptyMask, InvalidShape, NonFinite, NotScalar,
                                Tape, Tensor, backward, elementwise,
                                reduce_mean, tensor_new)


class TestTensorNew:
    def test_zero_fill(self):
        t = tensor_new([2, 2], 0.0)
        assert t.shape == (2, 2)
        assert np.array_equal(t.data, np.zeros((2, 2)))
        assert t.grad is None

    def test_scalar_fill(self):
        t = tensor_new([1], 3.5)
        assert t.data.tolist() == [3.5]

    def test_degenerate_dimension_rejected(self):
        with pytest.raises(InvalidShape):
            tensor_new([2, 0], 1.0)
        with pytest.raises(InvalidShape):
            tensor_new([-1, 3], 1.0)

    def test_size_matches_shape_product(self):
        t = tensor_new([3, 4, 5], 1.0)
        assert t.size == 60


class TestElementwise:
    def test_square(self):
        assert elementwise("square", Tensor([3.0])).data.tolist() == [9.0]

    def test_exp_zero(self):
        assert elementwise("exp", Tensor([0.0])).data.tolist() == [1.0]

    def test_add(self):
        out = elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert out.data.tolist() == [4.0, 6.0]

    def test_sub_div_abs(self):
        assert elementwise("sub", Tensor([5.0]), Tensor([3.0])).data.tolist() == [2.0]
        assert elementwise("div", Tensor([6.0]), Tensor([3.0])).data.tolist() == [2.0]
        assert elementwise("abs", Tensor([-4.0])).data.tolist() == [4.0]

    def test_scalar_broadcast(self):
        out = elementwise("mul", Tensor([1.0, 2.0]), 3.0)
        assert out.data.tolist() == [3.0, 6.0]
        out = Tensor([1.0, 2.0]) + 1.0
        assert out.data.tolist() == [2.0, 3.0]

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeMismatch):
            elementwise("add", Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            elementwise("pow", Tensor([1.0]))

    def test_arity_errors(self):
        with pytest.raises(ValueError):
            elementwise("add", Tensor([1.0]))
        with pytest.raises(ValueError):
            elementwise("exp", Tensor([1.0]), Tensor([1.0]))

    def test_scalar_lift_preserves_dtype(self):
        out = Tensor(np.ones(3, dtype=np.float32)) * 2.0
        assert out.dtype == np.float32

    def test_div_by_zero_trips_in_debug_mode(self):
        with T.debug_checks():
            with pytest.raises(NonFinite):
                elementwise("div", Tensor([1.0]), Tensor([0.0]))
        # release mode: silently produces inf
        out = elementwise("div", Tensor([1.0]), Tensor([0.0]))
        assert np.isinf(out.data[0])


class TestReduceMean:
    def test_full_mask(self):
        out = reduce_mean(Tensor([2.0, 4.0]), np.array([1.0, 1.0]))
        assert out.item() == 3.0

    def test_partial_mask_ignores_masked_out(self):
        out = reduce_mean(Tensor([2.0, 4.0]), np.array([1.0, 0.0]))
        assert out.item() == 2.0

    def test_no_mask_plain_mean(self):
        assert reduce_mean(Tensor([5.0, 5.0, 5.0])).item() == 5.0

    def test_empty_mask(self):
        with pytest.raises(EmptyMask):
            reduce_mean(Tensor([1.0, 2.0]), np.array([0.0, 0.0]))

    def test_mask_shape_mismatch(self):
        with pytest.raises(T.ShapeMismatch):
            reduce_mean(Tensor([1.0, 2.0]), np.array([1.0]))

    def test_n_equals_mask_sum(self):
        data = np.array([1.0, 2.0, 3.0, 4.0])
        mask = np.array([1.0, 1.0, 1.0, 0.0])
        assert reduce_mean(Tensor(data), mask).item() == 2.0


class TestBackward:
    def test_mean_of_square(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as tape:
            loss = reduce_mean(elementwise("square", w))
        backward(loss, tape)
        assert w.grad.tolist() == [4.0]

    def test_sum_of_product_gives_constant(self):
        w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        c = np.array([3.0, 5.0])
        with Tape() as tape:
            loss = reduce_mean(w * Tensor(c)) * float(w.size)   # == sum(w*c)
        backward(loss, tape)
        assert np.array_equal(w.grad, c)

    def test_not_scalar(self):
        w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            out = w * 2.0
        with pytest.raises(NotScalar):
            backward(out, tape)

    def test_loss_off_tape_rejected(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        with Tape() as tape:
            pass
        with pytest.raises(ValueError):
            backward(reduce_mean(w), tape)

    def test_repeated_backward_accumulates(self):
        w = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            loss = reduce_mean(elementwise("square", w))
        backward(loss, tape)
        backward(loss, tape)
        assert w.grad.tolist() == [12.0]   # 2 * (2w)
        w.zero_grad()
        backward(loss, tape)
        assert w.grad.tolist() == [6.0]

    def test_masked_out_positions_get_exactly_zero_grad(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        mask = (rng.random((4, 5)) < 0.5).astype(float)
        mask.flat[0] = 1.0
        with Tape() as tape:
            loss = reduce_mean(elementwise("square", a), mask)
        backward(loss, tape)
        assert np.all(a.grad[mask == 0] == 0.0)
        assert np.all(a.grad[mask == 1] != 0.0)

    @pytest.mark.parametrize("seed", range(4))
    def test_composite_graph_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)

        def build():
            num = (a + b) * T.exp(T.sub(b, a))
            den = T.absval(b) + 1.0
            return reduce_mean(T.div(T.square(num), den))

        res = check_gradients(build, [("a", a), ("b", b)], rng, max_coords=6)
        assert res.max_rel_err <= 1e-4

    def test_maximum_routes_ties_to_first(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        b = Tensor(np.array([1.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            loss = reduce_mean(T.maximum(a, b)) * 2.0
        backward(loss, tape)
        assert a.grad.tolist() == [1.0, 0.0]
        assert b.grad.tolist() == [0.0, 1.0]


class TestTapeProperties:
    def test_topological_order(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            x = a * 2.0
            y = x + a
            reduce_mean(y * x)
        for idx, node in enumerate(tape.nodes):
            for inp in node.inputs:
                j = tape.producer_index(inp)
                assert j < idx

    def test_replay_is_deterministic(self):
        def run():
            rng = np.random.default_rng(7)
            a = Tensor(rng.standard_normal((8, 8)), requires_grad=True)
            b = Tensor(rng.standard_normal((8, 8)))
            with Tape() as tape:
                loss = reduce_mean(T.square(a * b + 1.0))
            backward(loss, tape)
            return loss.item(), a.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        assert np.array_equal(g1, g2)

    def test_no_tape_means_no_recording(self):
        a = Tensor(np.ones(3), requires_grad=True)
        out = a * 2.0
        assert out.node_id == -1 and not out.requires_grad


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50))
def test_binary_op_values_match_numpy(x, y):
    a, b = Tensor(np.array([x])), Tensor(np.array([y]))
    assert elementwise("add", a, b).data[0] == x + y
    assert elementwise("sub", a, b).data[0] == x - y
    assert elementwise("mul", a, b).data[0] == x * y
