"""Elementwise/reduction/tape semantics of the autodiff core."""

import numpy as np
import pytest

import depthadapt.tensor as T
from depthadapt.gradcheck import max_rel_error, numeric_gradient
from depthadapt.tensor import Tensor, concat, detach, elementwise, narrow, reduce, reshape


class TestElementwise:
    def test_add_values(self):
        out = elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert np.array_equal(out.data, [4.0, 6.0])

    def test_sigmoid_at_zero_value_and_gradient(self):
        x = Tensor([0.0], dtype=np.float64, requires_grad=True)
        y = elementwise("sigmoid", x)
        assert y.data[0] == pytest.approx(0.5)
        reduce("sum", y).backward()
        assert x.grad[0] == pytest.approx(0.25)

    def test_gelu_gradient_matches_finite_differences(self):
        x = Tensor([0.7], dtype=np.float64, requires_grad=True)
        reduce("sum", T.gelu(x)).backward()
        num = numeric_gradient(lambda: float(T.gelu(Tensor(x.data, dtype=np.float64)).data[0]),
                               x.data, eps=1e-4)
        assert max_rel_error(x.grad, num) < 1e-6

    def test_broadcasting_trailing_rule(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.array([1.0, 2.0, 3.0]))
        out = elementwise("mul", a, b)
        assert out.shape == (2, 3)
        reduce("sum", out).backward()
        assert np.array_equal(a.grad, np.broadcast_to(b.data, (2, 3)))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            elementwise("add", Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_div_by_zero_strict_mode(self):
        T.set_debug_checks(True)
        try:
            with pytest.raises(ZeroDivisionError):
                elementwise("div", Tensor([1.0]), Tensor([0.0]))
        finally:
            T.set_debug_checks(False)

    def test_nan_debug_check(self):
        T.set_debug_checks(True)
        try:
            with pytest.raises(FloatingPointError):
                elementwise("log", Tensor([-1.0]))
        finally:
            T.set_debug_checks(False)

    def test_clamp_values_and_subgradient(self):
        x = Tensor([-2.0, 0.5, 3.0], dtype=np.float64, requires_grad=True)
        y = elementwise("clamp", x, lo=-1.0, hi=1.0)
        assert np.array_equal(y.data, [-1.0, 0.5, 1.0])
        reduce("sum", y).backward()
        assert np.array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_min2_max2_tie_goes_to_first(self):
        a = Tensor([1.0, 5.0], requires_grad=True)
        b = Tensor([1.0, 2.0], requires_grad=True)
        reduce("sum", elementwise("min2", a, b)).backward()
        assert np.array_equal(a.grad, [1.0, 0.0])
        assert np.array_equal(b.grad, [0.0, 1.0])

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            elementwise("nope", Tensor([1.0]))


class TestReduce:
    def test_mean(self):
        assert reduce("mean", Tensor([1.0, 2.0, 3.0])).item() == pytest.approx(2.0)

    def test_min_routes_gradient_to_winners(self):
        x = Tensor([[3.0, 1.0], [2.0, 5.0]], requires_grad=True)
        out = reduce("min", x, dim=1)
        assert np.array_equal(out.data, [1.0, 2.0])
        reduce("sum", out).backward()
        assert np.array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0]])

    def test_min_tie_lowest_index(self):
        x = Tensor([2.0, 2.0, 3.0], requires_grad=True)
        reduce("min", x).backward()
        assert np.array_equal(x.grad, [1.0, 0.0, 0.0])

    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        reduce("sum", x).backward()
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_empty_reduction_rejected(self):
        with pytest.raises(ValueError):
            reduce("sum", Tensor(np.zeros((0,))))

    def test_bad_dim_rejected(self):
        with pytest.raises(ValueError):
            reduce("sum", Tensor(np.zeros((2, 2))), dim=5)


class TestBackward:
    def test_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x + 1.0).backward()

    def test_detach_blocks_gradient(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * 3.0
        z = detach(y) * 5.0 + y
        reduce("sum", z).backward()
        # only the undetached branch contributes
        assert np.array_equal(x.grad, [3.0])

    def test_gradients_upstream_of_detach_are_exactly_zero(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        y = T.exp(x)
        loss = reduce("sum", T.mul(detach(y), y.detach()))
        loss.backward()
        assert x.grad is None

    def test_grad_accumulates_across_uses(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * 2.0 + x * 3.0
        reduce("sum", y).backward()
        assert np.array_equal(x.grad, [5.0])

    def test_no_grad_context_builds_no_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()


class TestProperties:
    @pytest.mark.parametrize("seed", range(20))
    def test_elementwise_gradients_randomized(self, seed):
        """Every differentiable op passes central FD at 1e-4 on random shapes."""
        rng = np.random.default_rng(seed)
        shape = tuple(rng.integers(1, 5, size=int(rng.integers(1, 4))))
        a = Tensor(rng.uniform(0.3, 2.0, shape) * rng.choice([-1.0, 1.0], shape),
                   dtype=np.float64, requires_grad=True)
        pos = Tensor(rng.uniform(0.3, 2.0, shape), dtype=np.float64, requires_grad=True)
        co = rng.normal(size=shape)
        cases = {
            "exp": (a, lambda t: T.exp(t)),
            "log": (pos, lambda t: T.log(t)),
            "sqrt": (pos, lambda t: T.sqrt(t)),
            "sigmoid": (a, lambda t: T.sigmoid(t)),
            "gelu": (a, lambda t: T.gelu(t)),
            "abs": (a, lambda t: T.abs_(t)),
            "relu": (a, lambda t: T.relu(t)),
            "sin": (a, lambda t: T.sin(t)),
            "cos": (a, lambda t: T.cos(t)),
        }
        for name, (leaf, op) in cases.items():
            leaf.grad = None
            reduce("sum", T.mul(op(leaf), Tensor(co, dtype=np.float64))).backward()
            num = numeric_gradient(
                lambda: float((op(Tensor(leaf.data, dtype=np.float64)).data * co).sum()),
                leaf.data)
            assert max_rel_error(leaf.grad, num) < 1e-4, name

    @pytest.mark.parametrize("seed", range(5))
    def test_forward_determinism_bitwise(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4)).astype(np.float32)

        def pipeline():
            t = Tensor(x.copy())
            return T.gelu(T.mul(T.sigmoid(t), T.exp(T.mul(t, 0.1)))).data

        assert np.array_equal(pipeline(), pipeline())


class TestStructural:
    def test_reshape_roundtrip_gradient(self):
        x = Tensor(np.arange(6.0), requires_grad=True)
        y = reshape(x, (2, 3))
        reduce("sum", T.mul(y, 2.0)).backward()
        assert np.array_equal(x.grad, np.full(6, 2.0))

    def test_narrow_and_concat_inverse(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        parts = [narrow(x, 1, 0, 2), narrow(x, 1, 2, 2)]
        y = concat(parts, 1)
        assert np.array_equal(y.data, x.data)
        reduce("sum", y).backward()
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_tensor_invariants(self):
        t = Tensor(np.zeros((2, 3)), requires_grad=True)
        assert t.size == 6 and t.shape == (2, 3)
        y = t + 1.0
        reduce("sum", y).backward()
        assert t.grad.shape == t.shape and t.grad.dtype == t.dtype
