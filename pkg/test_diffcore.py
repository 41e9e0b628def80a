#!/usr/bin/env python3
"""
Autodiff operator tests: forward values, shapes, gradients.

Run with: pytest test_diffcore.py -v
"""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from core.diffcore import (
    MAX_AXES, MAX_SAMPLE_AXES, Tensor, add, backward, conv1d_time, conv2d, debug_guard,
    gelu, getitem, global_avg_pool, grad_check, local_avg_pool, mul, operator_suite,
    pointwise_linear, reduce_mean, reduce_sum, scale, sigmoid, sqrt_eps, square,
    suite_operator_names, tensor, trace_ops,
)
from core.stdown_core import NonFiniteError, ShapeMismatchError


def field(*shape, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


# ============================================================================
# ELEMENTWISE
# ============================================================================

class TestElementwise:
    """Test elementwise operators and their closed forms."""

    def test_gelu_zero(self):
        """Test gelu(0) = 0."""
        assert gelu(tensor([0.0])).item() == 0.0

    def test_gelu_one(self):
        """Test gelu(1) under the tanh approximation."""
        assert gelu(tensor([1.0])).item() == pytest.approx(0.84119, abs=1e-4)

    def test_gelu_asymptotes(self):
        """Test gelu tends to x for large x and 0 for very negative x."""
        out = gelu(tensor([10.0, -10.0])).data
        assert out[0] == pytest.approx(10.0)
        assert abs(out[1]) < 1e-10

    def test_sigmoid_stable_at_extremes(self):
        """Test sigmoid saturates without overflow."""
        out = sigmoid(tensor([-1000.0, 0.0, 1000.0])).data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
        assert np.all(np.isfinite(out))

    def test_sqrt_eps_finite_gradient_at_zero(self):
        """Test sqrt(x + eps) has a finite gradient at 0."""
        x = tensor([0.0], requires_grad=True)
        y = sqrt_eps(x)
        backward(reduce_sum(y))
        assert y.item() == pytest.approx(1e-6)
        assert np.isfinite(x.grad).all()

    def test_broadcast_gradient(self):
        """Test gradients of broadcast operands are summed back."""
        a = tensor(np.ones((3, 4)), requires_grad=True)
        b = tensor(np.ones((1, 4)), requires_grad=True)
        backward(reduce_sum(add(a, b)))
        np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))
        np.testing.assert_array_equal(a.grad, np.ones((3, 4)))

    def test_operator_sugar(self):
        """Test Python operators build graph nodes."""
        x = tensor([2.0], requires_grad=True)
        y = (x * 3.0 - 1.0) / 2.0 + x
        backward(reduce_sum(y))
        assert y.item() == pytest.approx(4.5)
        assert x.grad[0] == pytest.approx(2.5)


# ============================================================================
# SHAPES & POOLING
# ============================================================================

class TestShapes:
    """Test reductions, pooling and linear layers."""

    def test_axis_limit(self):
        """Test four sample axes plus a batch axis are accepted and six are not."""
        assert Tensor(np.zeros((2, 1, 3, 3, 2))).shape == (2, 1, 3, 3, 2)
        with pytest.raises(ShapeMismatchError) as exc:
            Tensor(np.zeros((1, 2, 1, 3, 3, 2)))
        assert exc.value.details["max_axes"] == MAX_AXES == MAX_SAMPLE_AXES + 1

    def test_global_avg_pool_constant(self):
        """Test pooling a constant field returns the constant per channel."""
        x = tensor(np.stack([np.full((4, 5), 2.0), np.full((4, 5), -1.0)], axis=-1))
        np.testing.assert_allclose(global_avg_pool(x).data, [2.0, -1.0])

    def test_global_avg_pool_batched(self):
        """Test leading batch axes are kept."""
        assert global_avg_pool(tensor(np.zeros((2, 3, 4, 5, 6)))).shape == (2, 3, 6)

    def test_local_avg_pool_constant(self):
        """Test a box mean of a constant is constant, including the borders."""
        out = local_avg_pool(tensor(np.full((5, 4, 2), 0.7)), 3).data
        np.testing.assert_allclose(out, 0.7)

    def test_local_avg_pool_even_window(self):
        """Test even windows are rejected."""
        with pytest.raises(ShapeMismatchError):
            local_avg_pool(tensor(np.zeros((3, 3, 1))), 2)

    def test_pointwise_linear(self):
        """Test x @ W + b over the channel axis."""
        x = tensor([[1.0, 2.0]])
        w = tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
        b = tensor([0.5, 0.5, 0.5])
        np.testing.assert_allclose(pointwise_linear(x, w, b).data, [[1.5, 2.5, 3.5]])

    def test_pointwise_linear_mismatch(self):
        """Test mismatched channel counts raise."""
        with pytest.raises(ShapeMismatchError):
            pointwise_linear(tensor(np.zeros((2, 3))), tensor(np.zeros((2, 2))))

    def test_too_many_axes(self):
        """Test tensors above five axes are rejected."""
        with pytest.raises(ShapeMismatchError):
            Tensor(np.zeros((1,) * 6))


# ============================================================================
# CONVOLUTIONS
# ============================================================================

class TestConv2d:
    """Test dilated spatial convolution."""

    def test_identity_kernel(self):
        """Test a centered delta kernel reproduces the input."""
        x = field(6, 5, 1)
        k = np.zeros((3, 3, 1, 1))
        k[1, 1, 0, 0] = 1.0
        np.testing.assert_array_equal(conv2d(tensor(x), tensor(k)).data, x)

    def test_ones_kernel_constant_field(self):
        """Test a 3x3 ones kernel on constant c gives 9c with no padding."""
        out = conv2d(tensor(np.full((5, 5, 1), 0.5)), tensor(np.ones((3, 3, 1, 1))), padding="none")
        assert out.shape == (3, 3, 1)
        np.testing.assert_allclose(out.data, 4.5)

    def test_dilated_shape(self):
        """Test k=3, d=2 has effective size 5: 8x8 shrinks to 4x4."""
        out = conv2d(tensor(np.zeros((8, 8, 2))), tensor(np.zeros((3, 3, 2, 4))),
                     dilation=2, padding="none")
        assert out.shape == (4, 4, 4)

    def test_same_padding_keeps_shape(self):
        """Test padding=same keeps H x W for any dilation."""
        out = conv2d(tensor(np.zeros((2, 7, 6, 2))), tensor(np.zeros((3, 3, 2, 3))), dilation=3)
        assert out.shape == (2, 7, 6, 3)

    def test_undersized_input_rejected(self):
        """Test padding=none needs an input at least the effective size."""
        with pytest.raises(ShapeMismatchError):
            conv2d(tensor(np.zeros((4, 4, 1))), tensor(np.zeros((3, 3, 1, 1))),
                   dilation=2, padding="none")

    def test_even_kernel_rejected(self):
        """Test even kernel sides are rejected."""
        with pytest.raises(ShapeMismatchError):
            conv2d(tensor(np.zeros((4, 4, 1))), tensor(np.zeros((2, 2, 1, 1))))

    def test_unknown_padding(self):
        """Test unknown padding modes raise ValueError."""
        with pytest.raises(ValueError):
            conv2d(tensor(np.zeros((4, 4, 1))), tensor(np.zeros((3, 3, 1, 1))), padding="reflect")

    def test_linearity(self):
        """Test conv2d(a x + b y) = a conv2d(x) + b conv2d(y)."""
        x, y, k = field(6, 6, 2, seed=1), field(6, 6, 2, seed=2), tensor(field(3, 3, 2, 3, seed=3))
        lhs = conv2d(tensor(1.5 * x - 0.5 * y), k, dilation=2).data
        rhs = 1.5 * conv2d(tensor(x), k, dilation=2).data - 0.5 * conv2d(tensor(y), k, dilation=2).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_bias_added(self):
        """Test the bias shifts every output cell."""
        out = conv2d(tensor(np.zeros((3, 3, 1))), tensor(np.zeros((1, 1, 1, 2))), tensor([1.0, -1.0]))
        np.testing.assert_array_equal(out.data[..., 0], np.ones((3, 3)))
        np.testing.assert_array_equal(out.data[..., 1], -np.ones((3, 3)))


class TestConv1dTime:
    """Test dilated temporal convolution."""

    def test_identity_k1(self):
        """Test a k=1 identity kernel reproduces the input."""
        x = field(5, 3)
        np.testing.assert_array_equal(conv1d_time(tensor(x), tensor(np.eye(3)[None])).data, x)

    def test_causal_sum_of_two_taps(self):
        """Test causal k=2 summing kernel on [a, b, c] gives [a, a+b, b+c]."""
        x = tensor(np.array([[1.0], [2.0], [4.0]]))
        out = conv1d_time(x, tensor(np.ones((2, 1, 1)))).data[:, 0]
        np.testing.assert_array_equal(out, [1.0, 3.0, 6.0])

    def test_none_padding_length(self):
        """Test padding=none with k=3, d=1 shortens T=5 to 3."""
        out = conv1d_time(tensor(np.zeros((5, 2))), tensor(np.zeros((3, 2, 2))), padding="none")
        assert out.shape == (3, 2)

    def test_undersized_rejected(self):
        """Test sequences shorter than the effective kernel raise with padding=none."""
        with pytest.raises(ShapeMismatchError):
            conv1d_time(tensor(np.zeros((4, 1))), tensor(np.zeros((3, 1, 1))), dilation=2,
                        padding="none")

    @given(st.integers(0, 5), st.integers(1, 3))
    def test_causality(self, t, dilation):
        """Test a perturbation at time t only changes outputs at times >= t."""
        x = field(6, 2, seed=4)
        k = tensor(field(3, 2, 2, seed=5))
        base = conv1d_time(tensor(x), k, dilation=dilation).data
        bumped = x.copy()
        bumped[t] += 1.0
        out = conv1d_time(tensor(bumped), k, dilation=dilation).data
        np.testing.assert_array_equal(out[:t], base[:t])

    def test_batched_leading_axes(self):
        """Test (B, H, W, T, C) inputs convolve along T."""
        out = conv1d_time(tensor(np.zeros((2, 3, 3, 5, 4))), tensor(np.zeros((2, 4, 6))), dilation=2)
        assert out.shape == (2, 3, 3, 5, 6)


# ============================================================================
# BACKWARD
# ============================================================================

class TestBackward:
    """Test the reverse pass over the graph."""

    def test_mean_gradient(self):
        """Test d mean(x) / dx = 1/N."""
        x = tensor(field(8), requires_grad=True)
        backward(reduce_mean(x))
        np.testing.assert_allclose(x.grad, np.full(8, 1 / 8))

    def test_sum_of_squares_gradient(self):
        """Test d sum(x*x) / dx = 2x at [1, -2]."""
        x = tensor([1.0, -2.0], requires_grad=True)
        backward(reduce_sum(mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, -4.0])

    def test_fan_out_accumulates(self):
        """Test a tensor used twice receives both gradient contributions."""
        x = tensor([3.0, 1.0], requires_grad=True)
        y = add(getitem(x, 0), getitem(x, 0))
        backward(reduce_sum(add(y, square(x))))
        np.testing.assert_array_equal(x.grad, [10.0, 2.0])

    def test_non_scalar_rejected(self):
        """Test backward needs a scalar loss."""
        with pytest.raises(ShapeMismatchError):
            backward(square(tensor([1.0, 2.0], requires_grad=True)))

    def test_repeat_backward_is_bit_identical(self):
        """Test two backward passes over one graph give identical gradients."""
        x = tensor(field(2, 6, 6, 2), requires_grad=True)
        k = tensor(field(3, 3, 2, 2, seed=1), requires_grad=True)
        loss = reduce_mean(gelu(conv2d(x, k, dilation=2)))
        backward(loss)
        first = (x.grad.copy(), k.grad.copy())
        backward(loss)
        np.testing.assert_array_equal(x.grad, first[0])
        np.testing.assert_array_equal(k.grad, first[1])

    def test_constants_get_no_gradient(self):
        """Test tensors without requires_grad keep grad None."""
        x = tensor([1.0], requires_grad=True)
        c = tensor([2.0])
        backward(reduce_sum(mul(x, c)))
        assert c.grad is None
        assert x.grad[0] == 2.0

    def test_debug_guard_catches_non_finite(self):
        """Test the debug guard raises on the first non-finite output."""
        x = tensor([np.inf])
        with debug_guard():
            with pytest.raises(NonFiniteError) as exc:
                scale(x, 2.0)
        assert exc.value.details["op"] == "scale"
        assert np.isinf(scale(x, 2.0).item())

    def test_trace_ops(self):
        """Test trace_ops records operator tags in evaluation order."""
        with trace_ops() as ops:
            reduce_sum(gelu(scale(tensor([1.0]), 2.0)))
        assert ops == ["scale", "gelu", "reduce_sum"]


# ============================================================================
# GRADIENT CHECK
# ============================================================================

class TestGradCheck:
    """Test the finite-difference gradient checker."""

    def test_sum_exact(self):
        """Test a linear function checks to near machine precision."""
        assert grad_check(reduce_sum, np.array([0.5, -1.25, 2.0])) < 1e-10

    def test_gelu_sum(self):
        """Test gelu-sum at random points."""
        x = np.random.default_rng(0).uniform(0.0, 2.0, (4, 5))
        assert grad_check(lambda t: reduce_sum(gelu(t)), x) < 1e-6

    def test_conv_sigmoid_chain(self):
        """Test a conv2d + sigmoid composite."""
        result = operator_suite(instances=5, seed=0, ops=["conv2d_sigmoid_chain"])
        assert result["conv2d_sigmoid_chain"]["max_rel_error"] < 1e-4

    def test_detects_wrong_gradient(self):
        """Test a broken backward closure is reported."""
        def broken(t):
            out = square(t)
            out._backward = lambda g: None
            return reduce_sum(out)
        assert grad_check(broken, np.array([1.0, 2.0])) > 0.5

    def test_max_elements_subsample(self):
        """Test probing a seeded subset of entries."""
        x = np.random.default_rng(0).uniform(1.0, 2.0, (10, 10))
        assert grad_check(lambda t: reduce_sum(square(t)), x, max_elements=7, seed=3) < 1e-6

    def test_dict_inputs(self):
        """Test named inputs are all checked."""
        inputs = {"x": field(2, 5, 5, 2), "k": field(3, 3, 2, 1, seed=9)}
        f = lambda t: reduce_sum(square(conv2d(t["x"], t["k"], dilation=2)))
        assert grad_check(f, inputs) < 1e-4

    def test_full_suite_passes(self):
        """Test every operator on 20 random instances."""
        results = operator_suite(instances=20, seed=0)
        assert set(results) == set(suite_operator_names())
        failed = {k: v["max_rel_error"] for k, v in results.items() if not v["passed"]}
        assert failed == {}

    def test_unknown_operator(self):
        """Test unknown operator names raise ValueError."""
        with pytest.raises(ValueError):
            operator_suite(instances=1, ops=["conv3d"])
