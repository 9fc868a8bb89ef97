"""
Tests for the autodiff tensor: forward values, backward rules and graph control.
"""

import numpy as np
import pytest

from streamground.errors import ShapeError, StreamGroundError
from streamground.gradcheck import grad_check
from streamground.tensor import Parameter, Tensor, concat, layer_norm, maximum, minimum, no_grad, softmax, stack


class TestForward:
    """Test forward values of the elementary operations."""

    def test_arithmetic_broadcasts(self):
        """Test elementwise arithmetic with numpy broadcasting."""
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        y = Tensor([10.0, 20.0])
        np.testing.assert_allclose((x + y).data, [[11, 22], [13, 24]])
        np.testing.assert_allclose((x * 2 - 1).data, [[1, 3], [5, 7]])
        np.testing.assert_allclose((1 / x).data, [[1, 0.5], [1 / 3, 0.25]])

    def test_matmul_shape_mismatch(self):
        """Test that an incompatible matmul raises ShapeError."""
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_sigmoid_is_stable(self):
        """Test sigmoid at extreme inputs stays finite."""
        out = Tensor([-1000.0, 0.0, 1000.0]).sigmoid().data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        """Test softmax normalizes along the requested axis."""
        out = softmax(Tensor(np.arange(6.0).reshape(2, 3)), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), [1.0, 1.0])

    def test_layer_norm_statistics(self):
        """Test layer_norm produces zero-mean unit-variance rows."""
        out = layer_norm(Tensor([[1.0, 2.0, 3.0, 4.0]])).data
        assert abs(out.mean()) < 1e-12
        assert abs(out.var() - 1.0) < 1e-6

    def test_item_requires_single_element(self):
        """Test item() rejects multi-element tensors."""
        assert Tensor([[3.5]]).item() == 3.5
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_reshape_to_scalar(self):
        """Test reshaping a one-element tensor to a scalar."""
        assert Tensor([[2.0]]).reshape(()).shape == ()

    def test_empty_concat_rejected(self):
        """Test concat and stack refuse empty input."""
        with pytest.raises(ShapeError):
            concat([])
        with pytest.raises(ShapeError):
            stack([])


class TestBackward:
    """Test gradients against central differences."""

    def setup_method(self):
        """Set up test fixtures."""
        self.rng = np.random.default_rng(3)

    def test_polynomial_gradient(self):
        """Test d/dx of sum(x^3 + 2x) = 3x^2 + 2."""
        x = Parameter([1.0, -2.0, 0.5])
        (x**3 + 2 * x).sum().backward()
        np.testing.assert_allclose(x.grad, 3 * x.data**2 + 2)

    def test_gradient_accumulates_over_reuse(self):
        """Test a tensor used twice receives both contributions."""
        x = Parameter([2.0])
        (x * x + x).sum().backward()
        np.testing.assert_allclose(x.grad, [5.0])

    def test_composite_graph(self):
        """Test a matmul, softmax, layer-norm and getitem chain."""
        a = Parameter(self.rng.normal(size=(3, 4)))
        b = Parameter(self.rng.normal(size=(4, 2)))

        def f():
            h = softmax(a @ b, axis=-1)
            return (layer_norm(a)[1:, :2] * h[1:]).sum() + (h[0] ** 2).sum()

        assert grad_check(f, [a, b]) < 1e-5

    def test_concat_stack_maximum_minimum(self):
        """Test the combinators route gradients to the right inputs."""
        x = Parameter(self.rng.normal(size=(2, 3)))
        y = Parameter(self.rng.normal(size=(2, 3)) + 0.1)

        def f():
            joined = concat([x, y], axis=1)
            stacked = stack([x, y], axis=0)
            return (joined.sigmoid().sum() + stacked.exp().mean() + maximum(x, y).sum() - minimum(x, y).abs().sum())

        assert grad_check(f, [x, y]) < 1e-5

    def test_clamp_blocks_gradient_outside_range(self):
        """Test clamp passes gradient only inside its bounds."""
        x = Parameter([-2.0, 0.5, 3.0])
        x.clamp(0.0, 1.0).sum().backward()
        np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])

    def test_backward_needs_grad(self):
        """Test backward on a constant raises."""
        with pytest.raises(StreamGroundError):
            Tensor([1.0]).sum().backward()

    def test_backward_non_scalar_needs_seed(self):
        """Test backward on a vector without a seed gradient raises ShapeError."""
        x = Parameter([1.0, 2.0])
        with pytest.raises(ShapeError):
            (x * 2).backward()

    def test_deep_chain_does_not_recurse(self):
        """Test a graph deeper than the recursion limit still backpropagates."""
        x = Parameter([1.0])
        y = x
        for _ in range(5000):
            y = y + 0.0
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [1.0])


class TestNoGrad:
    """Test graph recording control."""

    def test_no_grad_records_nothing(self):
        """Test operations inside no_grad produce constants."""
        x = Parameter([1.0, 2.0])
        with no_grad():
            y = (x * 3).sum()
        assert not y.requires_grad
        assert y.op is None

    def test_detach_cuts_graph(self):
        """Test detach returns a constant copy of the values."""
        x = Parameter([1.0])
        d = (x * 2).detach()
        assert not d.requires_grad
        np.testing.assert_allclose(d.data, [2.0])
