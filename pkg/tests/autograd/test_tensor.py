"""
Tests for Tensor, Param and reverse-mode propagation
"""

import numpy as np
import pytest

from src.autograd import kernels
from src.autograd.tensor import (
    CHECK_DTYPE,
    TRAIN_DTYPE,
    BackwardError,
    Param,
    ShapeError,
    Tensor,
    backward,
    backward_many,
)


class TestTensor:
    """Test cases for Tensor construction"""

    @pytest.mark.parametrize("shape", [(3, 3), (1, 3, 3), (1, 1, 1, 1, 1)])
    def test_rejects_non_4d(self, shape):
        """Test that only rank-4 arrays are accepted"""
        with pytest.raises(ShapeError, match="4-D"):
            Tensor(np.zeros(shape))

    def test_rejects_empty_dimension(self):
        """Test that a zero-length axis is rejected"""
        with pytest.raises(ShapeError, match=">= 1"):
            Tensor(np.zeros((1, 0, 4, 4)))

    def test_values_are_read_only(self):
        """Test that a tensor cannot be mutated through .data"""
        t = Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            t.data[0, 0, 0, 0] = 1.0

    def test_numpy_returns_writable_copy(self):
        """Test that numpy() is a detached copy"""
        t = Tensor(np.zeros((1, 1, 2, 2)))
        copy = t.numpy()
        copy[0, 0, 0, 0] = 5.0
        assert t.data[0, 0, 0, 0] == 0.0

    def test_dtype_handling(self):
        """Test that float64 is kept and other dtypes become float32"""
        assert Tensor(np.zeros((1, 1, 1, 1), dtype=np.float64)).dtype == CHECK_DTYPE
        assert Tensor(np.zeros((1, 1, 1, 1), dtype=np.int64)).dtype == TRAIN_DTYPE


class TestParam:
    """Test cases for Param"""

    def test_accumulate_sums(self):
        """Test that successive gradients add up"""
        p = Param("w", np.zeros((2, 2)))
        p.accumulate(np.ones((2, 2)))
        p.accumulate(np.full((2, 2), 2.0))
        np.testing.assert_array_equal(p.grad, np.full((2, 2), 3.0))

    def test_accumulate_shape_mismatch(self):
        """Test that a wrongly shaped gradient names the parameter"""
        p = Param("dec.conv1.weight", np.zeros((3, 3, 1, 1)))
        with pytest.raises(ShapeError, match="dec.conv1.weight"):
            p.accumulate(np.zeros((3, 3)))

    def test_weight_vs_bias(self):
        """Test that only rank > 1 parameters count as weights"""
        assert Param("w", np.zeros((1, 1, 1, 1))).is_weight
        assert not Param("b", np.zeros(4)).is_weight

    def test_zero_grad_and_momentum(self):
        """Test that momentum starts at zero and zero_grad sets zeros rather than None"""
        p = Param("w", np.ones((2, 3)))
        assert not p.momentum.any()
        p.zero_grad()
        assert p.grad is not None and not p.grad.any()

    def test_astype(self):
        """Test that astype converts value and buffers"""
        p = Param("w", np.ones((2, 2), dtype=np.float32))
        p.zero_grad()
        p.astype(np.float64)
        assert p.value.dtype == np.float64
        assert p.momentum.dtype == np.float64
        assert p.grad is not None and p.grad.dtype == np.float64


class TestBackward:
    """Test cases for backward / backward_many"""

    def test_leaf_has_no_record(self):
        """Test that backward on a leaf raises BackwardError"""
        with pytest.raises(BackwardError, match="without a recorded forward"):
            backward(Tensor(np.ones((1, 1, 1, 1))), np.ones((1, 1, 1, 1)))

    def test_records_are_single_use(self):
        """Test that a consumed record cannot be propagated twice"""
        x = Tensor(np.ones((1, 1, 2, 2)))
        y = kernels.relu(x)
        backward(y, np.ones(y.shape), wrt=[x])
        with pytest.raises(BackwardError):
            backward(y, np.ones(y.shape), wrt=[x])

    def test_upstream_shape_checked(self):
        """Test that an upstream of the wrong shape is rejected"""
        y = kernels.relu(Tensor(np.ones((1, 1, 2, 2))))
        with pytest.raises(ShapeError, match="upstream"):
            backward(y, np.ones((1, 1, 1, 1)))

    def test_shared_input_accumulates(self, rng):
        """Test that a tensor used twice receives the sum of both paths (d(x + x)/dx = 2)"""
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        y = kernels.add(x, x)
        (dx,) = backward(y, np.ones(y.shape), wrt=[x])
        np.testing.assert_array_equal(dx, np.full(x.shape, 2.0))

    def test_unreachable_leaf_gets_zeros(self):
        """Test that a leaf outside the graph gets a zero gradient"""
        x = Tensor(np.ones((1, 1, 2, 2)))
        other = Tensor(np.ones((1, 3, 1, 1)))
        y = kernels.relu(x)
        _, d_other = backward(y, np.ones(y.shape), wrt=[x, other])
        assert d_other.shape == other.shape and not d_other.any()

    def test_several_seeds_share_one_pass(self, rng):
        """Test that seeding two outputs equals summing their separate contributions"""
        x = Tensor(rng.standard_normal((1, 1, 2, 2)))
        hidden = kernels.relu(x)
        a, b = kernels.sigmoid(hidden), kernels.upsample_nearest2x(hidden)
        (dx,) = backward_many([(a, np.ones(a.shape)), (b, np.ones(b.shape))], wrt=[x])

        s = 1 / (1 + np.exp(-np.maximum(x.data, 0)))
        expected = np.where(x.data > 0, s * (1 - s) + 4.0, 0.0)
        np.testing.assert_allclose(dx, expected, atol=1e-12)

    def test_parameter_gradients_land_on_params(self, rng):
        """Test that conv2d parameter adjoints reach Param.grad"""
        weight = Param("w", rng.standard_normal((1, 1, 2, 1)))
        bias = Param("b", np.zeros(1))
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        y = kernels.conv2d(x, weight, bias)
        backward(y, np.ones(y.shape))
        assert bias.grad is not None and bias.grad.item() == pytest.approx(9.0)
        assert weight.grad is not None
        np.testing.assert_allclose(weight.grad[0, 0, :, 0], x.data.sum(axis=(0, 2, 3)))
