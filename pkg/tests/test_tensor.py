import numpy as np
import pytest

from rcnet.exceptions import ShapeMismatchError
from rcnet.schemas import Precision
from rcnet.tensor import add, check_same, dtype_of, flat_index, mse, precision_of, unflat_index, zeros, zeros_like


@pytest.mark.parametrize("dims,precision,length", [
    ((1, 1, 2, 2), Precision.DOUBLE, 4),
    ((2, 3, 4, 4), Precision.SINGLE, 96),
    ((1, 1, 1, 1), Precision.DOUBLE, 1),
])
def test_zeros(dims, precision, length):
    t = zeros(*dims, precision=precision)
    assert t.shape == dims
    assert t.size == length
    assert t.dtype == dtype_of(precision)
    assert not t.any()


def test_zeros_rejects_empty_dims():
    with pytest.raises(ValueError):
        zeros(1, 0, 2, 2)


def test_precision_of():
    assert precision_of(np.zeros(1, dtype=np.float32)) == Precision.SINGLE
    assert precision_of(np.zeros(1, dtype=np.float64)) == Precision.DOUBLE
    with pytest.raises(TypeError):
        precision_of(np.zeros(1, dtype=np.int32))


def test_add_examples():
    a = np.array([1.0, 2.0]).reshape(1, 1, 1, 2)
    np.testing.assert_array_equal(add(a, np.zeros_like(a)), a)
    np.testing.assert_array_equal(add(a, np.array([3.0, 4.0]).reshape(1, 1, 1, 2)).ravel(), [4.0, 6.0])
    assert not add(a, -a).any()


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_add_zeros_is_bitwise_identity(rng, dtype):
    a = rng.normal(size=(2, 3, 4, 5)).astype(dtype)
    assert np.array_equal(add(a, zeros_like(a)), a)


def test_add_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeMismatchError) as info:
        add(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))
    assert info.value.shape_a == (1, 1, 2, 2)
    assert info.value.shape_b == (1, 1, 2, 3)
    assert "(1, 1, 2, 3)" in str(info.value)


def test_add_rejects_mixed_precision():
    with pytest.raises(ShapeMismatchError):
        check_same(np.zeros((1, 1, 1, 1), np.float32), np.zeros((1, 1, 1, 1), np.float64))


def test_mse_examples(rng):
    assert mse(np.zeros((1, 1, 1, 2)), np.array([1.0, 3.0]).reshape(1, 1, 1, 2)) == 5.0
    assert mse(np.full((1, 1, 1, 1), 2.0), np.full((1, 1, 1, 1), -2.0)) == 16.0
    a = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=(2, 2, 3, 3))
    assert mse(a, a) == 0.0
    assert mse(a, b) == mse(b, a)
    assert mse(a, b) > 0


def test_flat_index_round_trip():
    shape = (2, 3, 4, 5)
    for index in np.ndindex(shape):
        flat = flat_index(index, shape)
        assert flat == np.ravel_multi_index(index, shape)
        assert unflat_index(flat, shape) == index
    with pytest.raises(IndexError):
        flat_index((2, 0, 0, 0), shape)
    with pytest.raises(IndexError):
        unflat_index(120, shape)
