import numpy as np
import pytest

from mixnet import tensor as T
from mixnet.errors import ParameterError, ShapeError


def test_wraps_lists_as_float32():
    t = T.Tensor([[1, 2], [3, 4]])
    assert t.dtype == np.float32
    assert t.shape == (2, 2)
    np.testing.assert_array_equal(t.data, [[1, 2], [3, 4]])


def test_float64_arrays_keep_their_dtype():
    t = T.Tensor(np.ones((3,), dtype=np.float64))
    assert t.dtype == np.float64


def test_explicit_dtype_wins():
    t = T.Tensor(np.ones((3,), dtype=np.float64), dtype=np.float32)
    assert t.dtype == np.float32


def test_integer_input_becomes_float32():
    t = T.Tensor(np.arange(4, dtype=np.int64))
    assert t.dtype == np.float32


def test_scalar_tensors_allowed():
    t = T.Tensor(3.5)
    assert t.shape == ()
    assert float(t.data) == 3.5


def test_validate_shape_rejects_bad_extents():
    with pytest.raises(ShapeError):
        T.validate_shape((2, 0, 3))
    with pytest.raises(ShapeError):
        T.validate_shape((-1,))
    assert T.validate_shape((4, 5)) == (4, 5)


def test_validate_shape_overflow_guard():
    with pytest.raises(ShapeError):
        T.validate_shape((1 << 21, 1 << 21))


def test_zeros():
    z = T.zeros((2, 3))
    assert z.shape == (2, 3)
    assert z.dtype == np.float32
    assert not z.data.any()


def test_he_init_deterministic_and_scaled():
    a = T.he_init((5000,), fan_in=50, seed=7)
    b = T.he_init((5000,), fan_in=50, seed=7)
    c = T.he_init((5000,), fan_in=50, seed=8)
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    # std should be near sqrt(2/50) = 0.2
    assert abs(a.data.std() - 0.2) < 0.01
    assert abs(a.data.mean()) < 0.01


def test_he_init_rejects_bad_fan_in():
    with pytest.raises(ParameterError):
        T.he_init((3, 3), fan_in=0, seed=1)


def test_add_and_shape_mismatch():
    a = T.Tensor([1.0, 2.0])
    b = T.Tensor([3.0, 4.0])
    np.testing.assert_array_equal(T.add(a, b).data, [4.0, 6.0])
    with pytest.raises(ShapeError):
        T.add(a, T.Tensor([[1.0]]))


def test_scale_and_relu():
    a = T.Tensor([-2.0, 0.0, 3.0])
    np.testing.assert_array_equal(T.scale(a, 2.0).data, [-4.0, 0.0, 6.0])
    np.testing.assert_array_equal(T.relu(a).data, [0.0, 0.0, 3.0])
    assert T.relu(a).dtype == np.float32


def test_ravel_unravel_round_trip():
    shape = (3, 4, 5)
    for flat in range(60):
        idx = T.unravel_index(flat, shape)
        assert T.ravel_index(idx, shape) == flat
    assert T.ravel_index((2, 3, 4), shape) == 59
    with pytest.raises(ShapeError):
        T.ravel_index((3, 0, 0), shape)
    with pytest.raises(ShapeError):
        T.unravel_index(60, shape)


def test_derive_seed_is_stable_and_sensitive():
    s1 = T.derive_seed("layer", 3, "weight")
    s2 = T.derive_seed("layer", 3, "weight")
    s3 = T.derive_seed("layer", 4, "weight")
    assert s1 == s2
    assert s1 != s3
    assert 0 <= s1 < 2 ** 64
    # string/int arguments must not collide
    assert T.derive_seed("3") != T.derive_seed(3)


def test_check_finite_flag():
    T.CHECK_FINITE = True
    try:
        with pytest.raises(ParameterError):
            T.Tensor([np.nan, 1.0])
    finally:
        T.CHECK_FINITE = False
    # with the flag off NaNs pass through untouched
    t = T.Tensor([np.nan, 1.0])
    assert np.isnan(t.data[0])
