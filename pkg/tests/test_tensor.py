import numpy as np
import pytest

from attrsearch.numerics import NonFiniteError, Tensor, UsageError


def test_shape_and_data_are_consistent():
    t = Tensor(np.arange(24, dtype=np.float32).reshape(2, 3, 4))
    assert t.shape == (2, 3, 4)
    assert t.size == 24
    assert int(np.prod(t.shape)) == len(t.data)
    # row-major: data walks the last axis fastest
    assert t.data[1] == t.array[0, 0, 1]
    assert t.data[4] == t.array[0, 1, 0]


def test_default_dtype_is_float32():
    t = Tensor([1.0, 2.0])
    assert t.dtype == np.float32
    t64 = Tensor([1.0, 2.0], dtype=np.float64)
    assert t64.dtype == np.float64


def test_nan_and_inf_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_immutable_buffer_and_attributes():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.array[0] = 9.0
    with pytest.raises(AttributeError):
        t.array = np.zeros(2)


def test_source_array_not_aliased():
    src = np.ones(3, dtype=np.float32)
    t = Tensor(src)
    src[0] = 7.0
    assert t.array[0] == 1.0
    assert src.flags.writeable


def test_item_requires_scalar():
    assert Tensor([3.5]).item() == pytest.approx(3.5)
    with pytest.raises(UsageError):
        Tensor([1.0, 2.0]).item()


def test_unsupported_dtype_rejected():
    with pytest.raises(UsageError):
        Tensor([1, 2], dtype=np.int32)
