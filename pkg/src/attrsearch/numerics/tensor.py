"""Dense float tensors: the value type every other module computes with.

Model math runs in 32-bit floats, row-major. 64-bit tensors exist solely so
the finite-difference oracle can evaluate the same graphs without rounding
noise; nothing in the trained model is ever stored at 64 bits.
"""

from __future__ import annotations

import itertools

import numpy as np

_ALLOWED_DTYPES = (np.float32, np.float64)
_uid_counter = itertools.count(1)


class NumericsError(Exception):
    """Base for all math-layer failures."""


class NonFiniteError(NumericsError):
    """A tensor holds NaN or Inf, which the contract forbids."""


class DimensionError(NumericsError):
    """Operand shapes are incompatible with the requested operation."""


class UsageError(NumericsError):
    """The API was called out of contract (bad label, loss off tape, ...)."""


class Tensor:
    """Immutable dense array of floats with an identity usable as a tape key.

    The backing buffer is C-contiguous (row-major) and marked read-only, so
    tensors are safe to share across threads once constructed. Construction
    validates finiteness; a NaN/Inf anywhere raises ``NonFiniteError``.
    """

    __slots__ = ("array", "uid")

    def __init__(self, values, dtype=np.float32):
        if dtype not in _ALLOWED_DTYPES:
            raise UsageError(f"unsupported dtype {dtype!r}; use float32 or float64")
        arr = np.array(values, dtype=dtype, order="C", copy=True)
        _validate_finite(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)
        object.__setattr__(self, "uid", next(_uid_counter))

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path: takes ownership of a freshly allocated array.
        if arr.dtype.type not in _ALLOWED_DTYPES:
            raise UsageError(f"unsupported dtype {arr.dtype!r}")
        arr = np.ascontiguousarray(arr)
        _validate_finite(arr)
        arr.flags.writeable = False
        self = object.__new__(cls)
        object.__setattr__(self, "array", arr)
        object.__setattr__(self, "uid", next(_uid_counter))
        return self

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def dtype(self):
        return self.array.dtype

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the values (read-only)."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() on tensor of size {self.size}")
        return float(self.array.reshape(-1)[0])

    def tolist(self):
        return self.array.tolist()

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.array, dtype=dtype)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


def _validate_finite(arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError("tensor contains NaN or Inf")


def as_tensor(values, dtype=np.float32) -> Tensor:
    """Coerce array-likes to Tensor; passes Tensors through untouched."""
    if isinstance(values, Tensor):
        return values
    return Tensor(values, dtype=dtype)
