"""
Dense tensor values and reproducible random streams.

`Tensor` is an immutable float64 array with an explicit shape. Binary
operations accept identical shapes, or a right operand whose shape is a
suffix of the left operand's shape (the right operand is then tiled across
the leading axes).

`RngStream` wraps numpy's Philox bit generator. Philox is counter-based, so a
(seed, stream-id) pair names one fixed sequence on every platform, and streams
with distinct ids are independent. Trials derive their own stream ids, which
is why worker count never changes sampled values.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ShapeError

MASK64 = (1 << 64) - 1

Shape = tuple[int, ...]
Scalar = Union[int, float]


def _as_shape(shape: Union[int, Iterable[int]]) -> Shape:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    out = tuple(int(s) for s in shape)
    if any(s < 0 for s in out):
        raise ShapeError(f"Shape extents must be nonnegative, got {out}")
    return out


def _is_suffix(short: Shape, full: Shape) -> bool:
    if len(short) > len(full):
        return False
    return len(short) == 0 or full[len(full) - len(short):] == short


class Tensor:
    """Immutable dense float64 tensor."""

    __slots__ = ("_array",)

    def __init__(self, values, shape: Union[int, Iterable[int], None] = None):
        arr = np.array(values, dtype=np.float64)
        if shape is not None:
            target = _as_shape(shape)
            if arr.size != math.prod(target):
                raise ShapeError(
                    f"Cannot lay out {arr.size} values as shape {target} "
                    f"(needs {math.prod(target)})"
                )
            arr = arr.reshape(target)
        arr.setflags(write=False)
        self._array = arr

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt an array without copying. The caller must not keep a writable alias."""
        t = cls.__new__(cls)
        a = np.asarray(arr, dtype=np.float64)
        a.setflags(write=False)
        t._array = a
        return t

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls.wrap(np.zeros(_as_shape(shape)))

    @classmethod
    def ones(cls, shape) -> "Tensor":
        return cls.wrap(np.ones(_as_shape(shape)))

    @classmethod
    def full(cls, shape, value: float) -> "Tensor":
        return cls.wrap(np.full(_as_shape(shape), float(value)))

    @classmethod
    def scalar(cls, value: float) -> "Tensor":
        return cls.wrap(np.array(float(value)))

    @property
    def shape(self) -> Shape:
        return self._array.shape

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self._array.reshape(-1)

    @property
    def array(self) -> np.ndarray:
        return self._array

    def item(self) -> float:
        if self._array.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._array.reshape(-1)[0])

    def reshape(self, shape) -> "Tensor":
        return Tensor(self._array, shape)

    def tolist(self) -> list:
        return self._array.tolist()

    def equals(self, other: "Tensor") -> bool:
        """Bit-for-bit value equality (shape included)."""
        return self.shape == other.shape and np.array_equal(self._array, other._array)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self._array)))

    def _operand(self, other) -> np.ndarray:
        if isinstance(other, Tensor):
            _check_tiling(self.shape, other.shape)
            return other._array
        return np.float64(other)

    def __add__(self, other) -> "Tensor":
        return Tensor.wrap(self._array + self._operand(other))

    def __sub__(self, other) -> "Tensor":
        return Tensor.wrap(self._array - self._operand(other))

    def __mul__(self, other) -> "Tensor":
        return Tensor.wrap(self._array * self._operand(other))

    def __rmul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other.__mul__(self)
        return Tensor.wrap(np.float64(other) * self._array)

    def __truediv__(self, other: Scalar) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("Tensor division is only defined by a scalar")
        return Tensor.wrap(self._array / np.float64(other))

    def __neg__(self) -> "Tensor":
        return Tensor.wrap(-self._array)

    def __abs__(self) -> "Tensor":
        return Tensor.wrap(np.abs(self._array))

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._array
        return self._array.astype(dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self._array.tolist()!r})"


def _check_tiling(a: Shape, b: Shape) -> None:
    if a == b or _is_suffix(b, a):
        return
    raise ShapeError(f"Shape {b} is neither equal to nor a suffix of {a}")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """a ∘ b, tiling b across a's leading axes when b's shape is a suffix of a's."""
    _check_tiling(a.shape, b.shape)
    return Tensor.wrap(a.array * b.array)


def sign(a: Tensor) -> Tensor:
    # + 0.0 folds -0.0 into 0.0
    return Tensor.wrap(np.sign(a.array) + 0.0)


def l2_norm(a: Tensor) -> float:
    flat = a.array.reshape(-1)
    return float(math.sqrt(float(np.dot(flat, flat))))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("Cannot stack an empty sequence of tensors")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ShapeError(f"Cannot stack shapes {first} and {t.shape}")
    return Tensor.wrap(np.stack([t.array for t in tensors]))


def derive_seed(*words: int) -> int:
    """Hash a tuple of nonnegative integers into a 64-bit seed."""
    if not words:
        raise ValueError("derive_seed needs at least one word")
    ss = np.random.SeedSequence(entropy=int(words[0]) & MASK64, spawn_key=tuple(int(w) & MASK64 for w in words[1:]))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class RngStream:
    """A single-owner random stream named by (seed, stream_id)."""

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & MASK64
        self.stream_id = int(stream_id) & MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._generator = np.random.Generator(np.random.Philox(key=key))

    def substream(self, stream_id: int) -> "RngStream":
        """A fresh stream sharing this stream's seed."""
        return RngStream(self.seed, stream_id)

    def random(self, shape) -> np.ndarray:
        return self._generator.random(_as_shape(shape))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._generator.normal(0.0, scale, _as_shape(shape))

    def uniform_range(self, lo: float, hi: float, shape) -> np.ndarray:
        return self._generator.uniform(lo, hi, _as_shape(shape))

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def uniform(rng: RngStream, shape) -> Tensor:
    """I.i.d. U[0, 1) samples."""
    return Tensor.wrap(rng.random(shape))
