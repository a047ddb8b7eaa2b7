"""Dense float tensors, shape algebra and deterministic initialization.

Conventions used throughout the package:

* activations are laid out batch-first, channels-last: (N, H, W, C)
* convolution kernels are (kh, kw, in_channels, out_channels)
* values are float32; verification code may build float64 tensors, and
  every operation preserves the dtype it is given
* reductions (sums, means, losses) accumulate in float64 before casting
  back, so the finite-difference checks are not drowned in rounding noise

Tensors are treated as immutable values once constructed.  The optimizer
is the single writer that updates parameter buffers in place; nothing
else mutates a tensor after it leaves its constructor.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ParameterError, ShapeError

DEFAULT_DTYPE = np.float32

# Generous ceiling; anything past this is a bookkeeping bug, not a tensor.
MAX_ELEMENTS = 1 << 40

# When True, every Tensor constructed is scanned for NaN/Inf.  Too slow to
# leave on in training loops; handy when chasing a numerical bug.
CHECK_FINITE = False


def validate_shape(dims) -> tuple[int, ...]:
    """Check that every extent is a positive integer and the element count
    cannot overflow; return the shape as a plain tuple."""
    shape = tuple(int(d) for d in dims)
    count = 1
    for d in shape:
        if d < 1:
            raise ShapeError(f"shape {shape} has a non-positive extent")
        count *= d
        if count > MAX_ELEMENTS:
            raise ShapeError(f"shape {shape} exceeds {MAX_ELEMENTS} elements")
    return shape


def element_count(shape) -> int:
    count = 1
    for d in validate_shape(shape):
        count *= d
    return count


class Tensor:
    """A dense n-dimensional float array with validated shape.

    Wraps a contiguous row-major numpy buffer.  Scalars are allowed as
    zero-dimensional tensors (shape ``()``).
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim > 0:
            # keep 0-d scalars 0-d; ascontiguousarray would promote them
            arr = np.ascontiguousarray(arr)
            validate_shape(arr.shape)
        if CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise ParameterError("tensor contains NaN or Inf")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    """All-zero tensor of the given shape."""
    return Tensor(np.zeros(validate_shape(shape), dtype=dtype))


def he_init(shape, fan_in: int, seed: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """Zero-mean Gaussian with variance 2/fan_in, the standard scaling for
    deep ReLU stacks.  Bit-identical for identical seeds."""
    shape = validate_shape(shape)
    if fan_in < 1:
        raise ParameterError(f"fan_in must be >= 1, got {fan_in}")
    rng = np.random.Generator(np.random.PCG64(seed))
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise sum; operands must have identical shapes (no broadcasting)."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Tensor(a.data + b.data)


def scale(a: Tensor, factor: float) -> Tensor:
    """Pointwise multiplication by a scalar."""
    return Tensor(a.data * a.dtype.type(factor))


def relu(a: Tensor) -> Tensor:
    """max(x, 0) applied pointwise."""
    return Tensor(np.maximum(a.data, 0))


def ravel_index(index, shape) -> int:
    """Row-major flat offset of a multi-index."""
    shape = validate_shape(shape)
    if len(index) != len(shape):
        raise ShapeError(f"index {index} does not match rank of {shape}")
    flat = 0
    for i, d in zip(index, shape):
        if not 0 <= i < d:
            raise ShapeError(f"index {index} out of bounds for {shape}")
        flat = flat * d + i
    return flat


def unravel_index(flat: int, shape) -> tuple[int, ...]:
    """Inverse of :func:`ravel_index`."""
    shape = validate_shape(shape)
    if not 0 <= flat < element_count(shape):
        raise ShapeError(f"flat index {flat} out of bounds for {shape}")
    out = []
    for d in reversed(shape):
        out.append(flat % d)
        flat //= d
    return tuple(reversed(out))


def derive_seed(*parts) -> int:
    """Fold an arbitrary tuple of ints/strings into a stable 64-bit seed.

    Used to give every parameter, subject and augmentation draw its own
    reproducible stream: same parts, same seed, on any platform.
    """
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little")
