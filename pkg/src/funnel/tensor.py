"""Rank-4 float64 tensors in NCHW order, backed by numpy arrays.

A tensor here is simply a C-contiguous ``numpy.ndarray`` of dtype float64 with
four axes ``(n, c, h, w)``.  The helpers in this module enforce that contract
and provide the handful of elementwise ops and reductions the rest of the
package relies on.

Random numbers come from numpy's ``PCG64`` bit generator (PCG XSL RR 128/64)
wrapped in ``numpy.random.Generator``.  Normal samples use the generator's
ziggurat method.  Both are frozen by numpy's stream-compatibility policy for
``Generator``, so a given seed yields the same stream on every platform.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import FormatError, InvalidArgument, ShapeError

DTYPE = np.float64
MAGIC = b"FNK1"
_HEADER = struct.Struct("<4s4I")

Shape = tuple[int, int, int, int]


def make_rng(seed: int) -> np.random.Generator:
    """Return the package's deterministic generator for ``seed``."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def _check_shape(shape: Sequence[int]) -> Shape:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected a rank-4 (n, c, h, w) shape, got {shape}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}: every dimension must be >= 1")
    return shape  # type: ignore[return-value]


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if shape is not None:
        arr = arr.reshape(_check_shape(shape))
    elif arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 array, got ndim={arr.ndim}")
    return arr


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=DTYPE)


def zeros_like(a: np.ndarray) -> np.ndarray:
    return np.zeros_like(a, dtype=DTYPE)


def gaussian(shape: Sequence[int], mean: float, std: float,
             rng: np.random.Generator) -> np.ndarray:
    """I.i.d. normal samples ``mean + std * z`` drawn from ``rng``."""
    shape = _check_shape(shape)
    if not std >= 0:
        raise InvalidArgument(f"std must be >= 0, got {std}")
    z = rng.standard_normal(shape, dtype=DTYPE)
    return mean + std * z


def require_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} shape mismatch: {a.shape} vs {b.shape}")


def elementwise_max(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    require_same_shape(a, b)
    return np.maximum(a, b)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    require_same_shape(a, b)
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    require_same_shape(a, b)
    return a - b


def mul_scalar(a: np.ndarray, s: float) -> np.ndarray:
    return a * float(s)


def total(a: np.ndarray, axes: Iterable[int] | None = None):
    """Sum over ``axes`` (all axes when None); keeps reduced dims as size 1."""
    if axes is None:
        return float(np.sum(a))
    return np.sum(a, axis=tuple(axes), keepdims=True)


def mean(a: np.ndarray, axes: Iterable[int] | None = None):
    if axes is None:
        return float(np.mean(a))
    return np.mean(a, axis=tuple(axes), keepdims=True)


# -- serialization ---------------------------------------------------------

def write_tensor(f: BinaryIO, a: np.ndarray) -> None:
    a = as_tensor(a)
    f.write(_HEADER.pack(MAGIC, *a.shape))
    f.write(a.astype("<f8", copy=False).tobytes(order="C"))


def read_tensor(f: BinaryIO) -> np.ndarray:
    start = f.tell() if f.seekable() else 0
    head = f.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError("truncated tensor header", start + len(head))
    magic, n, c, h, w = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}", start)
    count = n * c * h * w
    body = f.read(8 * count)
    if len(body) < 8 * count:
        raise FormatError("truncated tensor data", start + _HEADER.size + len(body))
    return np.frombuffer(body, dtype="<f8").astype(DTYPE).reshape(n, c, h, w)


def to_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, a)
    return buf.getvalue()


def from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_tensor(path: str | Path, a: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(a))


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
