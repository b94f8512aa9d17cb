"""Dense 4-D float32 tensors in (n, c, h, w) row-major layout.

Every feature map in the engine is a numpy float32 array of rank 4.
This module owns shape checking, the elementwise primitives shared by
all kernels, and the raw blob format used for test fixtures.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, NamedTuple, Sequence

import numpy as np

# Element counts are checked against this bound so downstream byte
# arithmetic (4 bytes/element) can never wrap a 64-bit size.
_MAX_ELEMENTS = (1 << 62) - 1


class Shape(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def elements(self) -> int:
        return self.n * self.c * self.h * self.w


def check_shape(shape: Sequence[int]) -> Shape:
    """Validate (n, c, h, w) dims: non-negative ints, no element overflow."""
    if len(shape) != 4:
        raise ValueError(f"tensor shape must have 4 dims, got {tuple(shape)}")
    dims = []
    for d in shape:
        if int(d) != d or d < 0:
            raise ValueError(f"tensor dims must be non-negative integers, got {tuple(shape)}")
        dims.append(int(d))
    s = Shape(*dims)
    if s.elements > _MAX_ELEMENTS:
        raise ValueError(f"tensor of shape {s} exceeds the supported element count")
    return s


def as_tensor(x) -> np.ndarray:
    """Coerce to a contiguous float32 rank-4 array, validating the shape."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    check_shape(arr.shape)
    return arr


def zeros(n: int, c: int, h: int, w: int) -> np.ndarray:
    return np.zeros(check_shape((n, c, h, w)), dtype=np.float32)


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum of two tensors of identical shape (skip connections)."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"elementwise_add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(as_tensor(x), np.float32(0.0))


def softmax_channels(x: np.ndarray, group: int) -> np.ndarray:
    """Softmax over consecutive channel groups of size `group`.

    Each spatial location holds c/group independent distributions.  Max
    subtraction keeps large logits from overflowing in float32.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if group < 1 or c % group != 0:
        raise ValueError(f"channel count {c} not divisible by group size {group}")
    g = x.reshape(n, c // group, group, h, w)
    g = g - g.max(axis=2, keepdims=True)
    e = np.exp(g)
    out = e / e.sum(axis=2, keepdims=True)
    return out.reshape(n, c, h, w).astype(np.float32)


def concat_channels(xs: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate along the channel axis; all inputs share n, h, w."""
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    ts = [as_tensor(x) for x in xs]
    ref = ts[0].shape
    for t in ts[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(
                f"concat_channels spatial mismatch: {ref} vs {t.shape}"
            )
    return np.concatenate(ts, axis=1)


def slice_channels(x: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Contiguous channel slice [start, stop); the inverse of concat."""
    x = as_tensor(x)
    if not (0 <= start <= stop <= x.shape[1]):
        raise ValueError(f"channel slice [{start}:{stop}) out of range for {x.shape}")
    return np.ascontiguousarray(x[:, start:stop])


# ---------------------------------------------------------------------------
# Raw blob format: four little-endian u32 dims (n, c, h, w) followed by
# n*c*h*w little-endian float32 values.  Used for fixtures and CLI dumps.

def write_blob(x: np.ndarray, f: BinaryIO | str) -> None:
    x = as_tensor(x)
    if isinstance(f, str):
        with open(f, "wb") as fh:
            write_blob(x, fh)
        return
    f.write(struct.pack("<4I", *x.shape))
    f.write(x.astype("<f4").tobytes())


def read_blob(f: BinaryIO | str) -> np.ndarray:
    if isinstance(f, str):
        with open(f, "rb") as fh:
            return read_blob(fh)
    header = f.read(16)
    if len(header) != 16:
        raise ValueError("tensor blob truncated: header shorter than 16 bytes")
    shape = check_shape(struct.unpack("<4I", header))
    payload = f.read(4 * shape.elements)
    if len(payload) != 4 * shape.elements:
        raise ValueError(f"tensor blob truncated: expected {4 * shape.elements} payload bytes")
    if f.read(1):
        raise ValueError("tensor blob has trailing bytes")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return data.reshape(shape)
