"""Weight store and the binary weight container.

Container layout (all little-endian):
  magic "ERFD" | format version u32 | tensor count u32
  per tensor: name length u16 | name bytes (UTF-8) | rank u8 |
              dims (rank x u32) | payload (prod(dims) float32)
  optional trailing section: "CKSM" | one u32 CRC32 per tensor payload,
              in tensor order
Anything after that is forbidden.
"""

from __future__ import annotations

import struct
import zlib
from typing import BinaryIO, Mapping

import numpy as np

from .graph import ModelGraph

MAGIC = b"ERFD"
CHECKSUM_MAGIC = b"CKSM"
FORMAT_VERSION = 1
MAX_RANK = 4

WeightStore = dict  # ordered name -> float32 ndarray (rank <= 4)


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class TruncatedContainerError(ContainerError):
    pass


class DuplicateTensorError(ContainerError):
    pass


class PayloadLengthError(ContainerError):
    pass


class TrailingBytesError(ContainerError):
    pass


def _check_entry(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim and not arr.flags.c_contiguous:  # ascontiguousarray would
        arr = np.ascontiguousarray(arr)          # promote 0-d arrays to 1-d
    if arr.ndim > MAX_RANK:
        raise ContainerError(f"tensor {name!r} has rank {arr.ndim} > {MAX_RANK}")
    if len(name.encode("utf-8")) > 0xFFFF:
        raise ContainerError(f"tensor name too long: {name[:40]!r}...")
    return arr


def save_weights(store: Mapping[str, np.ndarray], f: BinaryIO | str,
                 checksums: bool = False) -> None:
    if isinstance(f, str):
        with open(f, "wb") as fh:
            save_weights(store, fh, checksums=checksums)
        return
    entries = [(name, _check_entry(name, arr)) for name, arr in store.items()]
    f.write(MAGIC)
    f.write(struct.pack("<II", FORMAT_VERSION, len(entries)))
    crcs = []
    for name, arr in entries:
        nb = name.encode("utf-8")
        payload = arr.astype("<f4").tobytes()
        f.write(struct.pack("<H", len(nb)))
        f.write(nb)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(payload)
        crcs.append(zlib.crc32(payload) & 0xFFFFFFFF)
    if checksums:
        f.write(CHECKSUM_MAGIC)
        f.write(struct.pack(f"<{len(crcs)}I", *crcs))


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedContainerError(f"container truncated while reading {what}")
    return data


def _load(f: BinaryIO, verify_checksums: bool):
    magic = f.read(4)
    if magic != MAGIC:
        raise BadMagicError(f"bad container magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    store: WeightStore = {}
    crcs = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
        name = _read_exact(f, name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(f, 1, f"rank of {name!r}"))
        if rank > MAX_RANK:
            raise ContainerError(f"tensor {name!r} has rank {rank} > {MAX_RANK}")
        dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"dims of {name!r}"))
        elements = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = _read_exact(f, 4 * elements, f"payload of {name!r}")
        if name in store:
            raise DuplicateTensorError(f"duplicate tensor name {name!r}")
        store[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
        crcs.append(zlib.crc32(payload) & 0xFFFFFFFF)
    trailer = f.read()
    mismatched: list[str] = []
    if trailer:
        if not trailer.startswith(CHECKSUM_MAGIC):
            raise TrailingBytesError(
                f"{len(trailer)} unexpected trailing bytes (first: {trailer[:4]!r})")
        body = trailer[len(CHECKSUM_MAGIC):]
        if len(body) != 4 * count:
            raise PayloadLengthError(
                f"checksum section holds {len(body) // 4} entries for {count} tensors")
        stored = struct.unpack(f"<{count}I", body)
        if verify_checksums:
            names = list(store)
            mismatched = [names[i] for i in range(count) if stored[i] != crcs[i]]
    return store, mismatched


def load_weights(f: BinaryIO | str) -> WeightStore:
    if isinstance(f, str):
        with open(f, "rb") as fh:
            return load_weights(fh)
    store, _ = _load(f, verify_checksums=False)
    return store


def audit_checksums(f: BinaryIO | str) -> list[str]:
    """Names of tensors whose payload CRC disagrees with the stored one.
    Empty when everything matches or no checksum section exists."""
    if isinstance(f, str):
        with open(f, "rb") as fh:
            return audit_checksums(fh)
    _, mismatched = _load(f, verify_checksums=True)
    return mismatched


def init_random_weights(graph: ModelGraph, seed: int = 0) -> WeightStore:
    """He-style random kernels, small random biases, unit fusion weights."""
    rng = np.random.default_rng(seed)
    store: WeightStore = {}
    for name, shape in graph.weight_shapes().items():
        if len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            store[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(np.float32)
        elif shape == (1,):
            store[name] = np.ones(1, dtype=np.float32)
        else:  # bias vectors
            store[name] = (0.1 * rng.normal(0.0, 1.0, shape)).astype(np.float32)
    return store
