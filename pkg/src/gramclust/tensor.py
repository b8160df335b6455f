"""Dense float32 tensors, the GRTN binary format and seeded RNG streams.

Tensors are plain C-contiguous ``numpy.float32`` arrays. The on-disk layout
is::

    b"GRTN" | version:u16 | rank:u16 | dims:u64 * rank | data:f32 * prod(dims)

with every multi-byte field little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GRTN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHH")

_MASK64 = (1 << 64) - 1


class TensorFormatError(ValueError):
    """Base class for GRTN read failures. Carries the offending path."""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class BadMagicError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class SizeMismatchError(TensorFormatError):
    pass


class NonFiniteError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float32 array and reject NaN/Inf."""
    t = np.asarray(x, dtype=np.float32, order="C")  # ascontiguousarray would promote 0-d to 1-d
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor has non-finite entries")
    return t


def tensor_save(t, path) -> None:
    path = Path(path)
    t = as_tensor(t)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, t.ndim)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(dims)
            fh.write(t.astype("<f4", copy=False).tobytes(order="C"))
    except OSError as exc:
        raise OSError(f"cannot write tensor to {path}: {exc.strerror}") from exc


def tensor_load(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tensor from {path}: {exc.strerror}") from exc
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise BadMagicError(path, "bad magic (not a GRTN file)")
    _, version, rank = _HEADER.unpack_from(raw, 0)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(path, f"unsupported format version {version}")
    off = _HEADER.size
    if len(raw) < off + 8 * rank:
        raise TruncatedPayloadError(path, "truncated payload (header dims)")
    shape = struct.unpack_from(f"<{rank}Q", raw, off)
    off += 8 * rank
    count = int(np.prod(shape, dtype=np.uint64)) if rank else 1
    need = off + 4 * count
    if len(raw) < need:
        raise TruncatedPayloadError(path, f"truncated payload: expected {4 * count} data bytes, got {len(raw) - off}")
    if len(raw) > need:
        raise SizeMismatchError(path, f"size mismatch: {len(raw) - need} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(path, "non-finite entry in payload")
    return np.reshape(data.astype(np.float32), shape)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, *tags: int) -> int:
    """Child seed from a master seed and integer tags (stable across runs)."""
    h = splitmix64(seed & _MASK64)
    for tag in tags:
        h = splitmix64(h ^ (tag & _MASK64))
    return h


def seeded_rng(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Counter-based generator for the stream ``(seed, stream_id)``.

    Philox keyed by the 128-bit pair, so draws depend only on the pair and
    never on how many other streams were consumed first.
    """
    key = ((stream_id & _MASK64) << 64) | (seed & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))
