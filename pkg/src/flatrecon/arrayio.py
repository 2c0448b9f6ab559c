"""FLA1 binary array files: b"FLA1", u32 rank, u32 extents, f64 payload (all little-endian)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FLA1"


class FormatError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError("bad magic, not an FLA1 array")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    off = 8 + 4 * rank
    n = int(np.prod(dims)) if rank else 1
    if len(buf) - off != 8 * n:
        raise FormatError(f"payload holds {len(buf) - off} bytes, expected {8 * n}")
    return np.frombuffer(buf, dtype="<f8", offset=off).reshape(dims).astype(np.float64)


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def save_complex(path, z: np.ndarray) -> None:
    """Complex grids are stored as a leading axis of 2 (real, imaginary)."""
    save(path, np.stack([z.real, z.imag]))


def load_complex(path) -> np.ndarray:
    a = load(path)
    if a.shape[0] != 2:
        raise FormatError("complex FLA1 arrays need a leading axis of 2")
    return a[0] + 1j * a[1]
