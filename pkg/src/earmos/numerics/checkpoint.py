"""Named-tensor checkpoint container.

Layout: magic ``APGW``, u32 version, u32 tensor count, then per tensor a u16
name length, the UTF-8 name, a u8 rank, u32 dims, and the row-major
little-endian f32 values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from earmos.errors import FormatError
from earmos.numerics.tensor import Tensor

MAGIC = b"APGW"
VERSION = 1


def save_checkpoint(params: dict, path) -> None:
    """Write a name -> Tensor/ndarray mapping; values are stored as f32."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name in sorted(params):
        value = params[name]
        arr = np.asarray(value.values if isinstance(value, Tensor) else value)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as name -> float64 ndarray."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", data, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if offset + 4 * n > len(data):
                raise FormatError("checkpoint truncated")
            values = np.frombuffer(data, dtype="<f4", count=n, offset=offset)
            offset += 4 * n
            out[name] = values.astype(np.float64).reshape(dims)
    except struct.error as exc:
        raise FormatError("checkpoint truncated") from exc
    return out
