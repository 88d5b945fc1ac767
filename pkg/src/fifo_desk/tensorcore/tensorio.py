"""Raw tensor file format.

Layout: 8-byte magic ``FGTEN01\\n``, little-endian u32 rank, rank little-endian
u64 extents, then the row-major little-endian float64 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike

from fifo_desk.errors import DatasetIOError
from fifo_desk.tensorcore.tensor import Array, Tensor

MAGIC = b"FGTEN01\n"


def encode_tensor(values: Tensor | ArrayLike) -> bytes:
    """Serialize an array or tensor to the raw tensor format."""
    data = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    header = MAGIC + struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}Q", *data.shape)
    return header + np.ascontiguousarray(data, dtype="<f8").tobytes()


def decode_tensor(payload: bytes) -> Array:
    """Parse the raw tensor format.

    Raises:
        DatasetIOError: If the magic, header or payload length is wrong
    """
    if payload[: len(MAGIC)] != MAGIC:
        msg = "not a tensor file: bad magic"
        raise DatasetIOError(msg)
    offset = len(MAGIC)
    if len(payload) < offset + 4:
        msg = "tensor file truncated in header"
        raise DatasetIOError(msg)
    (rank,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    if len(payload) < offset + 8 * rank:
        msg = "tensor file truncated in extents"
        raise DatasetIOError(msg)
    shape = struct.unpack_from(f"<{rank}Q", payload, offset)
    offset += 8 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(payload) != offset + 8 * count:
        msg = f"tensor payload holds {len(payload) - offset} bytes, expected {8 * count}"
        raise DatasetIOError(msg)
    values = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
    return values.astype(np.float64).reshape(shape)


def save_tensor(path: Path, values: Tensor | ArrayLike) -> None:
    """Write a tensor file, creating parent directories.

    Raises:
        DatasetIOError: If the file cannot be written
    """
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_tensor(values))
    except OSError as e:
        msg = f"cannot write tensor file {path}: {e}"
        raise DatasetIOError(msg) from e


def load_tensor(path: Path) -> Array:
    """Read a tensor file.

    Raises:
        DatasetIOError: If the file is missing or malformed
    """
    try:
        payload = path.read_bytes()
    except OSError as e:
        msg = f"cannot read tensor file {path}: {e}"
        raise DatasetIOError(msg) from e
    return decode_tensor(payload)
