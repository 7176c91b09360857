"""Parameter checkpoint container.

Layout (all integers little-endian)::

    b"SGCKPT01"                 8-byte magic
    u32  count
    count x {
        u16  name length, then the UTF-8 name
        u8   rank
        u32  dim  (rank times)
        f32  values, row-major (prod(dims) of them)
    }
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Union

import numpy as np

MAGIC = b"SGCKPT01"


class CheckpointError(ValueError):
    pass


def dumps(state: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[:8] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:8]!r}")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"checkpoint truncated at byte offset {pos} (need {n} more bytes)")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    state = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        state[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last parameter at offset {pos}")
    return state


def save_checkpoint(path: Union[str, Path], state: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(state))


def load_checkpoint(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())
