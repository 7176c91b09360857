"""Slice-pack: a little-endian container of normalised 256x256 slices.

::

    b"SLPK0001"        8-byte magic
    u32 count
    count x {
        u32 volume_id
        u32 slice_index
        u8  origin (0 real, 1 classical mirror, 2 GAN synthetic)
        f32 image[256*256]        row-major
        u8  lung_mask[256*256]
        u8  infection_mask[256*256]
    }
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np

from .slices import SLICE_SIZE, Origin, SliceSample

MAGIC = b"SLPK0001"
PIXELS = SLICE_SIZE * SLICE_SIZE
RECORD_SIZE = 4 + 4 + 1 + 4 * PIXELS + 2 * PIXELS


class SlicePackError(ValueError):
    pass


def pack_bytes(samples: Sequence[SliceSample]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(samples)))
    for i, s in enumerate(samples):
        if s.image.shape != (1, SLICE_SIZE, SLICE_SIZE):
            raise SlicePackError(f"sample {i}: slice-pack stores {SLICE_SIZE}x{SLICE_SIZE} slices, got {s.image.shape}")
        buf.write(struct.pack("<IIB", s.volume_id, s.slice_index, int(s.origin)))
        buf.write(s.image.astype("<f4").tobytes())
        buf.write(s.lung_mask.astype(np.uint8).tobytes())
        buf.write(s.infection_mask.astype(np.uint8).tobytes())
    return buf.getvalue()


def unpack_bytes(blob: bytes) -> List[SliceSample]:
    if len(blob) < 12:
        raise SlicePackError(f"slice-pack truncated at byte offset {len(blob)} (header needs 12 bytes)")
    if blob[:8] != MAGIC:
        raise SlicePackError(f"bad slice-pack magic {blob[:8]!r} at byte offset 0")
    (count,) = struct.unpack_from("<I", blob, 8)
    shape = (1, SLICE_SIZE, SLICE_SIZE)
    out = []
    pos = 12
    for i in range(count):
        if pos + RECORD_SIZE > len(blob):
            raise SlicePackError(
                f"slice-pack truncated in sample {i} starting at byte offset {pos}: "
                f"need {RECORD_SIZE} bytes, {len(blob) - pos} remain"
            )
        vol, idx, origin = struct.unpack_from("<IIB", blob, pos)
        p = pos + 9
        image = np.frombuffer(blob, "<f4", PIXELS, p).reshape(shape).astype(np.float32)
        p += 4 * PIXELS
        lung = np.frombuffer(blob, np.uint8, PIXELS, p).reshape(shape).copy()
        p += PIXELS
        inf = np.frombuffer(blob, np.uint8, PIXELS, p).reshape(shape).copy()
        try:
            origin = Origin(origin)
        except ValueError:
            raise SlicePackError(f"sample {i} at byte offset {pos + 8}: unknown origin flag {origin}") from None
        out.append(SliceSample(image, lung, inf, vol, idx, origin))
        pos += RECORD_SIZE
    if pos != len(blob):
        raise SlicePackError(f"{len(blob) - pos} trailing bytes after the last sample at byte offset {pos}")
    return out


def write_slicepack(path: Union[str, Path], samples: Sequence[SliceSample]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(pack_bytes(samples))
    os.replace(tmp, path)


def read_slicepack(path: Union[str, Path]) -> List[SliceSample]:
    return unpack_bytes(Path(path).read_bytes())
