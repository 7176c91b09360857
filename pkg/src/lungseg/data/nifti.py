"""Minimal single-file NIfTI-1 reader (.nii and gzip-compressed .nii.gz).

Only the fields needed to decode the voxel array are read, at their fixed
header offsets:

=========  ======  =====
field      offset  type
=========  ======  =====
sizeof_hdr 0       i32 (must be 348)
dim[8]     40      i16
datatype   70      i16
bitpix     72      i16
vox_offset 108     f32
scl_slope  112     f32
scl_inter  116     f32
magic      344     4 bytes, "n+1\\0"
=========  ======  =====

Detached header pairs ("ni1\\0"), NIfTI-2 and orientation handling are not
supported.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

HEADER_SIZE = 348
MIN_FILE_SIZE = 352

# datatype code -> numpy dtype (without byte order)
DATATYPES = {2: "u1", 4: "i2", 16: "f4", 64: "f8"}


class NiftiError(ValueError):
    pass


class NiftiMagicError(NiftiError):
    pass


class NiftiDatatypeError(NiftiError):
    pass


class NiftiTruncatedError(NiftiError):
    pass


@dataclass
class Volume:
    data: np.ndarray  # float32, shape (X, Y, Z), scaling applied
    datatype: int
    scl_slope: float
    scl_inter: float
    path: str = ""

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)


def _endianness(raw: bytes) -> str:
    if struct.unpack("<i", raw[:4])[0] == HEADER_SIZE:
        return "<"
    if struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
        return ">"
    raise NiftiError(f"sizeof_hdr is {struct.unpack('<i', raw[:4])[0]}, expected 348")


def parse_nifti(raw: bytes, path: str = "") -> Volume:
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiTruncatedError(f"{path}: corrupt gzip stream ({exc})") from exc
    if len(raw) < MIN_FILE_SIZE:
        raise NiftiTruncatedError(f"{path}: file is {len(raw)} bytes, a NIfTI-1 header needs {MIN_FILE_SIZE}")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise NiftiMagicError(f"{path}: detached header/image pairs (magic 'ni1') are not supported")
    if magic != b"n+1\x00":
        raise NiftiMagicError(f"{path}: bad NIfTI-1 magic {magic!r}")
    e = _endianness(raw)

    dim = struct.unpack(e + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(e + "2h", raw[70:74])
    vox_offset, slope, inter = struct.unpack(e + "3f", raw[108:120])
    if datatype not in DATATYPES:
        raise NiftiDatatypeError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(e + DATATYPES[datatype])
    if bitpix != dtype.itemsize * 8:
        raise NiftiError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")

    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: dim[0] = {ndim} out of range")
    shape = [max(int(d), 1) for d in dim[1 : ndim + 1]]
    if any(s > 1 for s in shape[3:]):
        raise NiftiError(f"{path}: only 3-D volumes are supported, got dims {shape}")
    shape = (shape + [1, 1, 1])[:3]

    offset = int(vox_offset)
    count = shape[0] * shape[1] * shape[2]
    need = offset + count * dtype.itemsize
    if len(raw) < need:
        raise NiftiTruncatedError(f"{path}: payload truncated, need {need} bytes, have {len(raw)}")
    voxels = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape, order="F")

    slope_eff = 1.0 if slope == 0 or not np.isfinite(slope) else float(slope)
    inter_eff = float(inter) if np.isfinite(inter) else 0.0
    data = voxels.astype(np.float64) * slope_eff + inter_eff
    return Volume(np.ascontiguousarray(data, dtype=np.float32), datatype, float(slope), float(inter), path)


def read_nifti(path: Union[str, Path]) -> Volume:
    return parse_nifti(Path(path).read_bytes(), str(path))


def build_nifti(data: np.ndarray, datatype: int = 16, slope: float = 1.0, inter: float = 0.0,
                vox_offset: int = 352) -> bytes:
    """Serialise a 3-D array as a single-file NIfTI-1 image (used for fixtures and tests)."""
    dtype = np.dtype("<" + DATATYPES[datatype])
    hdr = bytearray(vox_offset)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dims = list(data.shape) + [1] * (3 - data.ndim)
    struct.pack_into("<8h", hdr, 40, 3, *dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1, 1, 1, 1, 0, 0, 0, 0)
    struct.pack_into("<3f", hdr, 108, float(vox_offset), slope, inter)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + np.asarray(data).astype(dtype).tobytes(order="F")
