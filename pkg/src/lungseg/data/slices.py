"""2-D slice samples: resizing, intensity windowing and volume slicing."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace
from typing import List, Tuple

import numpy as np

from .nifti import Volume

log = logging.getLogger(__name__)

SLICE_SIZE = 256
HU_WINDOW = (-1000.0, 400.0)


class Origin(enum.IntEnum):
    REAL = 0
    CLASSICAL = 1
    GAN = 2


@dataclass(eq=False)
class SliceSample:
    """One axial slice: image (1,H,W) float32 in [0,1], binary uint8 masks of the same shape."""

    image: np.ndarray
    lung_mask: np.ndarray
    infection_mask: np.ndarray
    volume_id: int
    slice_index: int
    origin: Origin = Origin.REAL

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.lung_mask = np.asarray(self.lung_mask, dtype=np.uint8)
        self.infection_mask = np.asarray(self.infection_mask, dtype=np.uint8)
        self.origin = Origin(self.origin)
        shape = self.image.shape
        if len(shape) != 3 or shape[0] != 1:
            raise ValueError(f"slice image must be (1, H, W), got {shape}")
        for name in ("lung_mask", "infection_mask"):
            m = getattr(self, name)
            if m.shape != shape:
                raise ValueError(f"{name} shape {m.shape} does not match image {shape}")
            if m.size and m.max() > 1:
                raise ValueError(f"{name} must be binary")

    @property
    def infected(self) -> bool:
        return bool(self.infection_mask.any())

    @property
    def infection_area(self) -> int:
        return int(self.infection_mask.sum())

    def outside_lung_pixels(self) -> int:
        return int((self.infection_mask & (1 - self.lung_mask)).sum())

    def key(self) -> Tuple[int, int, int]:
        return (self.volume_id, self.slice_index, int(self.origin))

    def with_(self, **changes) -> "SliceSample":
        return replace(self, **changes)

    def same_as(self, other: "SliceSample") -> bool:
        """Bit-exact equality on every field."""
        return (
            self.key() == other.key()
            and self.image.tobytes() == other.image.tobytes()
            and self.image.shape == other.image.shape
            and self.lung_mask.tobytes() == other.lung_mask.tobytes()
            and self.infection_mask.tobytes() == other.infection_mask.tobytes()
        )


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    # half-pixel centres: output pixel i samples input coordinate (i + 0.5) * n_in / n_out - 0.5
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5


def resize_image(img: np.ndarray, size: int = SLICE_SIZE) -> np.ndarray:
    """Bilinear resize of a 2-D array to size x size with half-pixel-centred sampling."""
    img = np.asarray(img)
    h, w = img.shape
    if h <= 0 or w <= 0:
        raise ValueError(f"cannot resize empty image {img.shape}")
    if (h, w) == (size, size):
        return img.astype(np.float32, copy=True)
    src = img.astype(np.float64)

    def axis_weights(n_out, n_in):
        c = np.clip(_source_coords(n_out, n_in), 0, n_in - 1)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = axis_weights(size, h)
    x0, x1, fx = axis_weights(size, w)
    rows = src[y0] * (1 - fy)[:, None] + src[y1] * fy[:, None]
    out = rows[:, x0] * (1 - fx)[None, :] + rows[:, x1] * fx[None, :]
    return out.astype(np.float32)


def resize_mask(mask: np.ndarray, size: int = SLICE_SIZE) -> np.ndarray:
    """Nearest-neighbour resize; binary input stays binary."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if h <= 0 or w <= 0:
        raise ValueError(f"cannot resize empty mask {mask.shape}")
    ys = np.minimum(np.floor((np.arange(size) + 0.5) * h / size).astype(np.int64), h - 1)
    xs = np.minimum(np.floor((np.arange(size) + 0.5) * w / size).astype(np.int64), w - 1)
    return mask[ys[:, None], xs[None, :]].copy()


def normalize_hu(img: np.ndarray, window: Tuple[float, float] = HU_WINDOW, auto: bool = True) -> np.ndarray:
    """Clamp to the HU window and map it affinely onto [0, 1].

    With ``auto`` set, data already inside [0, 1] is passed through unchanged.
    """
    lo, hi = window
    if lo >= hi:
        raise ValueError(f"degenerate intensity window ({lo}, {hi})")
    img = np.asarray(img, dtype=np.float64)
    if auto and img.size and img.min() >= 0 and img.max() <= 1:
        return img.astype(np.float32)
    return ((np.clip(img, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def volume_to_slices(
    ct: Volume,
    lung: Volume,
    infection: Volume,
    volume_id: int = 0,
    size: int = SLICE_SIZE,
    window: Tuple[float, float] = HU_WINDOW,
) -> List[SliceSample]:
    """Cut three aligned volumes into axial slices.

    Slice ``z`` is ``data[:, :, z]`` transposed so rows run along Y.  Labels are
    binarised as ``value > 0``, which merges every lesion class into one mask.
    """
    for name, v in (("lung", lung), ("infection", infection)):
        if v.dims != ct.dims:
            raise ValueError(f"{name} volume dims {v.dims} do not match CT dims {ct.dims}")
    data = ct.data
    passthrough = data.size > 0 and float(data.min()) >= 0 and float(data.max()) <= 1
    out = []
    for z in range(ct.dims[2]):
        img = data[:, :, z].T
        img = img.astype(np.float32) if passthrough else normalize_hu(img, window, auto=False)
        sample = SliceSample(
            image=resize_image(img, size)[None],
            lung_mask=resize_mask((lung.data[:, :, z].T > 0).astype(np.uint8), size)[None],
            infection_mask=resize_mask((infection.data[:, :, z].T > 0).astype(np.uint8), size)[None],
            volume_id=volume_id,
            slice_index=z,
        )
        stray = sample.outside_lung_pixels()
        if stray:
            log.warning("volume %d slice %d: %d infection pixels outside the lung mask", volume_id, z, stray)
        out.append(sample)
    return out
