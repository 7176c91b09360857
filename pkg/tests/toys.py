"""Synthetic slices for smoke training: bright blobs inside an elliptical lung field."""

import numpy as np

from lungseg.core.rng import make_rng
from lungseg.data.slices import Origin, SliceSample


def disk(size, cy, cx, r):
    yy, xx = np.mgrid[:size, :size]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)


def lung_field(size):
    yy, xx = np.mgrid[:size, :size]
    c = (size - 1) / 2
    return (((yy - c) / (0.42 * size)) ** 2 + ((xx - c) / (0.45 * size)) ** 2 <= 1).astype(np.uint8)


def blob_slices(n=8, size=32, seed=0, volume_id=0, empty_every=0):
    rng = make_rng(seed, "toy-blobs")
    lung = lung_field(size)
    out = []
    for i in range(n):
        inf = np.zeros((size, size), np.uint8)
        if not (empty_every and i % empty_every == empty_every - 1):
            r = int(rng.integers(size // 8, size // 5 + 1))
            cy, cx = rng.integers(size // 3, 2 * size // 3, size=2)
            inf = disk(size, cy, cx, r) & lung
        img = 0.15 + 0.25 * lung + 0.45 * inf + 0.05 * rng.random((size, size))
        out.append(SliceSample(img[None].astype(np.float32), lung[None].copy(), inf[None],
                               volume_id, i, Origin.REAL))
    return out


def textured_disks(n=16, size=32, seed=0):
    """Masks of random disks and the striped texture that fills them."""
    rng = make_rng(seed, "toy-disks")
    yy, xx = np.mgrid[:size, :size]
    masks, textures = [], []
    for _ in range(n):
        r = int(rng.integers(size // 6, size // 3))
        cy, cx = rng.integers(r, size - r, size=2)
        m = disk(size, cy, cx, r)
        tex = 0.5 + 0.3 * np.sin(0.8 * xx + 0.5 * yy) * 0.5 + 0.2 * ((yy - cy) ** 2 + (xx - cx) ** 2) / (r * r)
        masks.append(m[None])
        textures.append((tex * m)[None].astype(np.float32))
    return np.stack(masks), np.stack(textures)


def write_toy_volumes(root, n_volumes=5, size=32, depth=3, seed=0, gzip_every=2):
    """CT (in HU), lung and infection NIfTI files under root/ct, root/lung, root/infection."""
    import gzip
    from pathlib import Path

    from lungseg.data.nifti import build_nifti

    root = Path(root)
    for sub in ("ct", "lung", "infection"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for v in range(n_volumes):
        slices = blob_slices(depth, size, seed=seed + v, volume_id=v, empty_every=3)
        # volumes store slice z as data[:, :, z] with X along the first axis
        ct = np.stack([s.image[0].T for s in slices], axis=-1) * 1400.0 - 1000.0
        lung = np.stack([s.lung_mask[0].T for s in slices], axis=-1)
        inf = np.stack([s.infection_mask[0].T for s in slices], axis=-1) * (1 + v % 3)
        name = f"case_{v:03d}.nii" + (".gz" if gzip_every and v % gzip_every == 0 else "")
        for sub, data, dt in (("ct", ct, 4), ("lung", lung, 2), ("infection", inf, 2)):
            raw = build_nifti(np.round(data) if dt == 4 else data, datatype=dt)
            (root / sub / name).write_bytes(gzip.compress(raw, mtime=0) if name.endswith(".gz") else raw)
    return root
