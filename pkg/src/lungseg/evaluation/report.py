"""Report emission: per-fold metrics CSV, JSON manifest, PNG overlays.

``metrics.csv`` mirrors the layout of a results table::

    metric,Fold 1,...,Fold k,Average±std
    IOU,0.734,...,0.71±0.07

Floats are written with ``repr`` so re-parsing yields identical values.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .metrics import METRIC_LABELS, METRIC_NAMES, Metrics, aggregate_folds

PM = "±"


def write_metrics_csv(path, per_fold: Sequence[Metrics]) -> None:
    agg = aggregate_folds(per_fold)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric"] + [f"Fold {i + 1}" for i in range(len(per_fold))] + [f"Average{PM}std"])
        for name in METRIC_NAMES:
            mean, std = agg[name]
            w.writerow([METRIC_LABELS[name]] + [repr(getattr(m, name)) for m in per_fold] + [f"{mean!r}{PM}{std!r}"])


def read_metrics_csv(path) -> Tuple[List[Metrics], Dict[str, Tuple[float, float]]]:
    labels = {v: k for k, v in METRIC_LABELS.items()}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    k = len(rows[0]) - 2
    cols: Dict[str, List[float]] = {}
    agg = {}
    for row in rows[1:]:
        name = labels[row[0]]
        cols[name] = [float(v) for v in row[1 : k + 1]]
        mean, std = row[k + 1].split(PM)
        agg[name] = (float(mean), float(std))
    per_fold = [Metrics(**{n: cols[n][i] for n in METRIC_NAMES}) for i in range(k)]
    return per_fold, agg


def mask_contour(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def overlay_rgb(image: np.ndarray, mask: np.ndarray, color=(255, 0, 0)) -> np.ndarray:
    """Grayscale slice as RGB with the mask outline painted in ``color``."""
    img = np.asarray(image).reshape(np.asarray(image).shape[-2:])
    gray = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    edge = mask_contour(np.asarray(mask).reshape(gray.shape))
    rgb[edge] = color
    return rgb


def write_overlay(path, image: np.ndarray, mask: np.ndarray) -> None:
    Image.fromarray(overlay_rgb(image, mask), mode="RGB").save(path, format="PNG", optimize=False)


def emit_report(
    out_dir,
    per_fold: Sequence[Metrics],
    manifest: Optional[dict] = None,
    overlays: Iterable[Tuple[str, np.ndarray, np.ndarray]] = (),
) -> Dict[str, Path]:
    """Write metrics.csv, report.json and overlays/<name>.png under ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"report directory {out} is not writable: {exc}") from exc

    csv_path = out / "metrics.csv"
    write_metrics_csv(csv_path, per_fold)
    agg = aggregate_folds(per_fold)
    doc = dict(manifest or {})
    doc["folds"] = [m.as_dict() for m in per_fold]
    doc["average"] = {k: {"mean": v[0], "std": v[1]} for k, v in agg.items()}
    json_path = out / "report.json"
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    paths = {"csv": csv_path, "json": json_path}
    overlays = list(overlays)
    if overlays:
        odir = out / "overlays"
        odir.mkdir(exist_ok=True)
        for name, image, mask in overlays:
            write_overlay(odir / f"{name}.png", image, mask)
        paths["overlays"] = odir
    return paths
