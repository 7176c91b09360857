"""Pixel confusion counts, the five overlap scores, and the slice-area rule."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

METRIC_NAMES = ("iou", "dice", "ppv", "sensitivity", "specificity")
METRIC_LABELS = {"iou": "IOU", "dice": "Dice", "ppv": "PPV", "sensitivity": "Sensitivity",
                 "specificity": "Specificity"}
AREA_THRESHOLD = 30


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Metrics:
    iou: float
    dice: float
    ppv: float
    sensitivity: float
    specificity: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def confusion(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"confusion: prediction shape {pred.shape} does not match ground truth {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num: int, den: int, errors: int) -> float:
    # an empty denominator means nothing to find and nothing found: correct unless errors exist
    if den == 0:
        return 1.0 if errors == 0 else 0.0
    return num / den


def metrics_from_counts(c: ConfusionCounts) -> Metrics:
    return Metrics(
        iou=_ratio(c.tp, c.tp + c.fp + c.fn, c.fp + c.fn),
        dice=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, c.fp + c.fn),
        ppv=_ratio(c.tp, c.tp + c.fp, c.fp),
        sensitivity=_ratio(c.tp, c.tp + c.fn, c.fn),
        specificity=_ratio(c.tn, c.tn + c.fp, c.fp),
    )


def postprocess(prob, bin_thresh: float = 0.5, area_thresh: int = AREA_THRESHOLD,
                per_component: bool = False) -> np.ndarray:
    """Binarise at ``bin_thresh`` and drop predictions smaller than ``area_thresh`` pixels.

    By default the rule is slice-level: a slice whose total foreground is under
    the threshold is declared non-infected.  ``per_component`` instead removes
    each 4-connected component under the threshold.
    """
    mask = np.asarray(prob) >= bin_thresh
    if per_component:
        labels, n = ndimage.label(mask, structure=_four_connected(mask.ndim))
        if n:
            sizes = np.bincount(labels.ravel())
            keep = sizes >= area_thresh
            keep[0] = False
            mask = keep[labels]
        return mask.astype(np.uint8)
    if np.count_nonzero(mask) < area_thresh:
        return np.zeros(mask.shape, dtype=np.uint8)
    return mask.astype(np.uint8)


def _four_connected(ndim: int) -> np.ndarray:
    # label() wants every axis of the structure to be 3 wide; leading axes
    # only get the centre plane so slices never connect to each other
    s = np.zeros((3,) * ndim, dtype=bool)
    s[(1,) * (ndim - 2)] = ndimage.generate_binary_structure(2, 1)
    return s


@dataclass
class EvalResult:
    metrics: Metrics
    counts: ConfusionCounts
    per_slice: List[dict]
    predictions: np.ndarray  # (N,1,H,W) uint8 masks after post-processing


def evaluate(
    predict: Union[Callable[[np.ndarray], np.ndarray], object],
    samples: Sequence,
    use_postprocess: bool = True,
    bin_thresh: float = 0.5,
    area_thresh: int = AREA_THRESHOLD,
    per_component: bool = False,
    batch_size: int = 8,
) -> EvalResult:
    """Score infection predictions against ground truth with one global confusion table.

    ``predict`` maps an (N,1,H,W) image batch to infection probabilities; a
    model exposing ``predict(images) -> (infection, lung)`` is accepted too.
    """
    if not samples:
        raise ValueError("evaluate: empty test set")
    fn = predict.predict if hasattr(predict, "predict") else predict
    total = ConfusionCounts()
    rows, preds = [], []
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        out = fn(np.stack([s.image for s in batch]))
        probs = out[0] if isinstance(out, tuple) else out
        for s, p in zip(batch, probs):
            if use_postprocess:
                mask = postprocess(p, bin_thresh, area_thresh, per_component)
            else:
                mask = (np.asarray(p) >= bin_thresh).astype(np.uint8)
            c = confusion(mask, s.infection_mask)
            total = total + c
            m = metrics_from_counts(c)
            rows.append({"volume_id": s.volume_id, "slice_index": s.slice_index,
                         "pred_area": int(mask.sum()), "gt_area": s.infection_area,
                         "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn, **m.as_dict()})
            preds.append(mask)
    return EvalResult(metrics_from_counts(total), total, rows, np.stack(preds))


def per_slice_average(rows: Sequence[dict]) -> Dict[str, float]:
    return {k: float(np.mean([r[k] for r in rows])) for k in METRIC_NAMES}


def aggregate_folds(per_fold: Sequence[Metrics]) -> Dict[str, tuple]:
    """Mean and population standard deviation of each metric across folds."""
    if not per_fold:
        raise ValueError("aggregate_folds: no folds")
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(m, name) for m in per_fold], dtype=np.float64)
        out[name] = (float(vals.mean()), float(vals.std()))
    return out


@dataclass
class AreaStats:
    fraction_above: Optional[float]  # None when no slice is infected
    infected_slices: int
    total_slices: int
    threshold: int
    histogram: List[int]
    bin_edges: List[float]

    @property
    def infected_fraction(self) -> Optional[float]:
        return self.infected_slices / self.total_slices if self.total_slices else None


def area_stats(samples: Sequence, threshold: int = AREA_THRESHOLD, bins: int = 20) -> AreaStats:
    """Share of infected slices whose ground-truth infection area exceeds ``threshold`` pixels."""
    areas = np.array([s.infection_area for s in samples], dtype=np.int64)
    infected = areas[areas > 0]
    if infected.size == 0:
        return AreaStats(None, 0, len(areas), threshold, [], [])
    hist, edges = np.histogram(np.log10(infected), bins=bins)
    return AreaStats(
        fraction_above=float(np.count_nonzero(infected > threshold) / infected.size),
        infected_slices=int(infected.size),
        total_slices=len(areas),
        threshold=threshold,
        histogram=hist.tolist(),
        bin_edges=[float(10**e) for e in edges],
    )

