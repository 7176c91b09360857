from .metrics import (
    AreaStats,
    ConfusionCounts,
    EvalResult,
    Metrics,
    aggregate_folds,
    area_stats,
    confusion,
    evaluate,
    metrics_from_counts,
    per_slice_average,
    postprocess,
)
from .report import emit_report, read_metrics_csv, write_metrics_csv

__all__ = [
    "AreaStats",
    "ConfusionCounts",
    "EvalResult",
    "Metrics",
    "aggregate_folds",
    "area_stats",
    "confusion",
    "evaluate",
    "metrics_from_counts",
    "per_slice_average",
    "postprocess",
    "emit_report",
    "read_metrics_csv",
    "write_metrics_csv",
]
