"""Detection metrics, significance testing, and report assembly."""

from .metrics import (
    Detection,
    GroundTruth,
    MatchResult,
    MapResult,
    PrecisionRecall,
    average_precision,
    iou,
    map50,
    map50_95,
    match_detections,
    mean_average_precision,
    precision_recall,
)
from .stats import ReplicationTable, tukey_hsd_cld
from .report import REPORT_COLUMNS, build_report, evaluate_detections

__all__ = [
    "Detection",
    "GroundTruth",
    "MatchResult",
    "MapResult",
    "PrecisionRecall",
    "average_precision",
    "iou",
    "map50",
    "map50_95",
    "match_detections",
    "mean_average_precision",
    "precision_recall",
    "ReplicationTable",
    "tukey_hsd_cld",
    "REPORT_COLUMNS",
    "build_report",
    "evaluate_detections",
]
