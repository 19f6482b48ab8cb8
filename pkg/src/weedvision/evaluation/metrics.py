"""Box matching, precision/recall, and average-precision computation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import EmptyInputError, ValidationError

IOU_SWEEP = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DEFAULT_CONF_THRESHOLD = 0.25
RECALL_GRID = np.arange(101, dtype=np.float64) / 100.0


def _check_corners(x1, y1, x2, y2):
    for name, v in (("x1", x1), ("y1", y1), ("x2", x2), ("y2", y2)):
        if not np.isfinite(v) or not 0.0 <= v <= 1.0:
            raise ValidationError(f"{name}={v} outside [0, 1]")
    if not x1 < x2:
        raise ValidationError(f"need x1 < x2, got {x1} >= {x2}")
    if not y1 < y2:
        raise ValidationError(f"need y1 < y2, got {y1} >= {y2}")


@dataclass(frozen=True)
class Detection:
    """One predicted box with normalized corner coordinates."""

    image_id: str
    class_id: int
    confidence: float
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not np.isfinite(self.confidence) or not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")
        if self.class_id < 0:
            raise ValidationError(f"class_id {self.class_id} must be >= 0")
        _check_corners(self.x1, self.y1, self.x2, self.y2)

    @property
    def corners(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "class_id": self.class_id,
            "confidence": self.confidence,
            "x1": self.x1,
            "y1": self.y1,
            "x2": self.x2,
            "y2": self.y2,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Detection":
        return cls(
            image_id=str(doc["image_id"]),
            class_id=int(doc["class_id"]),
            confidence=float(doc["confidence"]),
            x1=float(doc["x1"]),
            y1=float(doc["y1"]),
            x2=float(doc["x2"]),
            y2=float(doc["y2"]),
        )


@dataclass(frozen=True)
class GroundTruth:
    """One reference box with normalized corner coordinates."""

    image_id: str
    class_id: int
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValidationError(f"class_id {self.class_id} must be >= 0")
        _check_corners(self.x1, self.y1, self.x2, self.y2)

    @property
    def corners(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_center_box(cls, image_id: str, class_id: int, cx, cy, w, h) -> "GroundTruth":
        return cls(
            image_id=image_id,
            class_id=int(class_id),
            x1=max(0.0, float(cx) - float(w) / 2),
            y1=max(0.0, float(cy) - float(h) / 2),
            x2=min(1.0, float(cx) + float(w) / 2),
            y2=min(1.0, float(cy) + float(h) / 2),
        )


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection-over-union of two corner boxes; 0 when disjoint."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return float(inter / union)


@dataclass
class MatchResult:
    """Per-detection and per-truth matching flags for one image."""

    det_considered: np.ndarray
    det_is_tp: np.ndarray
    det_matched_gt: np.ndarray
    gt_matched: np.ndarray

    @property
    def tp(self) -> int:
        return int(self.det_is_tp.sum())

    @property
    def fp(self) -> int:
        return int((self.det_considered & ~self.det_is_tp).sum())

    @property
    def fn(self) -> int:
        return int((~self.gt_matched).sum())


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
) -> MatchResult:
    """Greedily match detections to same-class truths for one image.

    Detections are visited in descending confidence (ties broken by lower
    input index); each claims the unmatched same-class truth of highest
    IoU >= iou_threshold, ties broken by lower truth index.  Detections
    below conf_threshold are not considered.
    """
    n, m = len(dets), len(gts)
    considered = np.array([d.confidence >= conf_threshold for d in dets], dtype=bool)
    is_tp = np.zeros(n, dtype=bool)
    matched_gt = np.full(n, -1, dtype=np.int64)
    gt_matched = np.zeros(m, dtype=bool)
    if n == 0 or m == 0:
        return MatchResult(considered, is_tp, matched_gt, gt_matched)

    conf = np.array([d.confidence for d in dets], dtype=np.float64)
    order = np.lexsort((np.arange(n), -conf))
    for di in order:
        if not considered[di]:
            continue
        det = dets[di]
        best_iou = 0.0
        best_gi = -1
        for gi, gt in enumerate(gts):
            if gt_matched[gi] or gt.class_id != det.class_id:
                continue
            v = iou(det.corners, gt.corners)
            if v >= iou_threshold and v > best_iou:
                best_iou = v
                best_gi = gi
        if best_gi >= 0:
            is_tp[di] = True
            matched_gt[di] = best_gi
            gt_matched[best_gi] = True
    return MatchResult(considered, is_tp, matched_gt, gt_matched)


@dataclass(frozen=True)
class PrecisionRecall:
    """Percent precision/recall with zero-denominator flags."""

    precision: float
    recall: float
    undefined_precision: bool = False
    undefined_recall: bool = False


def precision_recall(flags: Sequence[bool], n_gt: int) -> PrecisionRecall:
    """Percent precision and recall from per-detection TP flags.

    flags covers the detections that passed the confidence threshold; a
    zero denominator reports 0.0 with the corresponding flag set.
    """
    tp = int(np.sum(np.asarray(flags, dtype=bool))) if len(flags) else 0
    fp = len(flags) - tp
    fn = n_gt - tp
    if fn < 0:
        raise ValidationError(f"{tp} true positives exceed {n_gt} ground truths")
    undef_p = (tp + fp) == 0
    undef_r = (tp + fn) == 0
    precision = 0.0 if undef_p else 100.0 * tp / (tp + fp)
    recall = 0.0 if undef_r else 100.0 * tp / (tp + fn)
    return PrecisionRecall(precision, recall, undef_p, undef_r)


def _group_by_image(items) -> Dict[str, list]:
    groups: Dict[str, list] = {}
    for it in items:
        groups.setdefault(it.image_id, []).append(it)
    return groups


def average_precision(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
) -> float:
    """101-point interpolated AP for a single class over many images.

    All detections participate regardless of confidence; the PR curve is
    swept over the full confidence range and its precision envelope is
    sampled at recalls {0.00, 0.01, ..., 1.00}.
    """
    n_gt = len(gts)
    if n_gt == 0:
        raise EmptyInputError("average precision undefined without ground truths")
    if not dets:
        return 0.0

    gt_groups = _group_by_image(gts)
    det_groups = _group_by_image(dets)
    scored: List[Tuple[float, bool]] = []
    for image_id in sorted(det_groups):
        d = det_groups[image_id]
        g = gt_groups.get(image_id, [])
        res = match_detections(d, g, iou_threshold, conf_threshold=0.0)
        scored.extend((det.confidence, bool(flag)) for det, flag in zip(d, res.det_is_tp))

    conf = np.array([s[0] for s in scored], dtype=np.float64)
    tp = np.array([s[1] for s in scored], dtype=np.float64)
    order = np.lexsort((np.arange(len(conf)), -conf))
    tp = tp[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)

    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(np.mean(sampled))


@dataclass
class MapResult:
    """Mean AP over classes (and thresholds), in percent."""

    value: float
    per_class: Dict[int, float] = field(default_factory=dict)
    excluded_classes: List[int] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)


def mean_average_precision(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_thresholds: Sequence[float],
    num_classes: int = 2,
) -> MapResult:
    """Percent mAP averaged over classes and the given IoU thresholds.

    Classes without ground truths are excluded from the mean and noted.
    """
    per_class: Dict[int, float] = {}
    excluded: List[int] = []
    notes: List[str] = []
    for class_id in range(num_classes):
        class_gts = [g for g in gts if g.class_id == class_id]
        if not class_gts:
            excluded.append(class_id)
            notes.append(f"class {class_id} has no ground truths; excluded from mAP")
            continue
        class_dets = [d for d in dets if d.class_id == class_id]
        aps = [average_precision(class_dets, class_gts, t) for t in iou_thresholds]
        per_class[class_id] = 100.0 * float(np.mean(aps))
    if not per_class:
        raise EmptyInputError("no class has ground truths; mAP undefined")
    value = float(np.mean(list(per_class.values())))
    return MapResult(value, per_class, excluded, notes)


def map50(dets, gts, num_classes: int = 2) -> float:
    """Percent mAP at IoU 0.5."""
    return mean_average_precision(dets, gts, [0.5], num_classes).value


def map50_95(dets, gts, num_classes: int = 2) -> float:
    """Percent mAP averaged over IoU 0.50:0.05:0.95."""
    return mean_average_precision(dets, gts, IOU_SWEEP, num_classes).value
