"""Run-level evaluation and multi-run report assembly."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..errors import FormatError
from ..parallel import ordered_map
from .metrics import (
    DEFAULT_CONF_THRESHOLD,
    Detection,
    GroundTruth,
    IOU_SWEEP,
    _group_by_image,
    match_detections,
    mean_average_precision,
    precision_recall,
)
from .stats import ReplicationTable, tukey_hsd

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("Precision", "Recall", "mAP50", "mAP50:95", "Lat.", "Param.")
METRIC_COLUMNS = ("Precision", "Recall", "mAP50", "mAP50:95")
REPORT_NAME = "report.json"


def evaluate_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    num_classes: int = 2,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    iou_threshold: float = 0.5,
    workers: int = 1,
) -> dict:
    """Full metric block for one prediction set against one truth set.

    Precision/recall use the fixed confidence threshold; the mAP columns
    sweep all confidences.  Per-image matching fans out over workers.
    """
    det_groups = _group_by_image(dets)
    gt_groups = _group_by_image(gts)
    image_ids = sorted(set(det_groups) | set(gt_groups))

    def match_one(image_id: str):
        return match_detections(
            det_groups.get(image_id, []),
            gt_groups.get(image_id, []),
            iou_threshold,
            conf_threshold,
        )

    results = ordered_map(match_one, image_ids, workers=workers)
    flags: List[bool] = []
    for res in results:
        flags.extend(
            bool(tp) for tp, ok in zip(res.det_is_tp, res.det_considered) if ok
        )
    pr = precision_recall(flags, len(gts))

    notes: List[str] = []
    if pr.undefined_precision:
        notes.append("precision undefined (no detections above threshold); reported 0")
    if pr.undefined_recall:
        notes.append("recall undefined (no ground truths); reported 0")
    m50 = mean_average_precision(dets, gts, [0.5], num_classes)
    m50_95 = mean_average_precision(dets, gts, IOU_SWEEP, num_classes)
    notes.extend(m50.notes)

    tp = sum(flags)
    return {
        "metrics": {
            "Precision": pr.precision,
            "Recall": pr.recall,
            "mAP50": m50.value,
            "mAP50:95": m50_95.value,
        },
        "per_class_map50": {str(k): v for k, v in m50.per_class.items()},
        "counts": {
            "n_images": len(image_ids),
            "n_detections": len(dets),
            "n_ground_truths": len(gts),
            "tp": tp,
            "fp": len(flags) - tp,
            "fn": len(gts) - tp,
        },
        "notes": notes,
    }


def ground_truths_from_index(index, weed_only: bool = False) -> List[GroundTruth]:
    """Convert a dataset index's labeled entries to corner-box truths."""
    gts: List[GroundTruth] = []
    for entry in index.entries:
        if entry.label_path is None:
            continue
        for box in entry.load_boxes():
            class_id = 0 if weed_only else box.class_id
            gts.append(
                GroundTruth.from_center_box(
                    entry.id, class_id, box.cx, box.cy, box.w, box.h
                )
            )
    return gts


def load_predictions(pred_dir) -> List[Detection]:
    """Read a predictions directory: one JSON list of detections per image."""
    pred_dir = Path(pred_dir)
    if not pred_dir.is_dir():
        raise FormatError(f"prediction directory {pred_dir} does not exist")
    dets: List[Detection] = []
    for path in sorted(pred_dir.glob("*.json")):
        if path.name in ("meta.json",):
            continue
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad prediction file {path}: {exc}") from exc
        if not isinstance(doc, list):
            raise FormatError(f"prediction file {path} must hold a JSON list")
        dets.extend(Detection.from_dict(d) for d in doc)
    return dets


def write_predictions(dets: Sequence[Detection], pred_dir, image_ids=None) -> None:
    """Write one JSON list per image; empty lists for unlisted images."""
    pred_dir = Path(pred_dir)
    pred_dir.mkdir(parents=True, exist_ok=True)
    groups = _group_by_image(dets)
    ids = sorted(set(groups) | set(image_ids or []))
    for image_id in ids:
        doc = [d.to_dict() for d in groups.get(image_id, [])]
        path = pred_dir / f"{image_id}.json"
        path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


@dataclass
class RunRecord:
    """One evaluated run as read back from its report file."""

    path: str
    model: str = ""
    dataset: str = ""
    metrics: Dict[str, float] = field(default_factory=dict)
    latency_ms: Optional[float] = None
    param_count: Optional[int] = None
    ok: bool = False
    error: str = ""


def load_run_record(run_dir) -> RunRecord:
    run_dir = Path(run_dir)
    report_path = run_dir / REPORT_NAME
    record = RunRecord(path=str(run_dir))
    if not report_path.is_file():
        record.error = f"missing {REPORT_NAME}"
        return record
    try:
        doc = json.loads(report_path.read_text())
    except json.JSONDecodeError as exc:
        record.error = f"unreadable {REPORT_NAME}: {exc}"
        return record
    try:
        record.model = str(doc.get("model", run_dir.name))
        record.dataset = str(doc.get("dataset", "default"))
        record.metrics = {k: float(v) for k, v in doc["metrics"].items()}
        record.latency_ms = doc.get("latency_ms")
        record.param_count = doc.get("param_count")
    except (KeyError, TypeError, ValueError) as exc:
        record.error = f"malformed {REPORT_NAME}: {exc}"
        return record
    record.ok = True
    return record


def _format_cell(value: Optional[float], letter: str = "", decimals: int = 2) -> str:
    if value is None:
        return "absent"
    return f"{value:.{decimals}f}{letter}"


def build_report(run_dirs: Sequence, out_dir=None, alpha: float = 0.05) -> dict:
    """Aggregate evaluated runs into per-dataset comparison tables.

    Runs sharing (dataset, model) are replications; when every model in a
    dataset has the same replication count >= 2, each metric column gets
    compact-display letters.  Missing or unreadable runs are listed as
    absent and do not block the report.
    """
    records = [load_run_record(d) for d in run_dirs]
    absent = [{"path": r.path, "error": r.error} for r in records if not r.ok]
    good = [r for r in records if r.ok]

    datasets: Dict[str, Dict[str, List[RunRecord]]] = {}
    for rec in good:
        datasets.setdefault(rec.dataset, {}).setdefault(rec.model, []).append(rec)

    report = {"columns": list(REPORT_COLUMNS), "datasets": {}, "absent": absent}
    for ds_name in sorted(datasets):
        models = datasets[ds_name]
        names = sorted(models)
        counts = {m: len(models[m]) for m in names}
        rep_counts = set(counts.values())
        balanced = len(rep_counts) == 1 and rep_counts.pop() >= 2 and len(names) >= 2

        letters: Dict[str, Dict[str, str]] = {m: {} for m in names}
        cld_notes: List[str] = []
        if balanced:
            for metric in METRIC_COLUMNS:
                values = np.array(
                    [[rec.metrics.get(metric, np.nan) for rec in models[m]] for m in names]
                )
                if not np.all(np.isfinite(values)):
                    cld_notes.append(f"{metric}: missing values, letters skipped")
                    continue
                table = ReplicationTable(tuple(names), metric, values)
                hsd = tukey_hsd(table, alpha)
                for m in names:
                    letters[m][metric] = hsd.letters[m]
        elif len(names) >= 2:
            cld_notes.append(
                "letters require >= 2 balanced replications per model; "
                f"got {counts}"
            )

        rows = []
        for m in names:
            recs = models[m]
            means = {
                metric: float(np.mean([r.metrics.get(metric, np.nan) for r in recs]))
                for metric in METRIC_COLUMNS
            }
            lats = [r.latency_ms for r in recs if r.latency_ms is not None]
            params = [r.param_count for r in recs if r.param_count is not None]
            rows.append(
                {
                    "model": m,
                    "replications": counts[m],
                    "metrics": means,
                    "letters": letters[m],
                    "latency_ms": float(np.mean(lats)) if lats else None,
                    "param_count": int(params[0]) if params else None,
                }
            )
        report["datasets"][ds_name] = {"rows": rows, "notes": cld_notes}

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / REPORT_NAME).write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n"
        )
        for ds_name, table in report["datasets"].items():
            csv_path = out_dir / f"report_{ds_name}.csv"
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["Model", *REPORT_COLUMNS])
                for row in table["rows"]:
                    cells = [row["model"]]
                    for metric in METRIC_COLUMNS:
                        cells.append(
                            _format_cell(
                                row["metrics"].get(metric),
                                row["letters"].get(metric, ""),
                            )
                        )
                    lat = row["latency_ms"]
                    cells.append("absent" if lat is None else f"{lat:.1f}")
                    par = row["param_count"]
                    cells.append("absent" if par is None else str(par))
                    writer.writerow(cells)
    return report
