"""Command-line entry point wiring modules into the experiment lifecycle."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import curation, dataio, probe
from .errors import ConfigError, WeedVisionError
from .evaluation import GroundTruth, build_report, evaluate_detections
from .evaluation.report import REPORT_NAME, load_predictions, write_predictions
from .model import (
    Detector,
    DetectorConfig,
    TrainConfig,
    count_params,
    load_detector,
    measure_latency,
    prepare_samples,
    split_dataset,
    train,
)

log = logging.getLogger(__name__)

OUT_DIR_ENV = "WEEDVISION_OUT_DIR"
WORKERS_ENV = "WEEDVISION_WORKERS"
CONFIG_SNAPSHOT = "config.json"
EVAL_MODES = ("two-class", "weed-only")


def _resolve_out(value: Optional[str], required: bool = True) -> Optional[Path]:
    """Flag value, else environment override, else error when required."""
    value = value or os.environ.get(OUT_DIR_ENV)
    if value is None:
        if required:
            raise ConfigError(f"--out is required (or set {OUT_DIR_ENV})")
        return None
    return Path(value)


def _resolve_workers(value: Optional[int]) -> int:
    if value is None:
        env = os.environ.get(WORKERS_ENV)
        value = int(env) if env else 1
    if value < 1:
        raise ConfigError(f"workers must be >= 1, got {value}")
    return value


def _write_snapshot(out_dir: Path, doc: dict) -> None:
    """Record the run-defining configuration; execution details such as
    worker count and output paths are deliberately excluded so replays
    are byte-comparable."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_SNAPSHOT).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n"
    )


def _load_json(path: str) -> dict:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def _load_boxes_and_records(
    manifest: str, class_count: Optional[int] = None
) -> Tuple[dataio.DatasetIndex, List[dataio.ImageRecord], List[list]]:
    index = dataio.load_dataset(manifest)
    records = [index.load_image(e) for e in index.entries]
    boxes = [index.load_boxes(e, class_count=class_count) for e in index.entries]
    return index, records, boxes


def _ground_truths(index: dataio.DatasetIndex, class_count: Optional[int]) -> List[GroundTruth]:
    gts = []
    for entry in index.entries:
        for b in index.load_boxes(entry, class_count=class_count):
            gts.append(
                GroundTruth.from_center_box(entry.id, b.class_id, b.cx, b.cy, b.w, b.h)
            )
    return gts


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    out = _resolve_out(args.out)
    workers = _resolve_workers(args.workers)
    scene_cfg = dataio.SyntheticSceneConfig(seed=args.seed, image_size=args.image_size)
    samples = dataio.synth_blob_dataset(scene_cfg, args.n, workers=workers)
    manifest = dataio.write_dataset(samples, out)
    _write_snapshot(out, {"command": "synth", "n": args.n, "scene": asdict(scene_cfg)})
    print(f"wrote {len(samples)} images to {manifest}")
    return 0


def cmd_curate(args) -> int:
    out = _resolve_out(args.out)
    workers = _resolve_workers(args.workers)
    cfg = curation.CurationConfig.from_dict(_load_json(args.config))
    inputs = [dataio.load_dataset(p) for p in args.data]
    embedder = None
    snapshot = {"command": "curate", "curation": cfg.to_dict()}
    if args.checkpoint:
        model, _ = load_detector(args.checkpoint)
        embedder = probe.VitEmbedder(model)
        snapshot["embedder"] = "vit_class_token"
    images, manifest = curation.run_curation(
        cfg, inputs, embedder=embedder, workers=workers, out_dir=out
    )
    _write_snapshot(out, snapshot)
    print(f"retained {len(images)} images; counts {manifest.counts}")
    return 0


def _split_train_config(doc: dict) -> Tuple[DetectorConfig, TrainConfig]:
    """Accept one flat document of detector + training fields, or the
    explicit nested form {"detector": {...}, "train": {...}}."""
    if set(doc) <= {"detector", "train"} and "detector" in doc:
        det = DetectorConfig.from_dict(doc["detector"])
        tr = TrainConfig.from_dict(doc.get("train", {}))
        return det, tr
    det_keys = set(DetectorConfig.__dataclass_fields__)
    tr_keys = set(TrainConfig.__dataclass_fields__)
    unknown = set(doc) - det_keys - tr_keys
    if unknown:
        raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
    det = DetectorConfig.from_dict({k: v for k, v in doc.items() if k in det_keys})
    tr = TrainConfig.from_dict({k: v for k, v in doc.items() if k in tr_keys})
    return det, tr


def _model_name(cfg: DetectorConfig) -> str:
    parts = [cfg.branch_mode]
    if cfg.use_sta:
        parts.append("sta")
    if cfg.use_align_loss:
        parts.append("align")
    if cfg.head_variant != "plain":
        parts.append(cfg.head_variant)
    return "_".join(parts)


def cmd_train(args) -> int:
    out = _resolve_out(args.out)
    workers = _resolve_workers(args.workers)
    det_cfg, train_cfg = _split_train_config(_load_json(args.config))
    if args.seed is not None:
        train_cfg = TrainConfig.from_dict(dict(train_cfg.to_dict(), seed=args.seed))

    index, records, boxes = _load_boxes_and_records(args.data, det_cfg.num_classes)
    split = split_dataset(len(records), train_cfg.split, seed=train_cfg.seed)
    train_samples = prepare_samples(
        [records[i] for i in split.train], [boxes[i] for i in split.train],
        det_cfg, workers=workers,
    )
    val_samples = prepare_samples(
        [records[i] for i in split.val], [boxes[i] for i in split.val],
        det_cfg, workers=workers,
    )

    detector = Detector(det_cfg, seed=train_cfg.seed)
    _write_snapshot(out, {
        "command": "train",
        "detector": det_cfg.to_dict(),
        "train": train_cfg.to_dict(),
    })
    (out / "split.json").write_text(json.dumps(
        {"train": split.train, "val": split.val, "test": split.test},
        indent=2) + "\n")
    result = train(detector, train_samples, train_cfg,
                   val_samples=val_samples, out_dir=out)

    test_records = [records[i] for i in split.test]
    dets = detector.predict(test_records, conf_threshold=0.01)
    write_predictions(dets, out / "predictions", image_ids=[r.id for r in test_records])
    test_gts = []
    for i in split.test:
        for b in boxes[i]:
            test_gts.append(GroundTruth.from_center_box(
                records[i].id, b.class_id, b.cx, b.cy, b.w, b.h))
    evaluation = evaluate_detections(dets, test_gts, num_classes=det_cfg.num_classes,
                                     conf_threshold=0.01, workers=workers)
    report = {
        "model": args.name or _model_name(det_cfg),
        "dataset": Path(index.root).name,
        "metrics": evaluation["metrics"],
        "per_class_map50": evaluation["per_class_map50"],
        "counts": evaluation["counts"],
        "notes": evaluation["notes"],
        "latency_ms": measure_latency(detector),
        "param_count": count_params(detector),
        "best_epoch": result.best_epoch,
    }
    (out / REPORT_NAME).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"trained {report['model']} for {train_cfg.epochs} epochs; "
          f"test mAP50 {evaluation['metrics']['mAP50']:.2f}; run dir {out}")
    return 0


def cmd_probe(args) -> int:
    out = _resolve_out(args.out, required=False)
    workers = _resolve_workers(args.workers)
    model, _ = load_detector(args.checkpoint)
    index, records, boxes = _load_boxes_and_records(args.data, model.cfg.num_classes)

    crops, labels = [], []
    for record, record_boxes in zip(records, boxes):
        for crop in dataio.crop_bounding_boxes(record, record_boxes):
            crops.append(crop)
            labels.append(crop.provenance["class_id"])
    if model.cfg.num_classes != 2:
        raise ConfigError("probe grouping expects the two-class crop/weed setup")

    before = probe.param_checksum(model)
    features = probe.extract_frozen_features(model, crops, workers=workers)
    ds = probe.ProbeDataset(
        features, np.array(labels), ("crop", "weed"),
        group_map={"crop": "crop", "weed": "weed"},
    )
    result = probe.train_linear_probe(ds, split=args.split, seed=args.seed)
    if probe.param_checksum(model) != before:
        raise WeedVisionError("model parameters changed during probing")

    groups = probe.group_accuracy(result.per_class, ds.group_map)
    report = {
        "per_class": result.per_class,
        "crop_avg": groups.crop_avg,
        "weed_avg": groups.weed_avg,
        "overall": groups.overall_avg,
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "probe_report.json").write_text(text + "\n")
        _write_snapshot(out, {"command": "probe", "split": args.split,
                              "seed": args.seed})
    return 0


def cmd_eval(args) -> int:
    workers = _resolve_workers(args.workers)
    dets = load_predictions(args.pred)
    index = dataio.load_dataset(args.gt)
    gts = _ground_truths(index, class_count=2)
    if args.mode == "weed-only":
        dets = [d for d in dets if d.class_id == 1]
        gts = [g for g in gts if g.class_id == 1]
    report = evaluate_detections(dets, gts, conf_threshold=args.conf, workers=workers)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_compare(args) -> int:
    report = build_report(args.runs)
    if args.metric not in report["columns"]:
        raise ConfigError(f"unknown metric {args.metric!r}; choose from {report['columns']}")
    if not report["datasets"]:
        raise WeedVisionError("no readable runs to compare")
    for absent in report["absent"]:
        log.warning("skipping %s: %s", absent["path"], absent["error"])
    for ds_name, table in report["datasets"].items():
        print(f"dataset: {ds_name}")
        print(f"{'model':24s} {args.metric:>10s}  reps")
        for row in table["rows"]:
            value = row["metrics"].get(args.metric)
            letter = row["letters"].get(args.metric, "")
            shown = "absent" if value is None or not np.isfinite(value) else f"{value:.2f}{letter}"
            print(f"{row['model']:24s} {shown:>10s}  {row['replications']}")
        for note in table["notes"]:
            print(f"note: {note}")
    return 0


def cmd_report(args) -> int:
    out = _resolve_out(args.out)
    report = build_report(args.runs, out_dir=out)
    if not report["datasets"]:
        raise WeedVisionError("no readable runs to report")
    print(f"wrote {out / REPORT_NAME}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weedvision",
        description="Synthetic crop/weed detection experiments: "
                    "synth -> curate -> train -> probe -> eval -> compare.",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blob dataset")
    p.add_argument("--n", type=int, default=200, help="number of images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int,
                   default=dataio.SyntheticSceneConfig().image_size)
    p.add_argument("--out", help=f"output dataset dir (or {OUT_DIR_ENV})")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("curate", help="run the curation pipeline")
    p.add_argument("--config", required=True, help="curation config JSON")
    p.add_argument("--data", required=True, action="append",
                   help="input dataset manifest (repeatable)")
    p.add_argument("--checkpoint", help="detector checkpoint for ViT embeddings")
    p.add_argument("--out", help=f"curated output dir (or {OUT_DIR_ENV})")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train", help="train a detector and evaluate its test split")
    p.add_argument("--config", required=True,
                   help="JSON with detector and training fields")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", help=f"run dir (or {OUT_DIR_ENV})")
    p.add_argument("--seed", type=int, default=None,
                   help="override the training seed")
    p.add_argument("--name", help="model name recorded in the run report")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="linear-probe frozen features on box crops")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="labeled dataset manifest")
    p.add_argument("--split", default="7:3")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional dir for probe_report.json")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="score a prediction dir against ground truth")
    p.add_argument("--pred", required=True, help="predictions dir")
    p.add_argument("--gt", required=True, help="dataset manifest")
    p.add_argument("--mode", choices=EVAL_MODES, default="two-class")
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="tabulate runs with significance letters")
    p.add_argument("--runs", required=True, nargs="+", help="run dirs")
    p.add_argument("--metric", default="mAP50")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="write the full multi-run report")
    p.add_argument("--runs", required=True, nargs="+", help="run dirs")
    p.add_argument("--out", help=f"report output dir (or {OUT_DIR_ENV})")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return int(args.func(args) or 0)
    except WeedVisionError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
