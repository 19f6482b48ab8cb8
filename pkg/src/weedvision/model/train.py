"""SGD training loop over preprocessed detection samples."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..dataio import GroundTruthBox, ImageRecord
from ..errors import StateError
from ..numerics import as_tensor, no_grad, ops, save_checkpoint, sgd_step
from ..parallel import ordered_map
from .assign import LevelTargets, assign_targets, stack_targets
from .config import DetectorConfig, TrainConfig, parse_split
from .detector import Detector, letterbox_image, normalize_pixels, remap_boxes
from .losses import detection_loss

log = logging.getLogger(__name__)

HISTORY_NAME = "history.csv"
CHECKPOINT_NAME = "checkpoint.zip"
HISTORY_FIELDS = ("epoch", "total", "cls", "box", "align", "val")


@dataclass
class SplitIndices:
    train: List[int]
    val: List[int]
    test: List[int]


def split_dataset(n: int, split: str = "75:5:25", seed: int = 0) -> SplitIndices:
    """Shuffle indices with the seed, then cut train/val/test fractions."""
    fractions = parse_split(split)
    order = list(np.random.default_rng(seed).permutation(n))
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return SplitIndices(
        train=[int(i) for i in order[:n_train]],
        val=[int(i) for i in order[n_train : n_train + n_val]],
        test=[int(i) for i in order[n_train + n_val :]],
    )


@dataclass
class Sample:
    """One preprocessed training example: network input plus targets."""

    image_id: str
    pixels: np.ndarray
    boxes: List[GroundTruthBox]
    targets: List[LevelTargets]


def prepare_samples(
    records: Sequence[ImageRecord],
    boxes_per_image: Sequence[Sequence[GroundTruthBox]],
    detector_cfg: DetectorConfig,
    workers: int = 1,
) -> List[Sample]:
    """Letterbox, normalize, and assign targets once per image."""
    size = detector_cfg.input_size
    level_shapes = [(size // s, size // s) for s in (8, 16, 32)]

    def build(pair) -> Sample:
        record, boxes = pair
        canvas = letterbox_image(record.pixels, size)
        remapped = remap_boxes(boxes, record.height, record.width, size)
        return Sample(
            image_id=record.id,
            pixels=normalize_pixels(canvas, detector_cfg.input_norm),
            boxes=remapped,
            targets=assign_targets(
                remapped, level_shapes, size, detector_cfg.num_classes
            ),
        )

    return ordered_map(build, list(zip(records, boxes_per_image)), workers=workers)


@dataclass
class TrainResult:
    history: List[dict] = field(default_factory=list)
    best_val: float = float("inf")
    best_epoch: int = -1
    checkpoint_path: Optional[str] = None


def _batch_loss(detector: Detector, samples: Sequence[Sample], train_cfg: TrainConfig):
    x = as_tensor(np.stack([s.pixels for s in samples]))
    targets = stack_targets([s.targets for s in samples])
    raw, branch_pair = detector(x)
    cfg = detector.cfg
    align_pair = branch_pair if cfg.use_align_loss else None
    return detection_loss(
        raw,
        targets,
        cfg.head_variant,
        cfg.dfl_bins,
        cls_weight=train_cfg.cls_weight,
        box_weight=train_cfg.box_weight,
        align_pair=align_pair,
        align_weight=cfg.align_weight,
        align_detach_vit=cfg.align_detach_vit,
    )


def epoch_lr(train_cfg: TrainConfig, epoch: int) -> float:
    """Linear warmup to the peak rate, then cosine decay to the floor."""
    warm = train_cfg.warmup_epochs
    if warm > 0 and epoch < warm:
        return train_cfg.lr * (epoch + 1) / warm
    span = max(train_cfg.epochs - warm, 1)
    progress = min((epoch - warm) / span, 1.0)
    floor = train_cfg.lr * train_cfg.lr_floor_ratio
    return floor + (train_cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def _write_history(history: List[dict], out_dir: Path) -> None:
    with open(out_dir / HISTORY_NAME, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_FIELDS})


def train(
    detector: Detector,
    samples: Sequence[Sample],
    train_cfg: TrainConfig,
    val_samples: Sequence[Sample] = (),
    out_dir=None,
) -> TrainResult:
    """Plain SGD with momentum, per-epoch shuffling, best-val checkpointing.

    The loop is deterministic for a fixed seed and single worker.  A
    non-finite loss aborts with a diagnostic dump.
    """
    if not samples:
        raise StateError("no training samples")
    out_path: Optional[Path] = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)

    params = detector.parameters()
    result = TrainResult()
    n = len(samples)
    batch = max(1, min(train_cfg.batch_size, n))

    for epoch in range(train_cfg.epochs):
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
        lr = epoch_lr(train_cfg, epoch)

        sums = {"total": 0.0, "cls": 0.0, "box": 0.0, "align": 0.0}
        n_batches = 0
        for start in range(0, n, batch):
            chunk = [samples[int(i)] for i in order[start : start + batch]]
            detector.zero_grad()
            total, components = _batch_loss(detector, chunk, train_cfg)
            if not np.isfinite(components["total"]):
                if out_path is not None:
                    _write_history(result.history, out_path)
                    (out_path / "abort.json").write_text(
                        json.dumps(
                            {
                                "epoch": epoch,
                                "batch_start": int(start),
                                "components": components,
                                "lr": lr,
                            },
                            sort_keys=True,
                            indent=2,
                        )
                    )
                raise StateError(
                    f"non-finite loss {components} at epoch {epoch}, batch {start}"
                )
            total.backward()
            sgd_step(
                params,
                lr=lr,
                momentum=train_cfg.momentum,
                weight_decay=train_cfg.weight_decay,
            )
            for k in sums:
                sums[k] += components[k]
            n_batches += 1

        row = {k: sums[k] / n_batches for k in sums}
        row["epoch"] = epoch

        val_loss = row["total"]
        if val_samples:
            with no_grad():
                v_sum, v_batches = 0.0, 0
                for start in range(0, len(val_samples), batch):
                    chunk = list(val_samples[start : start + batch])
                    _, comps = _batch_loss(detector, chunk, train_cfg)
                    v_sum += comps["total"]
                    v_batches += 1
                val_loss = v_sum / v_batches
        row["val"] = val_loss
        result.history.append(row)
        log.info(
            "epoch %d total %.4f cls %.4f box %.4f align %.4f val %.4f",
            epoch, row["total"], row["cls"], row["box"], row["align"], row["val"],
        )

        if val_loss < result.best_val:
            result.best_val = val_loss
            result.best_epoch = epoch
            if out_path is not None:
                ckpt = out_path / CHECKPOINT_NAME
                save_checkpoint(
                    ckpt,
                    params,
                    {
                        "detector": detector.cfg.to_dict(),
                        "train": train_cfg.to_dict(),
                        "best_epoch": epoch,
                        "best_val": val_loss,
                    },
                )
                result.checkpoint_path = str(ckpt)

    if out_path is not None:
        _write_history(result.history, out_path)
        if result.checkpoint_path is None:
            ckpt = out_path / CHECKPOINT_NAME
            save_checkpoint(
                ckpt,
                params,
                {
                    "detector": detector.cfg.to_dict(),
                    "train": train_cfg.to_dict(),
                    "best_epoch": result.best_epoch,
                    "best_val": result.best_val,
                },
            )
            result.checkpoint_path = str(ckpt)
    return result
