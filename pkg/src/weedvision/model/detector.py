"""Detector assembly: branch wiring, preprocessing, and measurement."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from ..dataio import GroundTruthBox, ImageRecord
from ..errors import ConfigError
from ..numerics import Tensor, as_tensor, load_checkpoint, load_into, nn, no_grad, ops, save_checkpoint
from .adapter import FusionBlock, StaAdapter, VitProjection
from .backbone import STRIDES, ConvPyramidBackbone, FeaturePyramid
from .config import DetectorConfig
from .head import DetectionHead, RawPrediction, decode_predictions
from .vit import VitEncoder

PAD_VALUE = 114
ZNORM_MEAN = (0.485, 0.456, 0.406)
ZNORM_STD = (0.229, 0.224, 0.225)


@dataclass
class LetterboxParams:
    scale: float
    new_w: int
    new_h: int
    pad_left: int
    pad_top: int


def letterbox_params(height: int, width: int, target: int) -> LetterboxParams:
    """Aspect-preserving resize geometry onto a target square canvas."""
    scale = target / max(height, width)
    new_w = min(int(round(width * scale)), target)
    new_h = min(int(round(height * scale)), target)
    return LetterboxParams(
        scale=scale,
        new_w=new_w,
        new_h=new_h,
        pad_left=(target - new_w) // 2,
        pad_top=(target - new_h) // 2,
    )


def letterbox_image(pixels: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize onto a gray square canvas, centered."""
    h, w = pixels.shape[:2]
    p = letterbox_params(h, w, target)
    resized = np.asarray(
        Image.fromarray(pixels).resize((p.new_w, p.new_h), Image.BILINEAR)
    )
    canvas = np.full((target, target, 3), PAD_VALUE, dtype=np.uint8)
    canvas[p.pad_top : p.pad_top + p.new_h, p.pad_left : p.pad_left + p.new_w] = resized
    return canvas


def remap_boxes(
    boxes: Sequence[GroundTruthBox], height: int, width: int, target: int
) -> List[GroundTruthBox]:
    """Express boxes of the original image in letterboxed coordinates."""
    p = letterbox_params(height, width, target)
    out = []
    for b in boxes:
        out.append(
            GroundTruthBox(
                class_id=b.class_id,
                cx=(p.pad_left + b.cx * p.new_w) / target,
                cy=(p.pad_top + b.cy * p.new_h) / target,
                w=b.w * p.new_w / target,
                h=b.h * p.new_h / target,
            )
        )
    return out


def normalize_pixels(canvas: np.ndarray, input_norm: str) -> np.ndarray:
    """uint8 HxWx3 -> float32 [3,H,W] per the configured scheme."""
    x = canvas.astype(np.float32) / 255.0
    if input_norm == "znorm":
        mean = np.array(ZNORM_MEAN, dtype=np.float32)
        std = np.array(ZNORM_STD, dtype=np.float32)
        x = (x - mean) / std
    elif input_norm != "scale01":
        raise ConfigError(f"unknown input_norm {input_norm!r}")
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def preprocess(record: ImageRecord, cfg: DetectorConfig) -> Tensor:
    """ImageRecord -> [1,3,S,S] network input tensor."""
    canvas = letterbox_image(record.pixels, cfg.input_size)
    return as_tensor(normalize_pixels(canvas, cfg.input_norm)[None, ...])


def preprocess_batch(records: Sequence[ImageRecord], cfg: DetectorConfig) -> Tensor:
    stacked = np.stack(
        [
            normalize_pixels(letterbox_image(r.pixels, cfg.input_size), cfg.input_norm)
            for r in records
        ]
    )
    return as_tensor(stacked)


class Detector(nn.Module):
    """Single-, transformer-, or dual-branch detector per its config."""

    def __init__(self, cfg: DetectorConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.backbone = None
        self.vit = None
        self.projections = None
        self.sta = None
        self.fusion = None

        if cfg.branch_mode in ("yolo_only", "dual"):
            self.backbone = ConvPyramidBackbone(cfg.head_channels, rng)
        if cfg.branch_mode in ("vit_only", "dual"):
            self.vit = VitEncoder(cfg.vit, cfg.input_size, rng)
            if cfg.use_sta:
                self.sta = StaAdapter(cfg.vit.embed_dim, cfg.head_channels, rng)
            else:
                self.projections = [
                    VitProjection(cfg.vit.embed_dim, cfg.head_channels, rng)
                    for _ in STRIDES
                ]
        if cfg.branch_mode == "dual":
            self.fusion = FusionBlock(cfg.head_channels, rng)
        self.head = DetectionHead(
            cfg.head_channels,
            cfg.num_classes,
            cfg.head_variant,
            cfg.dfl_bins,
            rng,
            use_attention=cfg.head_attention,
        )
        self.bind_parameter_names()

    def _vit_levels(self, x: Tensor) -> List[Tensor]:
        out = self.vit(x)
        if self.sta is not None:
            return list(self.sta(out.final, self.cfg.input_size).levels())
        return [
            proj(tap, self.cfg.input_size, stride)
            for proj, tap, stride in zip(self.projections, out.taps, STRIDES)
        ]

    def __call__(self, x: Tensor):
        """Returns (RawPrediction, branch pair for alignment or None)."""
        mode = self.cfg.branch_mode
        if mode == "yolo_only":
            return self.head(self.backbone(x)), None
        if mode == "vit_only":
            return self.head(FeaturePyramid(*self._vit_levels(x))), None
        yolo_pyr = self.backbone(x)
        vit_levels = self._vit_levels(x)
        fused = self.fusion(yolo_pyr, vit_levels)
        return self.head(fused), (yolo_pyr, vit_levels)

    def component_param_counts(self) -> dict:
        counts = {}
        for name in ("backbone", "vit", "projections", "sta", "fusion", "head"):
            member = getattr(self, name)
            if member is None:
                continue
            if isinstance(member, list):
                counts[name] = sum(m.count_params() for m in member)
            else:
                counts[name] = member.count_params()
        return counts

    def predict(
        self,
        records: Sequence[ImageRecord],
        conf_threshold: float = 0.25,
        batch_size: int = 8,
        use_nms: bool = False,
    ):
        """Decode thresholded detections, in original-image coordinates.

        Boxes are unmapped from the letterboxed canvas; detections that
        lie entirely in the padding are dropped.
        """
        dets = []
        size = self.cfg.input_size
        with no_grad():
            for start in range(0, len(records), batch_size):
                chunk = records[start : start + batch_size]
                raw, _ = self(preprocess_batch(chunk, self.cfg))
                for i, record in enumerate(chunk):
                    single = slice_raw(raw, i)
                    canvas_dets = decode_predictions(
                        single,
                        size,
                        self.cfg.head_variant,
                        self.cfg.dfl_bins,
                        conf_threshold=conf_threshold,
                        image_id=record.id,
                        use_nms=use_nms,
                    )
                    p = letterbox_params(record.height, record.width, size)
                    for d in canvas_dets:
                        unmapped = _unmap_detection(d, p, size)
                        if unmapped is not None:
                            dets.append(unmapped)
        return dets


def _unmap_detection(det, p: LetterboxParams, size: int):
    """Canvas-frame detection -> original-frame detection, or None when
    the box does not intersect the image content."""
    from ..evaluation.metrics import Detection

    x1 = min(max((det.x1 * size - p.pad_left) / p.new_w, 0.0), 1.0)
    x2 = min(max((det.x2 * size - p.pad_left) / p.new_w, 0.0), 1.0)
    y1 = min(max((det.y1 * size - p.pad_top) / p.new_h, 0.0), 1.0)
    y2 = min(max((det.y2 * size - p.pad_top) / p.new_h, 0.0), 1.0)
    if x2 - x1 <= 0.0 or y2 - y1 <= 0.0:
        return None
    return Detection(
        image_id=det.image_id,
        class_id=det.class_id,
        confidence=det.confidence,
        x1=x1,
        y1=y1,
        x2=x2,
        y2=y2,
    )


def slice_raw(raw: RawPrediction, index: int) -> RawPrediction:
    """Extract one image's maps from a batched prediction (constants)."""
    return RawPrediction(
        cls=[as_tensor(t.data[index : index + 1]) for t in raw.cls],
        box=[as_tensor(t.data[index : index + 1]) for t in raw.box],
        strides=raw.strides,
    )


def count_params(model: nn.Module) -> int:
    return model.count_params()


def save_detector(detector: Detector, path, extra: Optional[dict] = None) -> None:
    config = {"detector": detector.cfg.to_dict()}
    if extra:
        config.update(extra)
    save_checkpoint(path, detector.parameters(), config)


def load_detector(path) -> Tuple[Detector, dict]:
    """Rebuild a detector from a checkpoint; returns it with the header."""
    config, arrays = load_checkpoint(path)
    cfg = DetectorConfig.from_dict(config["detector"])
    detector = Detector(cfg, seed=0)
    load_into(detector.parameters(), arrays)
    return detector, config


def measure_latency(
    model: Detector, n_warmup: int = 2, n_runs: int = 10, seed: int = 0
) -> float:
    """Median wall-clock milliseconds of forward+decode on one input."""
    rng = np.random.default_rng(seed)
    x = as_tensor(
        rng.normal(0.0, 1.0, size=(1, 3, model.cfg.input_size, model.cfg.input_size)).astype(
            np.float32
        )
    )
    times = []
    with no_grad():
        for i in range(n_warmup + n_runs):
            t0 = time.perf_counter()
            raw, _ = model(x)
            decode_predictions(
                raw,
                model.cfg.input_size,
                model.cfg.head_variant,
                model.cfg.dfl_bins,
                conf_threshold=0.25,
                image_id="latency",
            )
            elapsed = (time.perf_counter() - t0) * 1000.0
            if i >= n_warmup:
                times.append(elapsed)
    return float(np.median(times))
