"""Anchor-free detection head with plain and distribution-bin regression."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from ..errors import ConfigError, ShapeError
from ..evaluation.metrics import Detection
from ..numerics import Tensor, as_tensor, nn, ops
from .backbone import STRIDES, FeaturePyramid

DISTANCE_FLOOR = 1e-4
HEAD_ATTENTION_HEADS = 4


@dataclass
class RawPrediction:
    """Per-level class logits [N,K,H,W] and box regression maps.

    Box maps carry 4 channels (plain) or 4*dfl_bins channels (dfl).
    """

    cls: List[Tensor]
    box: List[Tensor]
    strides: Tuple[int, ...] = STRIDES

    def level_shapes(self) -> List[Tuple[int, int]]:
        return [(t.shape[2], t.shape[3]) for t in self.cls]


class DetectionHead(nn.Module):
    """Shared conv stems emitting per-cell class logits and distances.

    The same weights run on every pyramid level.  An optional attention
    block over the flattened cells of each level sits after the stems.
    """

    def __init__(
        self,
        channels: int,
        num_classes: int,
        variant: str = "plain",
        dfl_bins: int = 8,
        rng: Optional[np.random.Generator] = None,
        use_attention: bool = False,
    ):
        if variant not in ("plain", "dfl"):
            raise ConfigError(f"unknown head variant {variant!r}")
        if variant == "dfl" and dfl_bins < 2:
            raise ConfigError("dfl head needs at least 2 bins")
        if rng is None:
            rng = np.random.default_rng(0)
        self.variant = variant
        self.dfl_bins = dfl_bins
        self.num_classes = num_classes
        self.stem1 = nn.Conv2d(channels, channels, 3, rng, padding=1)
        self.stem2 = nn.Conv2d(channels, channels, 3, rng, padding=1)
        self.attn = (
            nn.MultiHeadAttention(channels, HEAD_ATTENTION_HEADS, rng)
            if use_attention
            else None
        )
        self.cls_out = nn.Conv2d(channels, num_classes, 1, rng)
        # Bias the class logits toward background so fresh models start
        # with near-empty decode output.
        self.cls_out.bias.data[:] = -4.0
        box_channels = 4 if variant == "plain" else 4 * dfl_bins
        self.box_out = nn.Conv2d(channels, box_channels, 1, rng)

    def __call__(self, pyramid: FeaturePyramid) -> RawPrediction:
        cls_maps: List[Tensor] = []
        box_maps: List[Tensor] = []
        for level in pyramid.levels():
            h = ops.gelu(self.stem1(level))
            h = ops.gelu(self.stem2(h))
            if self.attn is not None:
                n, c, hh, ww = h.shape
                tokens = h.reshape((n, c, hh * ww)).transpose((0, 2, 1))
                mixed = self.attn(tokens)
                h = h + mixed.transpose((0, 2, 1)).reshape((n, c, hh, ww))
            cls_maps.append(self.cls_out(h))
            box_maps.append(self.box_out(h))
        return RawPrediction(cls=cls_maps, box=box_maps, strides=STRIDES)


def decode_distances(box_map: Tensor, variant: str, dfl_bins: int) -> Tensor:
    """Box regression map -> positive distances [N,4,H,W] in stride units.

    plain: softplus of the raw values; dfl: expectation of the per-side
    softmax over bin indices.  A small floor keeps distances strictly
    positive so decoded corners stay properly ordered.
    """
    n, ch, h, w = box_map.shape
    if variant == "plain":
        if ch != 4:
            raise ShapeError(f"plain box map needs 4 channels, got {ch}")
        dist = ops.softplus(box_map)
    else:
        if ch != 4 * dfl_bins:
            raise ShapeError(f"dfl box map needs {4 * dfl_bins} channels, got {ch}")
        logits = box_map.reshape((n, 4, dfl_bins, h, w))
        probs = ops.softmax(logits, axis=2)
        bins = as_tensor(np.arange(dfl_bins, dtype=np.float64).reshape(1, 1, dfl_bins, 1, 1))
        dist = (probs * bins).sum(axis=2)
    return ops.maximum(dist, as_tensor(np.full((1, 1, 1, 1), DISTANCE_FLOOR)))


def cell_centers(h: int, w: int, stride: int, input_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized (cx, cy) grids [H,W] for a level's cells."""
    ys = (np.arange(h, dtype=np.float64) + 0.5) * stride / input_size
    xs = (np.arange(w, dtype=np.float64) + 0.5) * stride / input_size
    cx = np.broadcast_to(xs[None, :], (h, w))
    cy = np.broadcast_to(ys[:, None], (h, w))
    return cx, cy


def _greedy_nms(dets: List[Detection], iou_threshold: float) -> List[Detection]:
    from ..evaluation.metrics import iou as box_iou

    kept: List[Detection] = []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    for i in order:
        cand = dets[i]
        if all(
            k.class_id != cand.class_id or box_iou(cand.corners, k.corners) < iou_threshold
            for k in kept
        ):
            kept.append(cand)
    return sorted(kept, key=lambda d: (-d.confidence, d.image_id))


def decode_predictions(
    raw: RawPrediction,
    input_size: int,
    variant: str,
    dfl_bins: int,
    conf_threshold: float = 0.25,
    image_id: str = "",
    use_nms: bool = False,
    nms_iou: float = 0.7,
) -> List[Detection]:
    """Raw maps -> thresholded Detection list for a single image.

    Per cell: confidence = max sigmoid(class logits); cells with
    confidence >= conf_threshold survive; corners = cell center +/-
    decoded distances in normalized units, clamped to [0,1].  Output is
    ordered by level, then row-major cell order.
    """
    dets: List[Detection] = []
    for li, stride in enumerate(raw.strides):
        cls_map = raw.cls[li].data
        if cls_map.shape[0] != 1:
            raise ShapeError("decode expects a single-image batch")
        dist = decode_distances(raw.box[li], variant, dfl_bins).data[0]
        probs = 1.0 / (1.0 + np.exp(-cls_map[0].astype(np.float64)))
        conf = probs.max(axis=0)
        class_id = probs.argmax(axis=0)
        h, w = conf.shape
        cx, cy = cell_centers(h, w, stride, input_size)
        scale = stride / input_size
        keep = conf >= conf_threshold
        for r, c in zip(*np.nonzero(keep)):
            l, t, rr, b = dist[:, r, c].astype(np.float64)
            x1 = min(max(cx[r, c] - l * scale, 0.0), 1.0)
            y1 = min(max(cy[r, c] - t * scale, 0.0), 1.0)
            x2 = min(max(cx[r, c] + rr * scale, 0.0), 1.0)
            y2 = min(max(cy[r, c] + b * scale, 0.0), 1.0)
            dets.append(
                Detection(
                    image_id=image_id,
                    class_id=int(class_id[r, c]),
                    confidence=float(conf[r, c]),
                    x1=x1,
                    y1=y1,
                    x2=x2,
                    y2=y2,
                )
            )
    if use_nms:
        dets = _greedy_nms(dets, nms_iou)
    return dets
