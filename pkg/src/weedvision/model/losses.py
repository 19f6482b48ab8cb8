"""Detection training loss: classification, box regression, alignment."""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ShapeError
from ..numerics import Tensor, as_tensor, ops
from .adapter import alignment_loss
from .assign import LevelTargets
from .head import RawPrediction, decode_distances

_IOU_EPS = 1e-9


def _iou_loss_level(
    box_map: Tensor, target: LevelTargets, variant: str, dfl_bins: int
) -> Tensor:
    """Sum over positive cells of (1 - IoU) plus a center-distance penalty.

    Distances are (left, top, right, bottom) from the cell center, so the
    intersection along each axis is the sum of the pairwise minima.  The
    penalty is the squared center gap over the squared enclosing-box
    diagonal, which keeps a gradient alive when boxes barely overlap.
    """
    pred = decode_distances(box_map, variant, dfl_bins)
    tgt = as_tensor(target.box.astype(np.float64))
    lp, tp_, rp, bp = pred[:, 0], pred[:, 1], pred[:, 2], pred[:, 3]
    lg, tg, rg, bg = tgt[:, 0], tgt[:, 1], tgt[:, 2], tgt[:, 3]

    inter_w = ops.minimum(lp, lg) + ops.minimum(rp, rg)
    inter_h = ops.minimum(tp_, tg) + ops.minimum(bp, bg)
    inter = inter_w * inter_h
    area_p = (lp + rp) * (tp_ + bp)
    area_g = (lg + rg) * (tg + bg)
    union = area_p + area_g - inter
    iou = inter / (union + as_tensor(np.full(union.shape, _IOU_EPS)))

    dx = (rp - lp) * 0.5 - (rg - lg) * 0.5
    dy = (bp - tp_) * 0.5 - (bg - tg) * 0.5
    enc_w = ops.maximum(lp, lg) + ops.maximum(rp, rg)
    enc_h = ops.maximum(tp_, tg) + ops.maximum(bp, bg)
    diag2 = enc_w * enc_w + enc_h * enc_h
    penalty = (dx * dx + dy * dy) / (diag2 + as_tensor(np.full(diag2.shape, _IOU_EPS)))

    pos = as_tensor(target.pos.astype(np.float64))
    return ((as_tensor(np.ones(iou.shape)) - iou + penalty) * pos).sum()


def _dfl_loss_level(box_map: Tensor, target: LevelTargets, dfl_bins: int) -> Tensor:
    """Two-bin interpolation cross-entropy against continuous distances.

    Each positive cell's target distance t (stride units) is clipped to
    [0, bins-1-1e-3]; the loss spreads -log p over floor(t) and floor(t)+1
    with linear weights, leaving background cells with zero weight.
    """
    n, ch, h, w = box_map.shape
    logits = box_map.reshape((n, 4, dfl_bins, h, w))
    logp = ops.log_softmax(logits, axis=2)

    t = np.clip(target.box.astype(np.float64), 0.0, dfl_bins - 1 - 1e-3)
    fl = np.floor(t).astype(np.int64)
    wl = (fl + 1).astype(np.float64) - t
    wr = t - fl.astype(np.float64)

    weights = np.zeros((n, 4, dfl_bins, h, w), dtype=np.float64)
    n_idx, s_idx, y_idx, x_idx = np.indices(t.shape)
    weights[n_idx, s_idx, fl, y_idx, x_idx] = wl
    weights[n_idx, s_idx, np.minimum(fl + 1, dfl_bins - 1), y_idx, x_idx] += wr
    weights *= target.pos[:, None, None, :, :]

    return (logp * as_tensor(-weights)).sum()


def detection_loss(
    raw: RawPrediction,
    targets: Sequence[LevelTargets],
    variant: str,
    dfl_bins: int,
    cls_weight: float = 1.0,
    box_weight: float = 2.0,
    align_pair: Optional[Tuple] = None,
    align_weight: float = 1.0,
    align_detach_vit: bool = False,
) -> Tuple[Tensor, Dict[str, float]]:
    """Total training loss and its float components.

    Classification is binary cross-entropy over every cell and class,
    normalized by the positive count; the box term runs on positive
    cells only; the alignment term joins when a branch pair is given.
    total = cls_weight*cls + box_weight*box + align_weight*align.
    """
    if len(raw.cls) != len(targets):
        raise ShapeError(f"{len(raw.cls)} levels vs {len(targets)} target levels")

    n_pos = int(sum(t.pos.sum() for t in targets))
    denom = float(max(n_pos, 1))

    cls_sum: Optional[Tensor] = None
    box_sum: Optional[Tensor] = None
    for cls_map, box_map, tgt in zip(raw.cls, raw.box, targets):
        if cls_map.shape[0] != tgt.cls.shape[0] or cls_map.shape[1:] != tgt.cls.shape[1:]:
            raise ShapeError(
                f"class map {cls_map.shape} does not match targets {tgt.cls.shape}"
            )
        level_cls = ops.bce_with_logits(cls_map, tgt.cls.astype(cls_map.dtype)).sum()
        cls_sum = level_cls if cls_sum is None else cls_sum + level_cls
        if n_pos > 0:
            if variant == "plain":
                level_box = _iou_loss_level(box_map, tgt, variant, dfl_bins)
            else:
                level_box = _dfl_loss_level(box_map, tgt, dfl_bins)
            box_sum = level_box if box_sum is None else box_sum + level_box

    cls_term = cls_sum * (1.0 / denom)
    box_denom = denom * (4.0 if variant == "dfl" else 1.0)
    box_term = box_sum * (1.0 / box_denom) if box_sum is not None else None

    total = cls_term * cls_weight
    components = {"cls": float(cls_term.data)}
    if box_term is not None:
        total = total + box_term * box_weight
        components["box"] = float(box_term.data)
    else:
        components["box"] = 0.0
    if align_pair is not None:
        align = alignment_loss(align_pair[0], align_pair[1], detach_vit=align_detach_vit)
        total = total + align * align_weight
        components["align"] = float(align.data)
    else:
        components["align"] = 0.0
    components["total"] = float(total.data)
    return total, components
