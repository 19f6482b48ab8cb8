"""Center-region target assignment across pyramid levels."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from ..dataio import GroundTruthBox
from .backbone import STRIDES
from .head import DISTANCE_FLOOR, cell_centers


@dataclass
class LevelTargets:
    """Dense per-cell training targets for one pyramid level.

    cls is [K,H,W] one-hot over positives, box is [4,H,W] distances
    (left, top, right, bottom) in stride units, pos marks assigned cells.
    """

    cls: np.ndarray
    box: np.ndarray
    pos: np.ndarray


def route_level(w: float, h: float, input_size: int) -> int:
    """Pick the pyramid level whose stride suits the box size.

    Boxes below 16 px go to stride 8, below 32 px to stride 16, and the
    rest to stride 32.
    """
    size_px = max(w, h) * input_size
    if size_px <= 0:
        return 0
    level = math.floor(math.log2(size_px / 8.0))
    return max(0, min(level, len(STRIDES) - 1))


def assign_targets(
    boxes: Sequence[GroundTruthBox],
    level_shapes: Sequence[Tuple[int, int]],
    input_size: int,
    num_classes: int,
) -> List[LevelTargets]:
    """Mark cells whose centers fall in each box's central half-size
    sub-box as positive on the routed level.

    A box whose central region captures no cell center falls back to the
    single cell nearest its center.  When boxes contest a cell, the later
    box in input order wins.
    """
    targets = [
        LevelTargets(
            cls=np.zeros((num_classes, h, w), dtype=np.float32),
            box=np.zeros((4, h, w), dtype=np.float32),
            pos=np.zeros((h, w), dtype=bool),
        )
        for (h, w) in level_shapes
    ]
    grids = [
        cell_centers(h, w, stride, input_size)
        for (h, w), stride in zip(level_shapes, STRIDES)
    ]

    for gt in boxes:
        li = route_level(gt.w, gt.h, input_size)
        cx_grid, cy_grid = grids[li]
        stride = STRIDES[li]
        inside = (
            (np.abs(cx_grid - gt.cx) <= gt.w / 4.0)
            & (np.abs(cy_grid - gt.cy) <= gt.h / 4.0)
        )
        if not inside.any():
            # Prefer cells inside the box: distances stay positive there,
            # so the decoded box can still reproduce the target exactly.
            dist2 = (cx_grid - gt.cx) ** 2 + (cy_grid - gt.cy) ** 2
            in_box = (
                (np.abs(cx_grid - gt.cx) < gt.w / 2.0)
                & (np.abs(cy_grid - gt.cy) < gt.h / 2.0)
            )
            if in_box.any():
                dist2 = np.where(in_box, dist2, np.inf)
            flat = np.argmin(dist2)
            inside = np.zeros_like(inside)
            inside.reshape(-1)[flat] = True

        x1, y1 = gt.cx - gt.w / 2.0, gt.cy - gt.h / 2.0
        x2, y2 = gt.cx + gt.w / 2.0, gt.cy + gt.h / 2.0
        scale = input_size / stride
        tgt = targets[li]
        tgt.cls[:, inside] = 0.0
        tgt.cls[gt.class_id, inside] = 1.0
        tgt.box[0, inside] = np.maximum((cx_grid[inside] - x1) * scale, DISTANCE_FLOOR)
        tgt.box[1, inside] = np.maximum((cy_grid[inside] - y1) * scale, DISTANCE_FLOOR)
        tgt.box[2, inside] = np.maximum((x2 - cx_grid[inside]) * scale, DISTANCE_FLOOR)
        tgt.box[3, inside] = np.maximum((y2 - cy_grid[inside]) * scale, DISTANCE_FLOOR)
        tgt.pos[inside] = True
    return targets


def stack_targets(per_image: Sequence[List[LevelTargets]]) -> List[LevelTargets]:
    """Stack single-image targets into batched [N,...] arrays per level."""
    n_levels = len(per_image[0])
    stacked = []
    for li in range(n_levels):
        stacked.append(
            LevelTargets(
                cls=np.stack([t[li].cls for t in per_image]),
                box=np.stack([t[li].box for t in per_image]),
                pos=np.stack([t[li].pos for t in per_image]),
            )
        )
    return stacked
