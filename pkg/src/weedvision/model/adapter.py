"""Bridges from transformer token grids to pyramid feature maps."""

from __future__ import annotations

import math
from typing import List, Optional

import numpy as np

from ..errors import ShapeError
from ..numerics import Tensor, as_tensor, nn, ops
from .backbone import STRIDES, FeaturePyramid


def tokens_to_map(tokens: Tensor) -> Tensor:
    """[N,T,D] -> [N,D,g,g] for a square token grid (T = g*g)."""
    n, t, d = tokens.shape
    g = math.isqrt(t)
    if g * g != t:
        raise ShapeError(f"token count {t} is not a square grid")
    x = tokens.reshape((n, g, g, d))
    return x.transpose((0, 3, 1, 2))


def resample_map(x: Tensor, target_hw: int) -> Tensor:
    """Nearest upsample or average pool a square map to target size.

    The size ratio must be an integer in one direction or the other.
    """
    src = x.shape[2]
    if x.shape[3] != src:
        raise ShapeError(f"expected square map, got {x.shape}")
    if target_hw == src:
        return x
    if target_hw > src:
        if target_hw % src:
            raise ShapeError(f"cannot upsample {src} to {target_hw}: non-integer factor")
        return ops.upsample_nearest(x, target_hw // src)
    if src % target_hw:
        raise ShapeError(f"cannot downsample {src} to {target_hw}: non-integer factor")
    return ops.avg_pool(x, src // target_hw)


class VitProjection(nn.Module):
    """Resample a token map to a pyramid stride, then 1x1-conv to C channels."""

    def __init__(self, dim: int, channels: int, rng: np.random.Generator):
        self.proj = nn.Conv2d(dim, channels, 1, rng)

    def __call__(self, tokens: Tensor, input_size: int, stride: int) -> Tensor:
        target = input_size // stride
        return self.proj(resample_map(tokens_to_map(tokens), target))


class StaAdapter(nn.Module):
    """Expands the final token map into a three-scale pyramid.

    The token map is first resampled to stride 16; P3 is a conv over its
    2x upsample, P4 a conv at native scale, and P5 a strided conv down.
    """

    def __init__(self, dim: int, channels: int, rng: np.random.Generator):
        self.p3_conv = nn.Conv2d(dim, channels, 3, rng, padding=1)
        self.p4_conv = nn.Conv2d(dim, channels, 3, rng, padding=1)
        self.p5_conv = nn.Conv2d(dim, channels, 3, rng, stride=2, padding=1)

    def __call__(self, final_tokens: Tensor, input_size: int) -> FeaturePyramid:
        base = resample_map(tokens_to_map(final_tokens), input_size // 16)
        p3 = self.p3_conv(ops.upsample_nearest(base, 2))
        p4 = self.p4_conv(base)
        p5 = self.p5_conv(base)
        return FeaturePyramid(p3, p4, p5)


class FusionBlock(nn.Module):
    """Gated sum of two matched pyramids, smoothed per level by a 3x3 conv.

    Each level computes conv(y + g * v) with its gate g starting at zero
    and the conv starting as an identity kernel, so the fused output
    initially equals the first pyramid and the second branch enters only
    as the gates open during training.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.convs = [nn.Conv2d(channels, channels, 3, rng, padding=1) for _ in STRIDES]
        for conv in self.convs:
            conv.weight.data[:] = 0.0
            conv.weight.data[np.arange(channels), np.arange(channels), 1, 1] = 1.0
        self.gates = [nn.Parameter(np.zeros(1)) for _ in STRIDES]

    def __call__(self, yolo: FeaturePyramid, vit_levels: List[Tensor]) -> FeaturePyramid:
        if len(vit_levels) != 3:
            raise ShapeError(f"expected 3 projected levels, got {len(vit_levels)}")
        fused = []
        for conv, gate, y, v in zip(self.convs, self.gates, yolo.levels(), vit_levels):
            if y.shape != v.shape:
                raise ShapeError(f"cannot fuse {y.shape} with {v.shape}")
            fused.append(conv(y + gate * v))
        return FeaturePyramid(*fused)


def alignment_loss(
    yolo_levels, vit_levels, detach_vit: bool = False
) -> Tensor:
    """Sum over pyramid levels of the mean squared feature gap."""
    ys = list(yolo_levels.levels() if isinstance(yolo_levels, FeaturePyramid) else yolo_levels)
    vs = list(vit_levels.levels() if isinstance(vit_levels, FeaturePyramid) else vit_levels)
    if len(ys) != len(vs):
        raise ShapeError(f"level count mismatch: {len(ys)} vs {len(vs)}")
    total: Optional[Tensor] = None
    for y, v in zip(ys, vs):
        if y.shape != v.shape:
            raise ShapeError(f"cannot align {y.shape} with {v.shape}")
        if detach_vit:
            v = as_tensor(v.data.copy())
        term = ops.mse(y, v)
        total = term if total is None else total + term
    return total
