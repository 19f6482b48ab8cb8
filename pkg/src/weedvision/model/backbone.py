"""Strided convolutional pyramid producing P3/P4/P5 feature maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ..errors import ConfigError, ShapeError
from ..numerics import Tensor, nn, ops

STRIDES = (8, 16, 32)


@dataclass
class FeaturePyramid:
    """Uniform-channel maps at strides 8, 16, and 32."""

    p3: Tensor
    p4: Tensor
    p5: Tensor

    def __post_init__(self):
        shapes = [t.shape for t in (self.p3, self.p4, self.p5)]
        if any(len(s) != 4 for s in shapes):
            raise ShapeError(f"pyramid levels must be 4-D, got {shapes}")
        for (_, c_a, h_a, w_a), (_, c_b, h_b, w_b) in zip(shapes, shapes[1:]):
            if c_a != c_b:
                raise ShapeError(f"channel counts differ across levels: {shapes}")
            if h_a != 2 * h_b or w_a != 2 * w_b:
                raise ShapeError(f"levels must halve spatially: {shapes}")

    def levels(self) -> Tuple[Tensor, Tensor, Tensor]:
        return (self.p3, self.p4, self.p5)

    @property
    def channels(self) -> int:
        return self.p3.shape[1]


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = nn.Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, rng, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(ops.gelu(self.conv1(x)))


class ConvPyramidBackbone(nn.Module):
    """Stride-2 conv stem and stages with widths C/4, C/2, C, exported as a
    uniform-C pyramid through 1x1 lateral convs."""

    def __init__(self, channels: int, rng: np.random.Generator):
        if channels % 8:
            raise ConfigError(f"backbone channels {channels} must be divisible by 8")
        c8, c4, c2 = channels // 8, channels // 4, channels // 2
        self.stem = nn.Conv2d(3, c8, 3, rng, stride=2, padding=1)
        self.down1 = nn.Conv2d(c8, c8, 3, rng, stride=2, padding=1)
        self.down2 = nn.Conv2d(c8, c4, 3, rng, stride=2, padding=1)
        self.res3 = ResidualBlock(c4, rng)
        self.down3 = nn.Conv2d(c4, c2, 3, rng, stride=2, padding=1)
        self.res4 = ResidualBlock(c2, rng)
        self.down4 = nn.Conv2d(c2, channels, 3, rng, stride=2, padding=1)
        self.res5 = ResidualBlock(channels, rng)
        self.lat3 = nn.Conv2d(c4, channels, 1, rng)
        self.lat4 = nn.Conv2d(c2, channels, 1, rng)
        self.lat5 = nn.Conv2d(channels, channels, 1, rng)

    def __call__(self, x: Tensor) -> FeaturePyramid:
        if len(x.shape) != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected [N,3,H,W] input, got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ConfigError(f"input dims {x.shape[2:]}, must be divisible by 32")
        x = ops.gelu(self.stem(x))
        x = ops.gelu(self.down1(x))
        s3 = self.res3(ops.gelu(self.down2(x)))
        s4 = self.res4(ops.gelu(self.down3(s3)))
        s5 = self.res5(ops.gelu(self.down4(s4)))
        return FeaturePyramid(self.lat3(s3), self.lat4(s4), self.lat5(s5))
