"""Toy transformer encoder with tap-layer feature export."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from ..errors import ConfigError
from ..numerics import Tensor, broadcast_to, concat, nn, ops
from .config import ViTConfig


@dataclass
class VitOutputs:
    """Patch-token features captured during one encoder pass.

    taps[i] and final hold class-token-stripped grids [N, T, D] so each
    reshapes to a [N, D, S/ps, S/ps] map; class_final is the class token
    after the last block, [N, D].
    """

    taps: List[Tensor]
    final: Tensor
    class_final: Tensor
    grid: int


class TransformerBlock(nn.Module):
    """Pre-norm residual block: x + attn(ln1(x)), then x + mlp(ln2(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiHeadAttention(dim, heads, rng)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Mlp(dim, mlp_ratio * dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


def patchify(x: Tensor, patch_size: int) -> Tensor:
    """[N,3,S,S] -> [N,T,3*ps*ps] raster-ordered patch rows."""
    n, c, h, w = x.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"spatial dims {h}x{w} not divisible by patch {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = x.reshape((n, c, gh, patch_size, gw, patch_size))
    x = x.transpose((0, 2, 4, 1, 3, 5))
    return x.reshape((n, gh * gw, c * patch_size * patch_size))


class VitEncoder(nn.Module):
    """Patch embedding + learned positions + pre-norm transformer stack."""

    def __init__(self, cfg: ViTConfig, input_size: int, rng: np.random.Generator):
        if input_size % cfg.patch_size:
            raise ConfigError(
                f"input size {input_size} not divisible by patch {cfg.patch_size}"
            )
        self.cfg = cfg
        self.input_size = input_size
        self.grid = input_size // cfg.patch_size
        self.n_tokens = self.grid * self.grid
        patch_dim = 3 * cfg.patch_size * cfg.patch_size

        self.patch_embed = nn.Linear(patch_dim, cfg.embed_dim, rng, std=0.02)
        self.cls_token = nn.Parameter(
            rng.normal(0.0, 0.02, size=(1, 1, cfg.embed_dim))
        )
        self.pos_embed = nn.Parameter(
            rng.normal(0.0, 0.02, size=(1, self.n_tokens + 1, cfg.embed_dim))
        )
        self.blocks = [
            TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng)
            for _ in range(cfg.depth)
        ]

    def __call__(self, x: Tensor) -> VitOutputs:
        n = x.shape[0]
        tokens = self.patch_embed(patchify(x, self.cfg.patch_size))
        cls = broadcast_to(self.cls_token, (n, 1, self.cfg.embed_dim))
        tokens = concat([cls, tokens], axis=1)
        tokens = tokens + self.pos_embed

        taps: List[Tensor] = []
        tap_set = set(self.cfg.tap_layers)
        for i, block in enumerate(self.blocks):
            tokens = block(tokens)
            if i in tap_set:
                taps.append(tokens[:, 1:, :])
        final = tokens[:, 1:, :]
        class_final = tokens[:, 0, :]
        return VitOutputs(taps=taps, final=final, class_final=class_final, grid=self.grid)
