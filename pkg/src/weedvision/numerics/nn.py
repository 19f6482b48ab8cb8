"""Parameters, modules, and the primitive trainable layers."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ShapeError
from . import ops
from .tensor import Tensor, concat, swapaxes


class Parameter(Tensor):
    """A trainable tensor with a dotted-path name unique within its model."""

    __slots__ = ("name", "velocity")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.velocity = None

    @property
    def tensor(self) -> Tensor:
        return self

    def __repr__(self):
        return f"Parameter({self.name or '<unbound>'}, shape={self.shape})"


class Module:
    """Minimal container: children are discovered from instance attributes."""

    def _members(self):
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                yield attr, value
            elif isinstance(value, Module):
                yield attr, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{attr}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, member in self._members():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(member, Parameter):
                yield full, member
            else:
                yield from member.named_parameters(full)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def bind_parameter_names(self, prefix: str = ""):
        """Stamp dotted-path names onto every parameter; names must be unique."""
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ConfigError(f"duplicate parameter name: {name}")
            seen.add(name)
            p.name = name

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def count_params(self) -> int:
        return sum(p.numel for p in self.parameters())


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, std: float | None = None):
        if std is None:
            std = 1.0 / np.sqrt(in_dim)
        self.weight = Parameter(rng.normal(0.0, std, size=(out_dim, in_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        fan_in = in_ch * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        self.weight = Parameter(rng.normal(0.0, std, size=(out_ch, in_ch, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention over [N, T, D] token sequences."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"embed dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = Linear(dim, 3 * dim, rng, std=0.02)
        self.proj = Linear(dim, dim, rng, std=0.02)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.dim:
            raise ShapeError(f"attention expects [N,T,{self.dim}], got {x.shape}")
        n, t, d = x.shape
        h, hd = self.heads, self.head_dim
        qkv = self.qkv(x).reshape((n, t, 3, h, hd)).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]              # each [N, h, T, hd]
        att = (q @ swapaxes(k, -1, -2)) * (1.0 / np.sqrt(hd))
        att = ops.softmax(att, axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape((n, t, d))
        return self.proj(out)

    def attention_weights(self, x: Tensor) -> np.ndarray:
        """Forward the softmax attention map only (diagnostic, no grad)."""
        n, t, d = x.shape
        h, hd = self.heads, self.head_dim
        qkv = (x.data @ self.qkv.weight.data.T + self.qkv.bias.data)
        qkv = qkv.reshape(n, t, 3, h, hd).transpose(2, 0, 3, 1, 4)
        q, k = qkv[0], qkv[1]
        logits = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(hd)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)


def multi_head_attention(x: Tensor, heads: int, params: MultiHeadAttention) -> Tensor:
    """Functional form of the attention layer (contract alias)."""
    if params.heads != heads:
        raise ConfigError(f"layer built with {params.heads} heads, called with {heads}")
    return params(x)


class Mlp(Module):
    """Two-layer feed-forward block with GELU."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng, std=0.02)
        self.fc2 = Linear(hidden, dim, rng, std=0.02)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))
