"""Layers built on the autograd tensor: linear maps, normalization, attention,
AdaLN, feed-forward blocks and convolutions."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as F
from .tensor import ShapeError, Tensor


class Module:
    training: bool = False
    _rng: np.random.Generator | None = None

    def parameters_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, rng: np.random.Generator) -> "Module":
        for m in self.modules():
            m.training = True
            m._rng = rng
        return self

    def eval(self) -> "Module":
        for m in self.modules():
            m.training = False
            m._rng = None
        return self

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(arr: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero_init: bool = False, dtype=np.float32):
        bound = 1.0 / math.sqrt(d_in)
        w = np.zeros((d_in, d_out)) if zero_init else rng.uniform(-bound, bound, (d_in, d_out))
        self.weight = param(w, dtype)
        self.bias = param(np.zeros(d_out), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, affine: bool = True, dtype=np.float32):
        self.d = d
        self.weight = param(np.ones(d), dtype) if affine else None
        self.bias = param(np.zeros(d), dtype) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d:
            raise ShapeError(f"layer_norm: expected last dim {self.d}, got {x.shape}")
        return F.layer_norm(x, self.weight, self.bias)


class Dropout(Module):
    def __init__(self, p: float):
        self.p = p

    def forward(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.p, self.training, self._rng)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, scale: float = 0.02, dtype=np.float32):
        self.weight = param(rng.normal(0.0, scale, (n, d)), dtype)

    def forward(self, ids: np.ndarray) -> Tensor:
        return F.embedding(self.weight, ids)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1, pad: int = 0,
                 zero_init: bool = False, dtype=np.float32):
        fan_in = c_in * k * k
        bound = 1.0 / math.sqrt(fan_in)
        w = np.zeros((c_out, c_in, k, k)) if zero_init else rng.uniform(-bound, bound, (c_out, c_in, k, k))
        self.weight = param(w, dtype)
        self.bias = param(np.zeros(c_out), dtype)
        self.stride, self.pad = stride, pad

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``heads`` heads.

    Self-attention when ``kv`` is omitted. ``kv_mask`` is a boolean
    ``(B, Lk)`` array marking valid key positions.
    """

    def __init__(self, width: int, heads: int, rng: np.random.Generator, kv_width: int | None = None, dtype=np.float32):
        if width % heads:
            raise ShapeError(f"attention width {width} is not divisible by {heads} heads")
        kv_width = kv_width or width
        self.width, self.heads, self.head_dim = width, heads, width // heads
        self.q = Linear(width, width, rng, dtype=dtype)
        self.k = Linear(kv_width, width, rng, dtype=dtype)
        self.v = Linear(kv_width, width, rng, dtype=dtype)
        self.out = Linear(width, width, rng, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, kv: Tensor | None = None, kv_mask: np.ndarray | None = None) -> Tensor:
        kv = x if kv is None else kv
        if x.ndim != 3 or kv.ndim != 3:
            raise ShapeError(f"attention expects (B, L, D) inputs, got {x.shape} and {kv.shape}")
        b, n, _ = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(kv)), self._split(self.v(kv))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
        add_mask = None
        if kv_mask is not None:
            add_mask = np.where(np.asarray(kv_mask, bool), 0.0, -1e9).astype(scores.dtype)[:, None, None, :]
        attn = F.softmax(scores, axis=-1, additive_mask=add_mask)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, self.width)
        return self.out(ctx)


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape ``(len(t), dim)``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


class AdaLN(Module):
    """Layer norm whose scale and shift are regressed from the timestep.

    ``h = LN(e) * (1 + scale(emb(t))) + shift(emb(t))``. The modulation head is
    zero-initialized so a fresh module reduces to plain layer normalization.
    """

    def __init__(self, width: int, rng: np.random.Generator, time_dim: int | None = None, dtype=np.float32):
        self.width = width
        self.time_dim = time_dim or width
        self.time1 = Linear(self.time_dim, width, rng, dtype=dtype)
        self.time2 = Linear(width, width, rng, dtype=dtype)
        self.modulation = Linear(width, 2 * width, rng, zero_init=True, dtype=dtype)

    def forward(self, e: Tensor, t: np.ndarray) -> Tensor:
        t = np.broadcast_to(np.asarray(t), (e.shape[0],))
        temb = Tensor(timestep_embedding(t, self.time_dim).astype(e.dtype))
        mod = self.modulation(F.silu(self.time2(F.silu(self.time1(temb)))))
        scale = mod[:, None, : self.width]
        shift = mod[:, None, self.width :]
        h = F.layer_norm(e)
        return h * (scale + 1.0) + shift


class FeedForward(Module):
    """Residual MLP with pre-normalization: ``x + W2 gelu(W1 LN(x))``."""

    def __init__(self, width: int, hidden: int, rng: np.random.Generator, dropout: float = 0.0, dtype=np.float32):
        self.norm = LayerNorm(width, dtype=dtype)
        self.fc1 = Linear(width, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, width, rng, dtype=dtype)
        self.drop = Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.drop(self.fc2(F.gelu(self.fc1(self.norm(x)))))
