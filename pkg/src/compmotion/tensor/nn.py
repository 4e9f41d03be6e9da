"""Small layer library on top of the tensor ops.

Layers own no arrays themselves: every weight lives in a shared
:class:`ParameterStore` under a dot-separated prefix, so one checkpoint file
covers a whole model.
"""
from __future__ import annotations

import math

import numpy as np

from . import core as F
from .core import Tensor
from .params import ParameterStore


class Module:
    def __init__(self, store: ParameterStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def param(self, name: str, value) -> Tensor:
        return self.store.add(f"{self.prefix}.{name}", value)

    def parameters(self) -> dict[str, Tensor]:
        return self.store.subset(self.prefix + ".")


class Linear(Module):
    def __init__(self, store, prefix, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, init_scale: float = 1.0):
        super().__init__(store, prefix)
        self.d_in, self.d_out = d_in, d_out
        std = init_scale / math.sqrt(d_in)
        self.weight = self.param("weight", rng.normal(0.0, std, size=(d_in, d_out)))
        self.bias = self.param("bias", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise F.ShapeError(f"linear[{self.prefix}]", x.shape, self.weight.shape)
        y = F.matmul(x, self.weight)
        if self.bias is not None:
            y = F.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, store, prefix, dim: int):
        super().__init__(store, prefix)
        self.gamma = self.param("gamma", np.ones(dim))
        self.beta = self.param("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)


class Attention(Module):
    """Multi-head attention; queries from ``x``, keys/values from ``ctx``."""

    def __init__(self, store, prefix, width: int, heads: int, rng, ctx_dim: int | None = None):
        super().__init__(store, prefix)
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        ctx_dim = ctx_dim or width
        self.width, self.heads = width, heads
        self.q = Linear(store, f"{prefix}.q", width, width, rng)
        self.k = Linear(store, f"{prefix}.k", ctx_dim, width, rng)
        self.v = Linear(store, f"{prefix}.v", ctx_dim, width, rng)
        self.o = Linear(store, f"{prefix}.o", width, width, rng)

    def _split(self, t: Tensor) -> Tensor:
        b, n, _ = t.shape
        return F.transpose(F.reshape(t, (b, n, self.heads, self.width // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, ctx: Tensor | None = None) -> Tensor:
        ctx = x if ctx is None else ctx
        if x.ndim != 3 or ctx.ndim != 3 or x.shape[0] != ctx.shape[0]:
            raise F.ShapeError(f"attention[{self.prefix}]", x.shape, ctx.shape)
        b, n, _ = x.shape
        q = self._split(self.q(x))
        k = self._split(self.k(ctx))
        v = self._split(self.v(ctx))
        dh = self.width // self.heads
        scores = F.scale(F.matmul(q, F.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
        h = F.matmul(F.softmax(scores), v)
        h = F.reshape(F.transpose(h, (0, 2, 1, 3)), (b, n, self.width))
        return self.o(h)


class FeedForward(Module):
    def __init__(self, store, prefix, width: int, rng, mult: int = 4):
        super().__init__(store, prefix)
        self.fc1 = Linear(store, f"{prefix}.fc1", width, mult * width, rng)
        self.fc2 = Linear(store, f"{prefix}.fc2", mult * width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm self-attention + feed-forward with residuals."""

    def __init__(self, store, prefix, width: int, heads: int, rng, ff_mult: int = 4):
        super().__init__(store, prefix)
        self.ln1 = LayerNorm(store, f"{prefix}.ln1", width)
        self.attn = Attention(store, f"{prefix}.attn", width, heads, rng)
        self.ln2 = LayerNorm(store, f"{prefix}.ln2", width)
        self.ff = FeedForward(store, f"{prefix}.ff", width, rng, ff_mult)

    def __call__(self, x: Tensor) -> Tensor:
        x = F.add(x, self.attn(self.ln1(x)))
        return F.add(x, self.ff(self.ln2(x)))


def shift_time(x: Tensor, offset: int) -> Tensor:
    """Shift (B, L, C) along time by ``offset`` frames with zero fill."""
    b, n, c = x.shape
    if offset == 0:
        return x
    pad = F.Tensor(np.zeros((b, abs(offset), c), dtype=x.dtype))
    if offset > 0:
        return F.concat([pad, F.slice_axis(x, 1, 0, n - offset)], axis=1)
    return F.concat([F.slice_axis(x, 1, -offset, n), pad], axis=1)


class Conv1d(Module):
    """Kernel-3 'same' temporal convolution over (B, L, C) as one matmul."""

    def __init__(self, store, prefix, c_in: int, c_out: int, rng):
        super().__init__(store, prefix)
        self.proj = Linear(store, f"{prefix}.proj", 3 * c_in, c_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(F.concat([shift_time(x, 1), x, shift_time(x, -1)], axis=-1))


class ResConvBlock(Module):
    def __init__(self, store, prefix, width: int, rng):
        super().__init__(store, prefix)
        self.conv1 = Conv1d(store, f"{prefix}.conv1", width, width, rng)
        self.conv2 = Conv1d(store, f"{prefix}.conv2", width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return F.add(x, self.conv2(F.gelu(self.conv1(x))))


def downsample2(x: Tensor, proj: Linear) -> Tensor:
    """Halve the time axis by merging frame pairs into channels, then project."""
    b, n, c = x.shape
    if n % 2:
        raise F.ShapeError("downsample2", x.shape, detail="odd length")
    return proj(F.reshape(x, (b, n // 2, 2 * c)))


def upsample2(x: Tensor, proj: Linear) -> Tensor:
    """Double the time axis: project to 2C channels, then split into frame pairs."""
    b, n, _ = x.shape
    y = proj(x)
    return F.reshape(y, (b, 2 * n, y.shape[-1] // 2))
