"""Concept-text encoder and the embedding-partition machinery.

Texts are short token sequences over a fixed 9-token vocabulary. ``encode``
maps them to (L_c, d_c) = (4, 64) embeddings. The partition/projection
helpers turn one holistic embedding into K concept embeddings for the
self-supervised and consistency-supervised training variants.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import GESTURES, PATHS
from .tensor import core as F
from .tensor.core import Tensor
from .tensor.nn import LayerNorm, Linear, Module, TransformerLayer
from .tensor.params import ParameterStore

TEXT_LEN = 4
TEXT_DIM = 64
VOCAB: dict[str, int] = {"PAD": 0, **{name: i + 1 for i, name in enumerate(PATHS + GESTURES)}}

_ortho_degenerate = {"count": 0}


def tokenize(tokens: Sequence[str]) -> np.ndarray:
    tokens = list(tokens)
    if len(tokens) > TEXT_LEN:
        raise ValueError(f"at most {TEXT_LEN} tokens, got {len(tokens)}")
    for tok in tokens:
        if tok not in VOCAB:
            raise ValueError(f"unknown token {tok!r}")
    tokens += ["PAD"] * (TEXT_LEN - len(tokens))
    return np.array([VOCAB[t] for t in tokens], dtype=np.int64)


def holistic_tokens(pair) -> tuple[str, str]:
    return tuple(pair)


class TextEncoder(Module):
    """Token + position embedding followed by one pre-norm transformer layer."""

    def __init__(self, store: ParameterStore, prefix: str, rng: np.random.Generator,
                 dim: int = TEXT_DIM, heads: int = 4):
        super().__init__(store, prefix)
        self.dim = dim
        self.embed = self.param("embed", rng.normal(0.0, 1.0, size=(len(VOCAB), dim)))
        self.pos = self.param("pos", rng.normal(0.0, 0.1, size=(TEXT_LEN, dim)))
        self.layer = TransformerLayer(store, f"{prefix}.layer", dim, heads, rng)
        self.ln = LayerNorm(store, f"{prefix}.ln", dim)

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
        h = F.add(F.embedding(self.embed, ids), self.pos)
        h = self.ln(self.layer(h))
        return F.reshape(h, h.shape[1:]) if single else h

    def encode(self, tokens) -> Tensor:
        """Embed one token list -> (L_c, d_c), or a list of token lists -> (B, L_c, d_c)."""
        if tokens and isinstance(tokens[0], str):
            return self(tokenize(tokens))
        return self(np.stack([tokenize(t) for t in tokens]))


def partition(c: Tensor, k: int) -> list[Tensor]:
    """Split the last (feature) axis into ``k`` equal column blocks."""
    d = c.shape[-1]
    if k < 1 or d % k:
        raise ValueError(f"partition: K={k} does not divide embedding width {d}")
    if k == 1:
        return [c]
    w = d // k
    return [F.slice_axis(c, -1, i * w, (i + 1) * w) for i in range(k)]


def _check_subs(op: str, subs: Sequence[Tensor]) -> None:
    if not subs:
        raise F.ShapeError(op, detail="no sub-embeddings")
    for s in subs[1:]:
        if s.shape != subs[0].shape:
            raise F.ShapeError(op, subs[0].shape, s.shape)


class OSSProjector(Module):
    """One shared affine layer lifting each d_c/K sub-embedding back to d_c."""

    def __init__(self, store, prefix, rng, k: int = 2, dim: int = TEXT_DIM):
        super().__init__(store, prefix)
        self.k, self.dim = k, dim
        self.fc = Linear(store, f"{prefix}.fc", dim // k, dim, rng)

    def __call__(self, subs: Sequence[Tensor]) -> list[Tensor]:
        _check_subs("project_oss", subs)
        if subs[0].shape[-1] != self.dim // self.k:
            raise F.ShapeError("project_oss", subs[0].shape, self.fc.weight.shape)
        return [self.fc(s) for s in subs]


class SCProjector(Module):
    """Shared up-projection followed by a two-layer pre-norm transformer."""

    def __init__(self, store, prefix, rng, k: int = 2, dim: int = TEXT_DIM, heads: int = 4):
        super().__init__(store, prefix)
        self.k, self.dim = k, dim
        self.up = Linear(store, f"{prefix}.up", dim // k, dim, rng)
        self.layers = [TransformerLayer(store, f"{prefix}.layers.{i}", dim, heads, rng) for i in range(2)]
        self.ln = LayerNorm(store, f"{prefix}.ln", dim)

    def __call__(self, subs: Sequence[Tensor]) -> list[Tensor]:
        _check_subs("project_sc", subs)
        if subs[0].shape[-1] != self.dim // self.k:
            raise F.ShapeError("project_sc", subs[0].shape, self.up.weight.shape)
        out = []
        for s in subs:
            single = s.ndim == 2
            h = self.up(F.reshape(s, (1,) + s.shape) if single else s)
            for layer in self.layers:
                h = layer(h)
            h = self.ln(h)
            out.append(F.reshape(h, h.shape[1:]) if single else h)
        return out


def _flatten_batch(c: Tensor, per_position: bool) -> Tensor:
    # (L_c, d) -> (1, L_c*d); (B, L_c, d) -> (B, L_c*d); per_position keeps tokens apart
    if c.ndim == 2:
        c = F.reshape(c, (1,) + c.shape)
    b, n, d = c.shape
    if per_position:
        return F.reshape(c, (b * n, d))
    return F.reshape(c, (b, n * d))


def ortho_loss(concepts: Sequence[Tensor], per_position: bool = False) -> Tensor:
    """Mean squared cosine similarity over unordered pairs of concept embeddings.

    A zero-norm embedding contributes cosine 0 and bumps a degenerate counter
    (see :func:`ortho_degenerate_count`).
    """
    k = len(concepts)
    if k < 2:
        raise ValueError("ortho_loss needs K >= 2")
    flat = [_flatten_batch(c, per_position) for c in concepts]
    norms = [F.l2norm(f, axis=-1) for f in flat]
    terms = []
    for i in range(k):
        for j in range(i + 1, k):
            dot = F.sum(F.mul(flat[i], flat[j]), axis=-1)
            den = F.mul(norms[i], norms[j])
            zero = den.data == 0
            if zero.any():
                _ortho_degenerate["count"] += int(zero.sum())
                den = F.add(den, Tensor(zero.astype(den.dtype)))
            cos = F.div(dot, den)
            terms.append(F.mean(F.square(cos)))
    return F.scale(F.sum_all(terms), 1.0 / len(terms))


def ortho_degenerate_count() -> int:
    return _ortho_degenerate["count"]


def consistency_loss(predefined: Sequence[Tensor], projected: Sequence[Tensor]) -> Tensor:
    """Smooth-L1 between the predefined concept embeddings and the projected ones."""
    if len(predefined) != len(projected):
        raise ValueError("consistency_loss: concept sets differ in size")
    terms = [F.smooth_l1(p, c) for p, c in zip(predefined, projected)]
    return F.scale(F.sum_all(terms), 1.0 / len(terms))
