"""Compositional latent diffusion: schedule, denoiser, decompositional
cross-attention, composed noise prediction, the three training variants and
the holistic/decomposed samplers.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import decompose_label
from .tensor import core as F
from .tensor.core import Tape, Tensor
from .tensor.nn import Attention, FeedForward, LayerNorm, Linear, Module
from .tensor.params import ParameterStore, adamw_step, clip_grad_norm, read_checkpoint
from .text import (TEXT_DIM, OSSProjector, SCProjector, TextEncoder, consistency_loss,
                   ortho_loss, partition)
from .vae import LATENT_DIM, LATENT_LEN, MotionVAE

log = logging.getLogger(__name__)

VARIANTS = ("exp", "oss", "sc")
MODES = ("latent", "semantic")


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by timestep t = 1..T (stored at position t - 1)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_var: np.ndarray
    eta: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def at(self, table: str, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}")
        return getattr(self, table)[t - 1]


def _tables(betas: np.ndarray) -> NoiseSchedule:
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    post = betas * (1.0 - prev) / (1.0 - alpha_bars)
    post[0] = betas[0]
    eta = (1.0 - alphas) / np.sqrt(1.0 - alpha_bars)
    return NoiseSchedule(betas, alphas, alpha_bars, post, eta)


def make_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with all derived tables in float64."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_1 <= beta_T < 1.0:
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    return _tables(np.linspace(beta_1, beta_T, T, dtype=np.float64))


def respace(schedule: NoiseSchedule, steps: int) -> tuple[np.ndarray, NoiseSchedule]:
    """Uniform-stride subsequence of timesteps and the schedule that preserves its alpha-bars."""
    if steps > schedule.T:
        raise ValueError(f"steps={steps} exceeds T={schedule.T}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == schedule.T:
        return np.arange(1, schedule.T + 1), schedule
    ts = np.unique(np.round(np.linspace(1, schedule.T, steps)).astype(np.int64))
    abar = schedule.alpha_bars[ts - 1]
    prev = np.concatenate([[1.0], abar[:-1]])
    return ts, _tables(1.0 - abar / prev)


def q_sample(schedule: NoiseSchedule, z0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with t broadcast over the leading axis."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"q_sample: z0 {z0.shape} and eps {eps.shape} differ")
    ab = schedule.at("alpha_bars", t)
    ab = np.reshape(ab, np.shape(ab) + (1,) * (z0.ndim - np.ndim(ab)))
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype)


# ---------------------------------------------------------------------------
# configs


@dataclass
class DenoiserConfig:
    layers: int = 5
    width: int = 256
    heads: int = 4
    ff_mult: int = 4
    latent_len: int = LATENT_LEN
    latent_dim: int = LATENT_DIM
    text_dim: int = TEXT_DIM

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass
class VariantConfig:
    variant: str = "exp"
    mode: str = "latent"
    K: int = 2
    tau: float = 0.7
    alpha_o: float | None = None      # None -> 2.0 latent / 1.0 semantic
    alpha_sc: float = 1.0
    aggregation: str = "mean"
    ortho_per_position: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.aggregation not in ("mean", "sum"):
            raise ValueError("aggregation must be 'mean' or 'sum'")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.alpha_o is None:
            self.alpha_o = 2.0 if self.mode == "latent" else 1.0
        if self.alpha_o < 0 or self.alpha_sc < 0:
            raise ValueError("loss weights must be non-negative")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.variant in ("exp", "sc") and self.K != 2:
            raise ValueError(f"{self.variant} uses the two predefined concepts, so K must be 2")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 2e-4
    lr_final: float = 2e-5
    decay_after: int = 50_000
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    T: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02
    log_every: int = 50

    def lr_at(self, step: int) -> float:
        return self.lr if step < self.decay_after else self.lr_final


# ---------------------------------------------------------------------------
# denoiser


class DenoiserBlock(Module):
    def __init__(self, store, prefix, cfg: DenoiserConfig, rng):
        super().__init__(store, prefix)
        w = cfg.width
        self.ln1 = LayerNorm(store, f"{prefix}.ln1", w)
        self.self_attn = Attention(store, f"{prefix}.self_attn", w, cfg.heads, rng)
        self.ln2 = LayerNorm(store, f"{prefix}.ln2", w)
        self.cross_attn = Attention(store, f"{prefix}.cross_attn", w, cfg.heads, rng, ctx_dim=cfg.text_dim)
        self.ln3 = LayerNorm(store, f"{prefix}.ln3", w)
        self.ff = FeedForward(store, f"{prefix}.ff", w, rng, cfg.ff_mult)

    def __call__(self, h: Tensor, concepts: Sequence[Tensor], aggregation: str) -> Tensor:
        h = F.add(h, self.self_attn(self.ln1(h)))
        h = F.add(h, dca(self.cross_attn, self.ln2(h), concepts, aggregation))
        return F.add(h, self.ff(self.ln3(h)))


def dca(attn: Attention, x: Tensor, concepts: Sequence[Tensor], aggregation: str = "mean") -> Tensor:
    """Run one cross-attention per concept embedding (shared weights) and aggregate.

    With a single concept this is exactly the plain cross-attention.
    """
    if not concepts:
        raise ValueError("dca: empty concept set")
    for c in concepts[1:]:
        if c.shape != concepts[0].shape:
            raise F.ShapeError("dca", concepts[0].shape, c.shape)
    branches = [attn(x, c) for c in concepts]
    if len(branches) == 1:
        return branches[0]
    out = F.sum_all(branches)
    return F.scale(out, 1.0 / len(branches)) if aggregation == "mean" else out


class Denoiser(Module):
    """Transformer noise predictor over the (L', d_z) latent sequence."""

    def __init__(self, store: ParameterStore, prefix: str = "denoiser", config: DenoiserConfig | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__(store, prefix)
        self.config = cfg = config or DenoiserConfig()
        rng = rng or np.random.default_rng(0)
        w = cfg.width
        self.inp = Linear(store, f"{prefix}.inp", cfg.latent_dim, w, rng)
        self.pos = self.param("pos", rng.normal(0.0, 0.02, size=(cfg.latent_len, w)))
        self.time1 = Linear(store, f"{prefix}.time1", w, w, rng)
        self.time2 = Linear(store, f"{prefix}.time2", w, w, rng)
        self.blocks = [DenoiserBlock(store, f"{prefix}.blocks.{i}", cfg, rng) for i in range(cfg.layers)]
        self.ln_out = LayerNorm(store, f"{prefix}.ln_out", w)
        self.out = Linear(store, f"{prefix}.out", w, cfg.latent_dim, rng, init_scale=0.1)

    def __call__(self, z_t: Tensor, concepts: Sequence[Tensor], t, aggregation: str = "mean") -> Tensor:
        cfg = self.config
        if z_t.ndim != 3 or z_t.shape[1:] != (cfg.latent_len, cfg.latent_dim):
            raise F.ShapeError("denoise_eps", z_t.shape, (cfg.latent_len, cfg.latent_dim))
        b = z_t.shape[0]
        for c in concepts:
            if c.ndim != 3 or c.shape[0] != b or c.shape[2] != cfg.text_dim:
                raise F.ShapeError("denoise_eps", z_t.shape, c.shape, detail="condition")
        t = np.broadcast_to(np.asarray(t), (b,))
        temb = F.timestep_embedding(t, cfg.width)
        temb = self.time2(F.gelu(self.time1(Tensor(temb.data.astype(z_t.dtype)))))
        h = F.add(F.add(self.inp(z_t), self.pos), F.reshape(temb, (b, 1, cfg.width)))
        for blk in self.blocks:
            h = blk(h, concepts, aggregation)
        return self.out(self.ln_out(h))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=F.get_default_dtype()))


def denoise_eps(denoiser: Denoiser, z_t, c, t) -> Tensor:
    """Single-condition noise prediction eps_theta(z_t, c, t)."""
    return denoiser(_as_tensor(z_t), [_as_tensor(c)], t)


def compose_eps(denoiser: Denoiser, z_t, concepts: Sequence, t, mode: str = "latent",
                aggregation: str = "mean") -> Tensor:
    """Composed noise prediction over a concept set.

    latent: aggregate full denoiser predictions, one per concept.
    semantic: one forward pass whose cross-attention layers run as DCA over the set.
    """
    z_t = _as_tensor(z_t)
    concepts = [_as_tensor(c) for c in concepts]
    if not concepts:
        raise ValueError("compose_eps: empty concept set")
    if mode == "semantic":
        return denoiser(z_t, concepts, t, aggregation)
    if mode != "latent":
        raise ValueError(f"unknown mode {mode!r}")
    k = len(concepts)
    if k == 1:
        return denoiser(z_t, concepts, t)
    b = z_t.shape[0]
    t = np.broadcast_to(np.asarray(t), (b,))
    eps = denoiser(F.concat([z_t] * k, axis=0), [F.concat(concepts, axis=0)], np.tile(t, k))
    eps = F.sum(F.reshape(eps, (k, b) + z_t.shape[1:]), axis=0)
    return F.scale(eps, 1.0 / k) if aggregation == "mean" else eps


# ---------------------------------------------------------------------------
# text conditions


class TextBank:
    """Frozen encoder outputs for every concept and holistic label."""

    def __init__(self, encoder: TextEncoder):
        self.encoder = encoder
        self._cache: dict[tuple[str, ...], np.ndarray] = {}

    def get(self, tokens: Sequence[str]) -> np.ndarray:
        key = tuple(tokens)
        if key not in self._cache:
            self._cache[key] = self.encoder.encode(list(key)).data.copy()
        return self._cache[key]

    def batch(self, token_lists: Sequence[Sequence[str]]) -> np.ndarray:
        return np.stack([self.get(t) for t in token_lists])

    def predefined(self, pairs: Sequence[tuple[str, str]]) -> list[np.ndarray]:
        """C^P: one (B, L_c, d_c) array per decomposed concept."""
        parts = [decompose_label(p) for p in pairs]
        return [self.batch([p[k] for p in parts]) for k in range(2)]

    def holistic(self, pairs: Sequence[tuple[str, str]]) -> np.ndarray:
        return self.batch([tuple(p) for p in pairs])


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class StepResult:
    mse: float
    ortho: float
    sc: float
    total: float
    grad_norm: float = 0.0
    lr: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


class CompositionalDiffusion:
    """Denoiser + variant projector on top of a frozen VAE and text encoder."""

    def __init__(self, vae: MotionVAE, text_encoder: TextEncoder, norm_mean, norm_std,
                 variant: VariantConfig | None = None, denoiser_config: DenoiserConfig | None = None,
                 train_config: TrainConfig | None = None, seed: int = 0):
        self.vae = vae
        self.text = TextBank(text_encoder)
        self.norm_mean = np.asarray(norm_mean, dtype=np.float64)
        self.norm_std = np.asarray(norm_std, dtype=np.float64)
        self.variant = variant or VariantConfig()
        self.train_config = train_config or TrainConfig()
        tc = self.train_config
        self.schedule = make_schedule(tc.T, tc.beta_1, tc.beta_T)
        self.store = ParameterStore()
        rng = np.random.default_rng((seed, 7))
        self.denoiser = Denoiser(self.store, "denoiser", denoiser_config, rng)
        self.projector = None
        if self.variant.variant == "oss":
            self.projector = OSSProjector(self.store, "proj", rng, k=self.variant.K)
        elif self.variant.variant == "sc":
            self.projector = SCProjector(self.store, "proj", rng, k=self.variant.K)
        self.rng = np.random.default_rng((seed, 11))
        self.step = 0
        self.history: list[dict] = []

    # -- conditions ------------------------------------------------------

    def project(self, holistic: Tensor) -> list[Tensor]:
        return self.projector(partition(holistic, self.variant.K))

    def condition_for(self, pairs: Sequence[tuple[str, str]], source: str = "auto") -> list[np.ndarray]:
        """Concept set for a batch of holistic labels.

        source 'predefined' -> C^P; 'holistic' -> what the variant uses for a
        single holistic text (duplicated for exp, projected partition for oss/sc);
        'auto' -> 'holistic'.
        """
        if source == "predefined":
            return self.text.predefined(pairs)
        hol = self.text.holistic(pairs)
        if self.variant.variant == "exp":
            return [hol] * self.variant.K
        return [c.data for c in self.project(Tensor(hol))]

    def concept_texts(self, texts: Sequence[Sequence[str]], batch: int = 1) -> list[np.ndarray]:
        """Concept set from explicit token sequences, each repeated over a batch."""
        return [np.repeat(self.text.get(t)[None], batch, axis=0) for t in texts]

    # -- training --------------------------------------------------------

    def trainable(self) -> dict[str, Tensor]:
        return dict(self.store.items())

    def losses(self, z0: np.ndarray, pairs: Sequence[tuple[str, str]], t: np.ndarray,
               eps: np.ndarray, use_holistic: np.ndarray | None = None) -> dict[str, Tensor]:
        """All loss terms for one batch; must run under an active tape to get gradients."""
        v = self.variant
        dt = F.get_default_dtype()
        z_t = Tensor(q_sample(self.schedule, z0, t, eps).astype(dt))
        sc = ortho = None
        if v.variant == "exp":
            cp = self.text.predefined(pairs)
            if use_holistic is not None and use_holistic.any():
                hol = self.text.holistic(pairs)
                m = use_holistic[:, None, None]
                cp = [np.where(m, hol, c) for c in cp]
            concepts = [Tensor(c.astype(dt)) for c in cp]
        else:
            concepts = self.project(Tensor(self.text.holistic(pairs).astype(dt)))
            if v.K >= 2:
                ortho = ortho_loss(concepts, per_position=v.ortho_per_position)
            if v.variant == "sc":
                target = [Tensor(c.astype(dt)) for c in self.text.predefined(pairs)]
                sc = consistency_loss(target, concepts)
        pred = compose_eps(self.denoiser, z_t, concepts, t, v.mode, v.aggregation)
        mse = F.mse(pred, Tensor(eps.astype(dt)))
        total = mse
        if sc is not None and v.alpha_sc:
            total = F.add(total, F.scale(sc, v.alpha_sc))
        if ortho is not None and v.alpha_o:
            total = F.add(total, F.scale(ortho, v.alpha_o))
        return {"mse": mse, "ortho": ortho, "sc": sc, "total": total}

    def draw_batch(self, n: int, rng: np.random.Generator | None = None):
        """Timesteps, noise and tau-mixing mask for a batch of size n."""
        rng = rng or self.rng
        t = rng.integers(1, self.schedule.T + 1, size=n)
        eps = rng.standard_normal((n, self.denoiser.config.latent_len, self.denoiser.config.latent_dim))
        mask = rng.random(n) < self.variant.tau
        return t, eps, mask

    def train_step(self, z0: np.ndarray, pairs: Sequence[tuple[str, str]]) -> StepResult:
        """One optimizer step of the compositional objective on a batch of clean latents."""
        tc = self.train_config
        t, eps, mask = self.draw_batch(len(pairs))
        with Tape() as tape:
            terms = self.losses(z0, pairs, t, eps, mask if self.variant.variant == "exp" else None)
        total = terms["total"]
        if not math.isfinite(float(total.data)):
            raise FloatingPointError(f"non-finite loss at step {self.step}")
        params = self.trainable()
        grads = tape.gradient(total, params)
        gnorm = clip_grad_norm(grads, tc.grad_clip)
        lr = tc.lr_at(self.step)
        adamw_step(self.store, grads, lr, tc.weight_decay)
        self.step += 1
        val = lambda x: 0.0 if x is None else float(x.data)  # noqa: E731
        return StepResult(val(terms["mse"]), val(terms["ortho"]), val(terms["sc"]), val(total), gnorm, lr)

    def fit(self, latents: np.ndarray, labels: Sequence[tuple[str, str]], steps: int | None = None,
            log_path=None) -> list[dict]:
        tc = self.train_config
        steps = tc.steps if steps is None else steps
        n = len(labels)
        order = self.rng.permutation(n)
        pos = 0
        fh = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            for _ in range(steps):
                if pos + tc.batch_size > n:
                    order = self.rng.permutation(n)
                    pos = 0
                idx = order[pos:pos + tc.batch_size]
                pos += tc.batch_size
                res = self.train_step(latents[idx], [labels[i] for i in idx])
                rec = {"step": self.step, **res.as_dict()}
                self.history.append(rec)
                if fh and (self.step % tc.log_every == 0 or self.step == 1):
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
                if self.step % tc.log_every == 0:
                    log.info("step %d mse %.4f total %.4f", self.step, res.mse, res.total)
        finally:
            if fh:
                fh.close()
        return self.history

    # -- sampling --------------------------------------------------------

    def _chain_rngs(self, seed, n: int, tag: int = 0) -> list[np.random.Generator]:
        return [np.random.default_rng((int(seed), tag, i)) for i in range(n)]

    def _reverse(self, eps_fn, rngs: Sequence[np.random.Generator], steps: int) -> np.ndarray:
        cfg = self.denoiser.config
        shape = (cfg.latent_len, cfg.latent_dim)
        z = np.stack([r.standard_normal(shape) for r in rngs])
        ts, sched = respace(self.schedule, steps)
        dt = F.get_default_dtype()
        for i in range(len(ts) - 1, -1, -1):
            t = int(ts[i])
            eps = eps_fn(Tensor(z.astype(dt)), np.full(len(z), t)).data.astype(np.float64)
            z = (z - sched.eta[i] * eps) / math.sqrt(sched.alphas[i])
            if i > 0:
                noise = np.stack([r.standard_normal(shape) for r in rngs])
                z = z + math.sqrt(sched.posterior_var[i]) * noise
        return z

    def decode(self, z: np.ndarray) -> np.ndarray:
        x = self.vae.decode_dataset(z.astype(F.get_default_dtype()))
        return (x.astype(np.float64) * self.norm_std + self.norm_mean).astype(np.float32)

    def sample_holistic(self, concepts: Sequence[np.ndarray], steps: int = 50, seed: int = 0,
                        decode: bool = True) -> np.ndarray:
        """Reverse process driven by the composed prediction over ``concepts``.

        Each concept array is (B, L_c, d_c); chain b draws from its own stream (seed, b).
        """
        if steps > self.schedule.T:
            raise ValueError(f"steps={steps} exceeds T={self.schedule.T}")
        concepts = [np.asarray(c) for c in concepts]
        b = concepts[0].shape[0]
        dt = F.get_default_dtype()
        cs = [Tensor(c.astype(dt)) for c in concepts]
        v = self.variant
        z = self._reverse(lambda zt, t: compose_eps(self.denoiser, zt, cs, t, v.mode, v.aggregation),
                          self._chain_rngs(seed, b), steps)
        return self.decode(z) if decode else z

    def sample_decomposed(self, concepts: Sequence[np.ndarray], steps: int = 50, seeds=None,
                          decode: bool = True) -> list[np.ndarray]:
        """K independent chains, chain k conditioned only on concept k."""
        if steps > self.schedule.T:
            raise ValueError(f"steps={steps} exceeds T={self.schedule.T}")
        seeds = list(range(len(concepts))) if seeds is None else list(seeds)
        if len(seeds) != len(concepts):
            raise ValueError("one seed per concept chain is required")
        dt = F.get_default_dtype()
        outs = []
        for c, s in zip(concepts, seeds):
            ct = Tensor(np.asarray(c).astype(dt))
            z = self._reverse(lambda zt, t: self.denoiser(zt, [ct], t),
                              self._chain_rngs(s, ct.shape[0], tag=1), steps)
            outs.append(self.decode(z) if decode else z)
        return outs

    # -- persistence -----------------------------------------------------

    def save(self, directory) -> str:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        digest = self.store.save(d / "diffusion.ckpt")
        meta = {"variant": asdict(self.variant), "denoiser": asdict(self.denoiser.config),
                "train": asdict(self.train_config), "step": self.step}
        (d / "diffusion_config.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return digest

    def load_weights(self, path) -> None:
        self.store.load_state(read_checkpoint(path))


def load_diffusion_config(directory) -> tuple[VariantConfig, DenoiserConfig, TrainConfig, int]:
    meta = json.loads((Path(directory) / "diffusion_config.json").read_text())
    return (VariantConfig(**meta["variant"]), DenoiserConfig(**meta["denoiser"]),
            TrainConfig(**meta["train"]), meta.get("step", 0))
