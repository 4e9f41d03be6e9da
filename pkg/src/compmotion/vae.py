"""Temporal convolutional VAE: (64, 6) motions <-> (16, 16) latents."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import N_CHANNELS, SEQ_LEN, Dataset
from .tensor import core as F
from .tensor.core import Tape, Tensor
from .tensor.nn import Linear, Module, ResConvBlock, downsample2, upsample2
from .tensor.params import ParameterStore, adamw_step, clip_grad_norm, read_checkpoint

log = logging.getLogger(__name__)

LATENT_LEN = SEQ_LEN // 4
LATENT_DIM = 16


@dataclass
class VaeConfig:
    width: int = 64
    latent_dim: int = LATENT_DIM
    kl_weight: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    length: int = SEQ_LEN

    def __post_init__(self):
        if self.length % 4:
            raise ValueError(f"sequence length {self.length} must be divisible by 4")


def kl_divergence(mu, logvar) -> float:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over elements, averaged over nothing."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(0.5 * np.sum(mu * mu + (np.expm1(logvar) - logvar)))


def kl_term(mu: Tensor, logvar: Tensor) -> Tensor:
    """Mean per-element KL to the standard normal, differentiable."""
    inner = F.sub(F.add(F.square(mu), F.exp(logvar)), F.add(logvar, 1.0))
    return F.scale(F.mean(inner), 0.5)


class MotionVAE(Module):
    def __init__(self, store: ParameterStore, prefix: str = "vae", config: VaeConfig | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__(store, prefix)
        self.config = cfg = config or VaeConfig()
        rng = rng or np.random.default_rng(cfg.seed)
        w, dz = cfg.width, cfg.latent_dim
        p = prefix
        self.enc_in = Linear(store, f"{p}.enc.inp", N_CHANNELS, w, rng)
        self.enc_blocks = [ResConvBlock(store, f"{p}.enc.block{i}", w, rng) for i in range(3)]
        self.enc_down = [Linear(store, f"{p}.enc.down{i}", 2 * w, w, rng) for i in range(2)]
        self.enc_out = Linear(store, f"{p}.enc.out", w, 2 * dz, rng, init_scale=0.5)
        self.dec_in = Linear(store, f"{p}.dec.inp", dz, w, rng)
        self.dec_blocks = [ResConvBlock(store, f"{p}.dec.block{i}", w, rng) for i in range(3)]
        self.dec_up = [Linear(store, f"{p}.dec.up{i}", w, 2 * w, rng) for i in range(2)]
        self.dec_out = Linear(store, f"{p}.dec.out", w, N_CHANNELS, rng)
        # affine standardization of the latent, set once after training
        self.latent_mean = self.param("latent_mean", np.zeros(dz))
        self.latent_std = self.param("latent_std", np.ones(dz))
        self.latent_mean.requires_grad = False
        self.latent_std.requires_grad = False

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if v.requires_grad}

    def _encode_raw(self, x: Tensor) -> tuple[Tensor, Tensor]:
        cfg = self.config
        if x.ndim != 3 or x.shape[1:] != (cfg.length, N_CHANNELS):
            raise F.ShapeError("vae_encode", x.shape, (cfg.length, N_CHANNELS))
        h = self.enc_in(x)
        h = self.enc_blocks[0](h)
        h = self.enc_blocks[1](F.gelu(downsample2(h, self.enc_down[0])))
        h = self.enc_blocks[2](F.gelu(downsample2(h, self.enc_down[1])))
        out = self.enc_out(h)
        dz = cfg.latent_dim
        return F.slice_axis(out, -1, 0, dz), F.slice_axis(out, -1, dz, 2 * dz)

    def _decode_raw(self, z: Tensor) -> Tensor:
        h = self.dec_in(z)
        h = self.dec_blocks[0](h)
        h = self.dec_blocks[1](F.gelu(upsample2(h, self.dec_up[0])))
        h = self.dec_blocks[2](F.gelu(upsample2(h, self.dec_up[1])))
        return self.dec_out(h)

    def encode(self, x) -> tuple[Tensor, Tensor]:
        """Normalized motions (B, L, 6) or (L, 6) -> standardized (mu, logvar), each (B, L/4, d_z)."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=F.get_default_dtype()))
        single = x.ndim == 2
        if single:
            x = F.reshape(x, (1,) + x.shape)
        mu, logvar = self._encode_raw(x)
        mu = F.div(F.sub(mu, self.latent_mean), self.latent_std)
        logvar = F.sub(logvar, Tensor(2.0 * np.log(self.latent_std.data)))
        if single:
            mu, logvar = F.reshape(mu, mu.shape[1:]), F.reshape(logvar, logvar.shape[1:])
        return mu, logvar

    def decode(self, z) -> Tensor:
        """Standardized latents (B, L/4, d_z) or (L/4, d_z) -> normalized motions."""
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=F.get_default_dtype()))
        cfg = self.config
        single = z.ndim == 2
        if single:
            z = F.reshape(z, (1,) + z.shape)
        if z.ndim != 3 or z.shape[1:] != (cfg.length // 4, cfg.latent_dim):
            raise F.ShapeError("vae_decode", z.shape, (cfg.length // 4, cfg.latent_dim))
        x = self._decode_raw(F.add(F.mul(z, self.latent_std), self.latent_mean))
        return F.reshape(x, x.shape[1:]) if single else x

    def loss(self, x: Tensor, eps: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """(total, reconstruction MSE, KL) for a batch with reparameterization noise ``eps``."""
        mu, logvar = self._encode_raw(x)
        z = F.add(mu, F.mul(F.exp(F.scale(logvar, 0.5)), Tensor(eps.astype(x.dtype))))
        recon = F.mse(self._decode_raw(z), x)
        kl = kl_term(mu, logvar)
        return F.add(recon, F.scale(kl, self.config.kl_weight)), recon, kl

    def encode_dataset(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        out = [self.encode(x[i:i + batch])[0].data for i in range(0, len(x), batch)]
        return np.concatenate(out, axis=0)

    def decode_dataset(self, z: np.ndarray, batch: int = 256) -> np.ndarray:
        out = [self.decode(z[i:i + batch]).data for i in range(0, len(z), batch)]
        return np.concatenate(out, axis=0)

    def calibrate_latent(self, x: np.ndarray, batch: int = 256) -> None:
        """Set the latent standardization from posterior means over ``x``."""
        self.latent_mean.data = np.zeros_like(self.latent_mean.data)
        self.latent_std.data = np.ones_like(self.latent_std.data)
        mu = self.encode_dataset(x, batch).reshape(-1, self.config.latent_dim).astype(np.float64)
        self.latent_mean.data = mu.mean(axis=0).astype(self.latent_mean.dtype)
        self.latent_std.data = np.maximum(mu.std(axis=0), 1e-3).astype(self.latent_std.dtype)

    def load(self, path) -> None:
        self.store.load_state(read_checkpoint(path), prefix=self.prefix + ".")


def train_vae(dataset: Dataset, config: VaeConfig | None = None, out_dir=None,
              store: ParameterStore | None = None) -> MotionVAE:
    """Train on the normalized train split; writes ``vae.ckpt`` and ``vae_log.jsonl`` when out_dir is set."""
    cfg = config or VaeConfig()
    store = store or ParameterStore()
    vae = MotionVAE(store, "vae", cfg, np.random.default_rng(cfg.seed))
    x_all = dataset.normalized("train")
    rng = np.random.default_rng((cfg.seed, 1))
    names = list(vae.trainable())
    params = vae.trainable()
    good = {k: v.data.copy() for k, v in params.items()}
    n = len(x_all)
    log_lines = []
    out = Path(out_dir) if out_dir is not None else None
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        tot_r = tot_k = 0.0
        steps = 0
        for s in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            xb = Tensor(x_all[order[s:s + cfg.batch_size]])
            eps = rng.standard_normal((cfg.batch_size, cfg.length // 4, cfg.latent_dim))
            with Tape() as tape:
                total, recon, kl = vae.loss(xb, eps)
            if not math.isfinite(float(total.data)):
                store.load_state(good, strict=False)
                raise FloatingPointError(f"VAE loss diverged at epoch {epoch}; restored last good weights")
            grads = tape.gradient(total, params)
            clip_grad_norm(grads, cfg.grad_clip)
            adamw_step(store, grads, cfg.lr, cfg.weight_decay, names=names)
            tot_r += float(recon.data)
            tot_k += float(kl.data)
            steps += 1
        good = {k: v.data.copy() for k, v in params.items()}
        rec = {"epoch": epoch, "recon": tot_r / steps, "kl": tot_k / steps}
        log_lines.append(rec)
        log.info("vae epoch %d recon %.5f kl %.4f", epoch, rec["recon"], rec["kl"])
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            store.save(out / "vae.ckpt")
    vae.calibrate_latent(x_all)
    vae.log = log_lines
    if out is not None:
        store.save(out / "vae.ckpt")
        with open(out / "vae_log.jsonl", "w", encoding="utf-8") as fh:
            for rec in log_lines:
                fh.write(json.dumps(rec) + "\n")
        (out / "vae_config.json").write_text(json.dumps(asdict(cfg), indent=2))
    return vae


def reconstruction_mse(vae: MotionVAE, x: np.ndarray) -> float:
    """Mean squared error of decode(encode(x).mu) in normalized units."""
    recon = vae.decode_dataset(vae.encode_dataset(x))
    return float(np.mean((recon.astype(np.float64) - x) ** 2))
