"""Contrastive text-motion evaluator, distribution/retrieval metrics, and
oracle-scored decomposition and recombination accuracy.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import GESTURES, PATHS, Dataset, limbs_at_rest, oracle_classify
from .tensor import core as F
from .tensor.core import Tape, Tensor
from .tensor.nn import Linear, Module, ResConvBlock, downsample2
from .tensor.params import ParameterStore, adamw_step, clip_grad_norm, read_checkpoint
from .text import TEXT_DIM, TextEncoder, tokenize

log = logging.getLogger(__name__)

FEATURE_DIM = 32
DIVERSITY_PAIRS = 300
MIN_MMODALITY_REPEATS = 10


# ---------------------------------------------------------------------------
# evaluator


@dataclass
class EvaluatorConfig:
    width: int = 64
    feature_dim: int = FEATURE_DIM
    temperature: float = 0.1
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    grad_clip: float = 1.0
    seed: int = 0


class MotionFeatureEncoder(Module):
    def __init__(self, store, prefix, cfg: EvaluatorConfig, rng):
        super().__init__(store, prefix)
        w = cfg.width
        self.inp = Linear(store, f"{prefix}.inp", 6, w, rng)
        self.blocks = [ResConvBlock(store, f"{prefix}.block{i}", w, rng) for i in range(3)]
        self.down = [Linear(store, f"{prefix}.down{i}", 2 * w, w, rng) for i in range(2)]
        self.out = Linear(store, f"{prefix}.out", w, cfg.feature_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.blocks[0](self.inp(x))
        h = self.blocks[1](F.gelu(downsample2(h, self.down[0])))
        h = self.blocks[2](F.gelu(downsample2(h, self.down[1])))
        return self.out(F.mean(h, axis=1))


def _unit(x: Tensor) -> Tensor:
    n = F.l2norm(x, axis=-1, keepdims=True)
    return F.div(x, F.add(n, 1e-8))


class Evaluator:
    """Motion and text towers mapping into a shared unit-norm feature space.

    The text tower's encoder (prefix ``text``) doubles as the frozen text
    encoder for diffusion training.
    """

    def __init__(self, config: EvaluatorConfig | None = None, store: ParameterStore | None = None):
        self.config = cfg = config or EvaluatorConfig()
        self.store = store or ParameterStore()
        rng = np.random.default_rng((cfg.seed, 3))
        self.text_encoder = TextEncoder(self.store, "text", rng)
        self.text_head = Linear(self.store, "evaluator.text_head", TEXT_DIM, cfg.feature_dim, rng)
        self.motion = MotionFeatureEncoder(self.store, "evaluator.motion", cfg, rng)
        self.norm_mean = np.zeros(6)
        self.norm_std = np.ones(6)

    def _text_tensor(self, ids: np.ndarray) -> Tensor:
        return _unit(self.text_head(F.mean(self.text_encoder(ids), axis=1)))

    def _motion_tensor(self, x_norm: np.ndarray) -> Tensor:
        return _unit(self.motion(Tensor(x_norm.astype(F.get_default_dtype()))))

    def motion_features(self, motions: np.ndarray, batch: int = 256) -> np.ndarray:
        """Features of raw (de-normalized) motions."""
        x = ((np.asarray(motions, dtype=np.float64) - self.norm_mean) / self.norm_std).astype(np.float32)
        return np.concatenate([self._motion_tensor(x[i:i + batch]).data for i in range(0, len(x), batch)])

    def text_features(self, pairs: Sequence[tuple[str, str]]) -> np.ndarray:
        ids = np.stack([tokenize(p) for p in pairs])
        return self._text_tensor(ids).data.copy()

    def loss(self, x_norm: np.ndarray, pairs: Sequence[tuple[str, str]]) -> Tensor:
        """Symmetric InfoNCE with every same-label item counted as a positive."""
        ids = np.stack([tokenize(p) for p in pairs])
        m = self._motion_tensor(x_norm)
        t = self._text_tensor(ids)
        logits = F.scale(F.matmul(m, F.transpose(t, (1, 0))), 1.0 / self.config.temperature)
        lab = np.array([hash_pair(p) for p in pairs])
        target = (lab[:, None] == lab[None, :]).astype(logits.dtype)
        target /= target.sum(axis=1, keepdims=True)
        tgt = Tensor(target)
        l1 = F.neg(F.mean(F.sum(F.mul(F.log_softmax(logits), tgt), axis=1)))
        l2 = F.neg(F.mean(F.sum(F.mul(F.log_softmax(F.transpose(logits, (1, 0))), tgt), axis=1)))
        return F.scale(F.add(l1, l2), 0.5)

    def save(self, path) -> str:
        return self.store.save(path)

    def load(self, path) -> None:
        self.store.load_state(read_checkpoint(path))


def hash_pair(p) -> int:
    return PATHS.index(p[0]) * len(GESTURES) + GESTURES.index(p[1])


def train_evaluator(dataset: Dataset, config: EvaluatorConfig | None = None, out_dir=None) -> Evaluator:
    cfg = config or EvaluatorConfig()
    ev = Evaluator(cfg)
    ev.norm_mean, ev.norm_std = dataset.mean, dataset.std
    x = dataset.normalized("train")
    labels = dataset.splits["train"].labels
    rng = np.random.default_rng((cfg.seed, 5))
    params = dict(ev.store.items())
    lines = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        tot, steps = 0.0, 0
        for s in range(0, len(x) - cfg.batch_size + 1, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            with Tape() as tape:
                loss = ev.loss(x[idx], [labels[i] for i in idx])
            if not math.isfinite(float(loss.data)):
                raise FloatingPointError(f"evaluator loss diverged at epoch {epoch}")
            grads = tape.gradient(loss, params)
            clip_grad_norm(grads, cfg.grad_clip)
            adamw_step(ev.store, grads, cfg.lr)
            tot += float(loss.data)
            steps += 1
        lines.append({"epoch": epoch, "loss": tot / steps})
        log.info("evaluator epoch %d loss %.4f", epoch, tot / steps)
    ev.log = lines
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ev.save(out / "evaluator.ckpt")
        with open(out / "evaluator_log.jsonl", "w", encoding="utf-8") as fh:
            for rec in lines:
                fh.write(json.dumps(rec) + "\n")
        (out / "evaluator_config.json").write_text(json.dumps(asdict(cfg), indent=2))
    return ev


def load_evaluator(directory, dataset: Dataset) -> Evaluator:
    d = Path(directory)
    cfg = EvaluatorConfig(**json.loads((d / "evaluator_config.json").read_text()))
    ev = Evaluator(cfg)
    ev.load(d / "evaluator.ckpt")
    ev.norm_mean, ev.norm_std = dataset.mean, dataset.std
    return ev


def matched_pair_margin(ev: Evaluator, motions: np.ndarray, pairs: Sequence[tuple[str, str]]) -> float:
    """Fraction of samples whose own label is closer (cosine) than every other label."""
    feats = ev.motion_features(motions)
    uniq = sorted(set(tuple(p) for p in pairs), key=hash_pair)
    tf = ev.text_features(uniq)
    sims = feats @ tf.T
    own = np.array([uniq.index(tuple(p)) for p in pairs])
    best_other = np.where(np.arange(len(uniq))[None, :] == own[:, None], -np.inf, sims).max(axis=1)
    return float(np.mean(sims[np.arange(len(pairs)), own] > best_other))


# ---------------------------------------------------------------------------
# metrics


def fid(real: np.ndarray, gen: np.ndarray, tol: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    real = np.asarray(real, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    if real.ndim != 2 or gen.ndim != 2 or real.shape[1] != gen.shape[1]:
        raise ValueError(f"fid: feature shapes {real.shape} and {gen.shape} differ")
    if len(real) < 2 or len(gen) < 2:
        raise ValueError("fid: need at least 2 samples per set")
    mu_r, mu_g = real.mean(axis=0), gen.mean(axis=0)
    s_r = np.atleast_2d(np.cov(real, rowvar=False))
    s_g = np.atleast_2d(np.cov(gen, rowvar=False))
    return float(np.sum((mu_g - mu_r) ** 2) + np.trace(s_g) + np.trace(s_r)
                 - 2.0 * trace_sqrt_product(s_g, s_r, tol))


def trace_sqrt_product(a: np.ndarray, b: np.ndarray, tol: float = 1e-6) -> float:
    """Tr((A B)^{1/2}) for PSD A, B via the symmetric form A^{1/2} B A^{1/2}."""
    ra = _psd_sqrt(a, tol)
    m = ra @ b @ ra
    w = np.linalg.eigvalsh((m + m.T) / 2)
    if w.min() < -tol * max(1.0, abs(w).max()):
        raise ValueError(f"fid: covariance product not PSD (min eigenvalue {w.min():.3g})")
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def _psd_sqrt(a: np.ndarray, tol: float) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    if w.min() < -tol * max(1.0, abs(w).max()):
        raise ValueError(f"fid: covariance not PSD (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def r_precision(motion_feats: np.ndarray, text_feats: np.ndarray, labels=None, pool_size: int = 32,
                seed: int = 0, top: Sequence[int] = (1, 2, 3)) -> dict[int, float]:
    """Motion-to-text retrieval accuracy within pools of one match and pool_size - 1 mismatches.

    Mismatches are other rows whose label differs (any other row if labels is None),
    drawn without replacement. Ranking uses Euclidean distance.
    """
    m = np.asarray(motion_feats, dtype=np.float64)
    t = np.asarray(text_feats, dtype=np.float64)
    if m.shape != t.shape:
        raise ValueError(f"r_precision: shapes {m.shape} and {t.shape} differ")
    n = len(m)
    if labels is None:
        lab = np.arange(n)
    else:
        codes: dict = {}
        lab = np.array([codes.setdefault(x if np.isscalar(x) else tuple(x), len(codes)) for x in labels])
    rng = np.random.default_rng(seed)
    hits = {k: 0 for k in top}
    for i in range(n):
        cand = np.flatnonzero(lab != lab[i])
        if len(cand) < pool_size - 1:
            raise ValueError(f"r_precision: need at least {pool_size - 1} mismatched texts per motion, "
                             f"found {len(cand)}")
        pool = rng.choice(cand, size=pool_size - 1, replace=False)
        d_gt = np.linalg.norm(m[i] - t[i])
        d = np.linalg.norm(t[pool] - m[i], axis=1)
        rank = int(np.sum(d < d_gt)) + 1
        for k in top:
            hits[k] += rank <= k
    return {k: hits[k] / n for k in top}


def mm_dist(motion_feats: np.ndarray, text_feats: np.ndarray) -> float:
    m = np.asarray(motion_feats, dtype=np.float64)
    t = np.asarray(text_feats, dtype=np.float64)
    if m.shape != t.shape:
        raise ValueError(f"mm_dist: shapes {m.shape} and {t.shape} differ")
    return float(np.linalg.norm(m - t, axis=1).mean())


def diversity(feats: np.ndarray, n_pairs: int = DIVERSITY_PAIRS, seed: int = 0) -> float:
    """Mean distance over n_pairs disjoint random pairs (needs 2 * n_pairs features)."""
    f = np.asarray(feats, dtype=np.float64)
    if len(f) < 2 * n_pairs:
        raise ValueError(f"diversity: need at least {2 * n_pairs} features, got {len(f)}")
    idx = np.random.default_rng(seed).permutation(len(f))[:2 * n_pairs]
    return float(np.linalg.norm(f[idx[:n_pairs]] - f[idx[n_pairs:]], axis=1).mean())


def mmodality(feats_per_text: Sequence[np.ndarray], seed: int = 0) -> float:
    """Average distance between two random halves of the samples generated per text."""
    rng = np.random.default_rng(seed)
    vals = []
    for f in feats_per_text:
        f = np.asarray(f, dtype=np.float64)
        if len(f) < MIN_MMODALITY_REPEATS:
            raise ValueError(f"mmodality: need at least {MIN_MMODALITY_REPEATS} samples per text, got {len(f)}")
        perm = rng.permutation(len(f))
        h = len(f) // 2
        vals.append(np.linalg.norm(f[perm[:h]] - f[perm[h:2 * h]], axis=1).mean())
    if not vals:
        raise ValueError("mmodality: no texts")
    return float(np.mean(vals))


def transition_distance(motions: np.ndarray) -> float:
    """Mean Euclidean distance between consecutive raw frames."""
    x = np.asarray(motions, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1] < 2:
        raise ValueError("transition_distance: need at least 2 frames")
    return float(np.linalg.norm(np.diff(x, axis=1), axis=2).mean())


# ---------------------------------------------------------------------------
# oracle scoring


def label_accuracy(motions: np.ndarray, pairs: Sequence[tuple[str, str]]) -> dict[str, float]:
    pred = [oracle_classify(m) for m in motions]
    path = np.mean([p[0] == q[0] for p, q in zip(pred, pairs)])
    gest = np.mean([p[1] == q[1] for p, q in zip(pred, pairs)])
    joint = np.mean([p == tuple(q) for p, q in zip(pred, pairs)])
    return {"path": float(path), "gesture": float(gest), "joint": float(joint)}


def decomposition_scores(model, pairs: Sequence[tuple[str, str]], held_out: Sequence[tuple[str, str]],
                         n_seeds: int = 100, steps: int = 50, seed: int = 0) -> dict:
    """Oracle-scored decomposition (K separate chains) and held-out recombination.

    ``pairs`` are the labels to decompose (one chain set per entry, cycled to
    n_seeds); each held-out pair is recombined n_seeds times from its C^P.
    """
    labels = [tuple(pairs[i % len(pairs)]) for i in range(n_seeds)]
    if model.variant.variant == "exp":
        cs = model.text.predefined(labels)
    else:
        cs = model.condition_for(labels)
    outs = model.sample_decomposed(cs, steps=steps, seeds=[seed + k for k in range(len(cs))])
    preds = [[oracle_classify(m) for m in o] for o in outs]
    # chain k is matched to a family by the best-scoring assignment (identity for exp)
    path_hits = [np.mean([p[0] == lab[0] for p, lab in zip(pk, labels)]) for pk in preds]
    gest_hits = [np.mean([p[1] == lab[1] for p, lab in zip(pk, labels)]) for pk in preds]
    if len(outs) == 2 and model.variant.variant != "exp" and path_hits[1] + gest_hits[0] > path_hits[0] + gest_hits[1]:
        pk, gk = 1, 0
    else:
        pk, gk = 0, min(1, len(outs) - 1)
    rest = float(np.mean([limbs_at_rest(m) for m in outs[pk]]))
    rec = {}
    for j, pair in enumerate(held_out):
        cp = model.text.predefined([tuple(pair)] * n_seeds)
        gen = model.sample_holistic(cp, steps=steps, seed=seed + 1000 + j)
        rec["+".join(pair)] = label_accuracy(gen, [tuple(pair)] * n_seeds)
    rec_joint = float(np.mean([r["joint"] for r in rec.values()])) if rec else 0.0
    return {
        "decomposition_path_accuracy": float(path_hits[pk]),
        "decomposition_gesture_accuracy": float(gest_hits[gk]),
        "decomposition_accuracy": float((path_hits[pk] + gest_hits[gk]) / 2),
        "path_chain_rest_fraction": rest,
        "recombination": rec,
        "recombination_accuracy": rec_joint,
        "n_seeds": n_seeds,
    }


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    fid: float
    r_precision_top1: float
    r_precision_top2: float
    r_precision_top3: float
    mm_dist: float
    diversity: float
    mmodality: float
    transition_distance: float
    holistic_accuracy: float
    composition_accuracy: float
    decomposition_accuracy: float
    recombination_accuracy: float
    path_chain_rest_fraction: float
    counts: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_table(self) -> str:
        rows = [(k, v) for k, v in asdict(self).items() if isinstance(v, float)]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v:10.4f}" for k, v in rows) + "\n"

    def check_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values() if isinstance(v, float))


def evaluate_model(model, evaluator: Evaluator, dataset: Dataset, n_samples: int = 640,
                   mm_texts: int = 8, mm_repeats: int = MIN_MMODALITY_REPEATS, n_seeds: int = 100,
                   steps: int = 50, seed: int = 0) -> MetricReport:
    """Generate from test labels and compute the full metric report."""
    test = dataset.splits["test"]
    n = min(n_samples, len(test))
    pairs = [tuple(p) for p in test.labels[:n]]
    gen = model.sample_holistic(model.condition_for(pairs), steps=steps, seed=seed)
    comp = model.sample_holistic(model.condition_for(pairs[:n_seeds], "predefined"), steps=steps,
                                 seed=seed + 1)
    gf = evaluator.motion_features(gen)
    rf = evaluator.motion_features(test.motions[:n])
    tf = evaluator.text_features(pairs)
    rp = r_precision(gf, tf, labels=pairs, seed=seed)
    uniq = sorted(set(pairs), key=hash_pair)[:mm_texts]
    per_text = []
    for j, p in enumerate(uniq):
        g = model.sample_holistic(model.condition_for([p] * mm_repeats), steps=steps, seed=seed + 100 + j)
        per_text.append(evaluator.motion_features(g))
    n_div = min(DIVERSITY_PAIRS, len(gf) // 2)
    dec = decomposition_scores(model, list(dict.fromkeys(pairs)), dataset.config.held_out,
                               n_seeds=n_seeds, steps=steps, seed=seed + 7)
    hol = label_accuracy(gen, pairs)
    com = label_accuracy(comp, pairs[:n_seeds])
    return MetricReport(
        fid=fid(rf, gf),
        r_precision_top1=rp[1], r_precision_top2=rp[2], r_precision_top3=rp[3],
        mm_dist=mm_dist(gf, tf),
        diversity=diversity(gf, n_pairs=n_div, seed=seed),
        mmodality=mmodality(per_text, seed=seed),
        transition_distance=transition_distance(gen),
        holistic_accuracy=hol["joint"],
        composition_accuracy=com["joint"],
        decomposition_accuracy=dec["decomposition_accuracy"],
        recombination_accuracy=dec["recombination_accuracy"],
        path_chain_rest_fraction=dec["path_chain_rest_fraction"],
        counts={"generated": n, "diversity_pairs": n_div, "mmodality_texts": len(uniq),
                "mmodality_repeats": mm_repeats, "oracle_seeds": n_seeds},
        details={"holistic": hol, "composition": com, "decomposition": dec},
    )
