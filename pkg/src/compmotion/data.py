"""Synthetic two-concept motion corpus.

Every motion is 64 frames x 6 channels: channels 0-1 hold the root xy
position (written only by PATH concepts), channels 2-3 the left-limb angles
and 4-5 the right-limb angles (written only by GESTURE concepts). A holistic
sample is a path and a gesture composed channel-wise, so its decomposition is
known exactly.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import read_dmg1, write_dmg1

SEQ_LEN = 64
N_CHANNELS = 6
C_MAX = 10.0
PATH_CHANNELS = slice(0, 2)
LIMB_CHANNELS = slice(2, 6)

PATHS = ("straight", "circle", "zigzag", "stop")
GESTURES = ("wave_left", "wave_right", "raise_both", "idle")
FAMILY = {**{p: "PATH" for p in PATHS}, **{g: "GESTURE" for g in GESTURES}}
ALL_PAIRS = tuple(itertools.product(PATHS, GESTURES))
DEFAULT_HELD_OUT = (("zigzag", "wave_left"), ("circle", "raise_both"))

# Per-concept parameter ranges (uniform unless noted).
PARAM_RANGES = {
    "straight": {"speed": (0.06, 0.15), "heading": (0.0, 2 * math.pi)},
    "circle": {"radius": (1.0, 2.5), "revolutions": (0.8, 1.2), "phase": (0.0, 2 * math.pi),
               "direction": (-1, 1)},  # direction is a random sign
    "zigzag": {"speed": (0.06, 0.15), "heading": (0.0, 2 * math.pi),
               "half_angle": (0.7, 1.05), "segment": (10, 16)},  # segment: integer frames
    "stop": {},
    "wave_left": {"amplitude": (0.6, 1.0), "cycles": (2.0, 4.0), "phase": (0.0, 2 * math.pi)},
    "wave_right": {"amplitude": (0.6, 1.0), "cycles": (2.0, 4.0), "phase": (0.0, 2 * math.pi)},
    "raise_both": {"amplitude": (0.8, 1.4), "ramp": (0.25, 0.5)},
    "idle": {},
}

# Oracle thresholds. Frozen from a brute-force sweep of generator features
# (see ``oracle_feature_ranges``); each sits inside the gap between classes.
STOP_EXTENT = 0.3          # max root distance from its mean; stop 0, others >= 1.05
SPREAD_STRAIGHT = 0.07     # sqrt(minor/major root variance); straight 0, zigzag 0.13..0.44
SPREAD_CIRCLE = 0.6        # circle >= 0.78
REST_LIMB = 0.07           # mean |limb angle|; idle 0, waves >= 0.14
RAISE_MEAN = 0.3           # late-half mean angle per side; raise >= 0.6, waves <= 0.12


@dataclass
class ConceptSpec:
    name: str
    params: dict | None = None

    def __post_init__(self):
        if self.name not in FAMILY:
            raise ValueError(f"unknown concept {self.name!r}")

    @property
    def family(self) -> str:
        return FAMILY[self.name]


def sample_params(name: str, rng: np.random.Generator) -> dict:
    if name not in FAMILY:
        raise ValueError(f"unknown concept {name!r}")
    out = {}
    for key, (lo, hi) in PARAM_RANGES[name].items():
        if key == "direction":
            out[key] = int(rng.choice([-1, 1]))
        elif key == "segment":
            out[key] = int(rng.integers(lo, hi + 1))
        else:
            out[key] = float(rng.uniform(lo, hi))
    return out


def _check_params(name: str, params: dict) -> None:
    # the ranges bound random draws; explicit params only need to exist and be finite
    for key in PARAM_RANGES[name]:
        if key not in params:
            raise ValueError(f"{name}: missing parameter {key!r}")
        if not math.isfinite(params[key]):
            raise ValueError(f"{name}: {key}={params[key]} is not finite")
    if name == "zigzag" and int(params["segment"]) < 1:
        raise ValueError("zigzag: segment must be >= 1")


def synth_concept_motion(concept: ConceptSpec | str, length: int = SEQ_LEN, seed=None) -> np.ndarray:
    """Render one concept to an (L, 6) motion; params are drawn from ``seed`` when absent.

    Explicit params may lie outside the sampling ranges in ``PARAM_RANGES``.

    The drawn/used params are written back onto ``concept.params``.
    """
    if isinstance(concept, str):
        concept = ConceptSpec(concept)
    if length < 8:
        raise ValueError(f"length must be >= 8, got {length}")
    if concept.params is None:
        concept.params = sample_params(concept.name, np.random.default_rng(seed))
    p = concept.params
    _check_params(concept.name, p)
    t = np.arange(length, dtype=np.float64)
    x = np.zeros((length, N_CHANNELS))
    name = concept.name
    if name == "straight":
        d = np.array([math.cos(p["heading"]), math.sin(p["heading"])])
        x[:, 0:2] = p["speed"] * t[:, None] * d
    elif name == "circle":
        theta = p["phase"] + p["direction"] * 2 * math.pi * p["revolutions"] * t / (length - 1)
        r = p["radius"]
        x[:, 0] = r * (np.cos(theta) - math.cos(p["phase"]))
        x[:, 1] = r * (np.sin(theta) - math.sin(p["phase"]))
    elif name == "zigzag":
        seg = int(p["segment"])
        sign = np.where((np.arange(length - 1) // seg) % 2 == 0, 1.0, -1.0)
        ang = p["heading"] + sign * p["half_angle"]
        steps = p["speed"] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        x[1:, 0:2] = np.cumsum(steps, axis=0)
    elif name in ("wave_left", "wave_right"):
        w = 2 * math.pi * p["cycles"] / length
        c = 2 if name == "wave_left" else 4
        x[:, c] = p["amplitude"] * np.sin(w * t + p["phase"])
        x[:, c + 1] = 0.5 * p["amplitude"] * np.sin(w * t + p["phase"] + math.pi / 2)
    elif name == "raise_both":
        ramp = np.minimum(1.0, t / (p["ramp"] * (length - 1)))
        a = p["amplitude"] * ramp
        x[:, 2], x[:, 3], x[:, 4], x[:, 5] = a, 0.5 * a, a, 0.5 * a
    if concept.family == "PATH":
        offset = x[:, 0:2].mean(axis=0)
        x[:, 0:2] -= offset
        if name == "circle":
            # where the circle's center ended up after recentering
            p["center"] = [float(-r * math.cos(p["phase"]) - offset[0]),
                           float(-r * math.sin(p["phase"]) - offset[1])]
    return x


def compose_pair(path_motion: np.ndarray, gesture_motion: np.ndarray) -> np.ndarray:
    """Take root channels from the path motion and limb channels from the gesture motion."""
    path_motion = np.asarray(path_motion)
    gesture_motion = np.asarray(gesture_motion)
    if path_motion.shape != gesture_motion.shape or path_motion.shape[-1] != N_CHANNELS:
        raise ValueError(f"compose_pair: shapes {path_motion.shape} and {gesture_motion.shape}")
    if np.any(path_motion[:, LIMB_CHANNELS] != 0):
        raise ValueError("compose_pair: path input has non-zero limb channels")
    root = gesture_motion[:, PATH_CHANNELS]
    if np.any(root != root[0]):
        raise ValueError("compose_pair: gesture input has a moving root")
    out = path_motion.copy()
    out[:, LIMB_CHANNELS] = gesture_motion[:, LIMB_CHANNELS]
    return out


def decompose_label(holistic: tuple[str, str]) -> tuple[tuple[str], tuple[str]]:
    """Split a (path, gesture) label into its two single-concept token sequences."""
    holistic = tuple(holistic)
    if holistic not in ALL_PAIRS:
        raise ValueError(f"unknown holistic label {holistic!r}")
    return (holistic[0],), (holistic[1],)


def synth_pair(path: str, gesture: str, length: int = SEQ_LEN, seed=None) -> tuple[np.ndarray, dict]:
    rng = np.random.default_rng(seed)
    pc = ConceptSpec(path, sample_params(path, rng))
    gc = ConceptSpec(gesture, sample_params(gesture, rng))
    motion = compose_pair(synth_concept_motion(pc, length), synth_concept_motion(gc, length))
    return motion, {"path": pc.params, "gesture": gc.params}


# ---------------------------------------------------------------------------
# oracle


def oracle_features(motion: np.ndarray) -> dict[str, float]:
    m = np.asarray(motion, dtype=np.float64)
    root = m[:, PATH_CHANNELS]
    extent = float(np.max(np.linalg.norm(root - root.mean(axis=0), axis=1)))
    # shape of the root cloud: minor/major principal spread, insensitive to frame jitter
    centred = root - root.mean(axis=0)
    lam = np.linalg.eigvalsh(centred.T @ centred / len(root))
    spread = float(np.sqrt(max(lam[0], 0.0) / lam[1])) if lam[1] > 0 else 0.0
    limb = m[:, LIMB_CHANNELS]
    half = len(m) // 2
    left, right = limb[:, 0:2], limb[:, 2:4]
    return {
        "extent": extent,
        "spread": spread,
        "rest": float(np.abs(limb).mean()),
        "left_late": float(left[half:].mean()),
        "right_late": float(right[half:].mean()),
        "left_energy": float(((left - left.mean(axis=0)) ** 2).sum(axis=1).mean()),
        "right_energy": float(((right - right.mean(axis=0)) ** 2).sum(axis=1).mean()),
    }


def oracle_classify(motion: np.ndarray) -> tuple[str, str]:
    """Label a motion with its nearest (path, gesture) class."""
    f = oracle_features(motion)
    if f["extent"] < STOP_EXTENT:
        path = "stop"
    elif f["spread"] < SPREAD_STRAIGHT:
        path = "straight"
    elif f["spread"] >= SPREAD_CIRCLE:
        path = "circle"
    else:
        path = "zigzag"
    if f["rest"] < REST_LIMB:
        gesture = "idle"
    elif min(f["left_late"], f["right_late"]) > RAISE_MEAN:
        gesture = "raise_both"
    elif f["left_energy"] >= f["right_energy"]:
        gesture = "wave_left"
    else:
        gesture = "wave_right"
    return path, gesture


def limbs_at_rest(motion: np.ndarray) -> bool:
    return float(np.abs(np.asarray(motion)[:, LIMB_CHANNELS]).mean()) < REST_LIMB


def oracle_feature_ranges(n_draws: int = 100, seed: int = 0) -> dict[str, dict[str, tuple[float, float]]]:
    """Min/max of each oracle feature per concept over seeded generator draws.

    This is the sweep the frozen thresholds were read off.
    """
    out: dict[str, dict[str, tuple[float, float]]] = {}
    for ci, name in enumerate(PATHS + GESTURES):
        feats = [oracle_features(synth_concept_motion(ConceptSpec(name), SEQ_LEN, seed=(seed, ci, i)))
                 for i in range(n_draws)]
        out[name] = {k: (min(f[k] for f in feats), max(f[k] for f in feats)) for k in feats[0]}
    return out


# ---------------------------------------------------------------------------
# dataset


@dataclass
class DatasetConfig:
    n_train: int = 4000
    n_test: int = 800
    n_heldout: int = 200
    held_out: tuple = DEFAULT_HELD_OUT
    seed: int = 0
    length: int = SEQ_LEN

    def __post_init__(self):
        self.held_out = tuple(tuple(p) for p in self.held_out)
        for p in self.held_out:
            if p not in ALL_PAIRS:
                raise ValueError(f"held-out pair {p!r} is not in the 16-pair grid")
        if len(self.held_out) < 2:
            raise ValueError("at least 2 held-out pairs are required")
        if len(set(self.held_out)) != len(self.held_out):
            raise ValueError("duplicate held-out pairs")


@dataclass
class Split:
    motions: np.ndarray                       # (N, L, 6) float32, raw units
    labels: list[tuple[str, str]]
    params: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    config: DatasetConfig
    splits: dict[str, Split]
    mean: np.ndarray
    std: np.ndarray
    manifest: dict = field(default_factory=dict)

    @property
    def seen_pairs(self) -> list[tuple[str, str]]:
        return [p for p in ALL_PAIRS if p not in self.config.held_out]

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.std).astype(np.float32)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) * self.std + self.mean).astype(np.float32)

    def normalized(self, split: str) -> np.ndarray:
        return self.normalize(self.splits[split].motions)

    def save(self, directory) -> dict:
        return save_dataset(self, directory)


SPLIT_CODES = {"train": 0, "test": 1, "heldout": 2}


def _make_split(name: str, n: int, pairs: list, cfg: DatasetConfig) -> Split:
    motions = np.zeros((n, cfg.length, N_CHANNELS), dtype=np.float32)
    labels, params = [], []
    for i in range(n):
        pair = pairs[i % len(pairs)]
        m, p = synth_pair(*pair, cfg.length, seed=(cfg.seed, SPLIT_CODES[name], i))
        if np.abs(m).max() > C_MAX:
            raise RuntimeError(f"generator exceeded C_MAX for {pair}")
        motions[i] = m
        labels.append(pair)
        params.append(p)
    return Split(motions, labels, params)


def generate_dataset(config: DatasetConfig | None = None) -> Dataset:
    cfg = config or DatasetConfig()
    seen = [p for p in ALL_PAIRS if p not in cfg.held_out]
    splits = {
        "train": _make_split("train", cfg.n_train, seen, cfg),
        "test": _make_split("test", cfg.n_test, seen, cfg),
        "heldout": _make_split("heldout", cfg.n_heldout, list(cfg.held_out), cfg),
    }
    flat = splits["train"].motions.reshape(-1, N_CHANNELS).astype(np.float64)
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), 1e-6)
    ds = Dataset(cfg, splits, mean, std)
    ds.manifest = _manifest(ds, files={})
    return ds


def vocabulary() -> dict[str, int]:
    from .text import VOCAB
    return dict(VOCAB)


def _manifest(ds: Dataset, files: dict) -> dict:
    cfg = ds.config
    return {
        "format": "compmotion-dataset/1",
        "seed": cfg.seed,
        "length": cfg.length,
        "channels": N_CHANNELS,
        "counts": {k: len(v) for k, v in ds.splits.items()},
        "vocabulary": vocabulary(),
        "held_out_pairs": [list(p) for p in cfg.held_out],
        "seen_pairs": [list(p) for p in ds.seen_pairs],
        "normalization": {"mean": [float(v) for v in ds.mean], "std": [float(v) for v in ds.std]},
        "files": files,
    }


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, indent=2).encode("utf-8")


def save_dataset(ds: Dataset, directory) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    lines = []
    for split, s in ds.splits.items():
        fname = f"motions_{split}.dmg1"
        files[fname] = write_dmg1(d / fname, s.motions)
        for i, (lab, par) in enumerate(zip(s.labels, s.params)):
            lines.append(json.dumps({"id": f"{split}-{i:05d}", "path": lab[0], "gesture": lab[1],
                                     "split": split, "params": par}, sort_keys=True))
    text = ("\n".join(lines) + "\n").encode("utf-8")
    (d / "labels.jsonl").write_bytes(text)
    files["labels.jsonl"] = hashlib.sha256(text).hexdigest()
    ds.manifest = _manifest(ds, files)
    (d / "manifest.json").write_bytes(_canonical(ds.manifest))
    return ds.manifest


def manifest_hash(directory) -> str:
    return hashlib.sha256((Path(directory) / "manifest.json").read_bytes()).hexdigest()


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json in {d}")
    man = json.loads(mpath.read_text("utf-8"))
    cfg = DatasetConfig(n_train=man["counts"]["train"], n_test=man["counts"]["test"],
                        n_heldout=man["counts"]["heldout"],
                        held_out=[tuple(p) for p in man["held_out_pairs"]],
                        seed=man["seed"], length=man["length"])
    by_split: dict[str, tuple[list, list]] = {k: ([], []) for k in SPLIT_CODES}
    with open(d / "labels.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                by_split[rec["split"]][0].append((rec["path"], rec["gesture"]))
                by_split[rec["split"]][1].append(rec["params"])
    splits = {}
    for k in SPLIT_CODES:
        motions = read_dmg1(d / f"motions_{k}.dmg1")
        splits[k] = Split(motions, *by_split[k])
    norm = man["normalization"]
    return Dataset(cfg, splits, np.array(norm["mean"]), np.array(norm["std"]), man)


def generator_mixture_mean(n_draws: int = 100_000, held_out=DEFAULT_HELD_OUT, seed: int = 12345,
                           length: int = SEQ_LEN) -> np.ndarray:
    """Monte-Carlo per-channel mean of the train-split generator mixture."""
    rng = np.random.default_rng(seed)
    seen = [p for p in ALL_PAIRS if p not in tuple(tuple(h) for h in held_out)]
    total = np.zeros(N_CHANNELS)
    picks = rng.integers(0, len(seen), size=n_draws)
    for i in range(n_draws):
        m, _ = synth_pair(*seen[picks[i]], length, seed=(seed, i))
        total += m.mean(axis=0)
    return total / n_draws
