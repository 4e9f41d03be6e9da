"""Staged end-to-end runs: data -> VAE -> evaluator -> diffusion -> report.

Every stage writes into a run directory and can be reloaded from it:

    run/data/        manifest.json, labels.jsonl, motions_*.dmg1
    run/vae/         vae.ckpt, vae_log.jsonl, vae_config.json
    run/evaluator/   evaluator.ckpt, evaluator_log.jsonl, evaluator_config.json
    run/<name>/      diffusion.ckpt, diffusion_config.json, train_log.jsonl
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .data import Dataset, DatasetConfig, generate_dataset, load_dataset, manifest_hash
from .diffusion import (CompositionalDiffusion, DenoiserConfig, TrainConfig, VariantConfig,
                        load_diffusion_config)
from .evaluation import (Evaluator, EvaluatorConfig, MetricReport, evaluate_model, load_evaluator,
                         train_evaluator)
from .tensor.params import ParameterStore
from .vae import MotionVAE, VaeConfig, train_vae

log = logging.getLogger(__name__)


class MissingCheckpoint(FileNotFoundError):
    """A stage's required input checkpoint does not exist."""


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DatasetConfig = field(default_factory=DatasetConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_samples: int = 640
    oracle_seeds: int = 100
    sample_steps: int = 50

    def seeded(self, seed: int) -> "PipelineConfig":
        """Copy with ``seed`` pushed into every stage."""
        return replace(self, seed=seed, data=replace(self.data, seed=seed), vae=replace(self.vae, seed=seed),
                       evaluator=replace(self.evaluator, seed=seed), train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return asdict(self)


def toy_config(seed: int = 0) -> PipelineConfig:
    """Desk-scale preset sized for a single CPU core."""
    cfg = PipelineConfig(
        vae=VaeConfig(epochs=10),
        evaluator=EvaluatorConfig(epochs=6),
        variant=VariantConfig(mode="semantic"),
        denoiser=DenoiserConfig(layers=4, width=128),
        train=TrainConfig(steps=6000, lr=1e-3, lr_final=1e-4, decay_after=4000),
    )
    return cfg.seeded(seed)


def paper_config(seed: int = 0) -> PipelineConfig:
    """Denoiser and optimizer at the published sizes (5 x 256, lr 2e-4 -> 2e-5 after 50k)."""
    return PipelineConfig(train=TrainConfig(steps=100_000)).seeded(seed)


def smoke_config(seed: int = 0) -> PipelineConfig:
    """Tiny everything; exercises the plumbing in seconds."""
    cfg = PipelineConfig(
        data=DatasetConfig(n_train=256, n_test=96, n_heldout=32),
        vae=VaeConfig(epochs=1, width=32),
        evaluator=EvaluatorConfig(epochs=1, width=32),
        denoiser=DenoiserConfig(layers=1, width=32, heads=2),
        train=TrainConfig(steps=4, batch_size=16),
        eval_samples=64, oracle_seeds=8, sample_steps=4,
    )
    return cfg.seeded(seed)


PRESETS = {"toy": toy_config, "paper": paper_config, "smoke": smoke_config}


# ---------------------------------------------------------------------------
# stages


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingCheckpoint(f"{what} not found at {path}")
    return path


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def stage_data(cfg: PipelineConfig, out: Path) -> Dataset:
    ds = generate_dataset(cfg.data)
    ds.save(out)
    return ds


def get_dataset(path: Path) -> Dataset:
    _require(Path(path) / "manifest.json", "dataset manifest")
    return load_dataset(path)


def stage_vae(cfg: PipelineConfig, ds: Dataset, out: Path) -> MotionVAE:
    return train_vae(ds, cfg.vae, out_dir=out)


def get_vae(path: Path) -> MotionVAE:
    d = Path(path)
    _require(d / "vae.ckpt", "VAE checkpoint")
    cfg = VaeConfig(**json.loads(_require(d / "vae_config.json", "VAE config").read_text()))
    vae = MotionVAE(ParameterStore(), "vae", cfg)
    vae.load(d / "vae.ckpt")
    return vae


def stage_evaluator(cfg: PipelineConfig, ds: Dataset, out: Path) -> Evaluator:
    return train_evaluator(ds, cfg.evaluator, out_dir=out)


def get_evaluator(path: Path, ds: Dataset) -> Evaluator:
    d = Path(path)
    _require(d / "evaluator.ckpt", "evaluator checkpoint")
    _require(d / "evaluator_config.json", "evaluator config")
    return load_evaluator(d, ds)


def build_model(cfg: PipelineConfig, ds: Dataset, vae: MotionVAE, ev: Evaluator) -> CompositionalDiffusion:
    return CompositionalDiffusion(vae, ev.text_encoder, ds.mean, ds.std, cfg.variant, cfg.denoiser,
                                  cfg.train, seed=cfg.train.seed)


def stage_diffusion(cfg: PipelineConfig, ds: Dataset, vae: MotionVAE, ev: Evaluator, out: Path,
                    steps: int | None = None) -> CompositionalDiffusion:
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, ds, vae, ev)
    latents = vae.encode_dataset(ds.normalized("train"))
    log_path = out / "train_log.jsonl"
    log_path.write_text("")
    model.fit(latents, ds.splits["train"].labels, steps=steps, log_path=log_path)
    model.save(out)
    return model


def get_model(path: Path, ds: Dataset, vae: MotionVAE, ev: Evaluator) -> CompositionalDiffusion:
    d = Path(path)
    _require(d / "diffusion.ckpt", "diffusion checkpoint")
    _require(d / "diffusion_config.json", "diffusion config")
    variant, den, train, step = load_diffusion_config(d)
    model = CompositionalDiffusion(vae, ev.text_encoder, ds.mean, ds.std, variant, den, train, seed=train.seed)
    model.load_weights(d / "diffusion.ckpt")
    model.step = step
    return model


def stage_eval(cfg: PipelineConfig, model: CompositionalDiffusion, ev: Evaluator, ds: Dataset,
               report_path: Path | None = None) -> MetricReport:
    report = evaluate_model(model, ev, ds, n_samples=cfg.eval_samples, n_seeds=cfg.oracle_seeds,
                            steps=cfg.sample_steps, seed=cfg.seed)
    if report_path is not None:
        report_path = Path(report_path)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text(report.to_json(), encoding="utf-8")
        report_path.with_suffix(".txt").write_text(report.to_table(), encoding="utf-8")
    return report


@dataclass
class RunResult:
    dataset: Dataset
    vae: MotionVAE
    evaluator: Evaluator
    model: CompositionalDiffusion
    report: MetricReport | None
    hashes: dict


def run_pipeline(cfg: PipelineConfig, out_dir, name: str = "diffusion", evaluate: bool = True,
                 reuse: bool = False) -> RunResult:
    """Run every stage into ``out_dir``; with ``reuse`` existing data/VAE/evaluator stages are loaded."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pipeline_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    if reuse and (out / "data" / "manifest.json").exists():
        ds = get_dataset(out / "data")
    else:
        ds = stage_data(cfg, out / "data")
    if reuse and (out / "vae" / "vae.ckpt").exists():
        vae = get_vae(out / "vae")
    else:
        vae = stage_vae(cfg, ds, out / "vae")
    if reuse and (out / "evaluator" / "evaluator.ckpt").exists():
        ev = get_evaluator(out / "evaluator", ds)
    else:
        ev = stage_evaluator(cfg, ds, out / "evaluator")
    model = stage_diffusion(cfg, ds, vae, ev, out / name)
    report = stage_eval(cfg, model, ev, ds, out / name / "report.json") if evaluate else None
    hashes = {
        "manifest": manifest_hash(out / "data"),
        "vae": file_sha256(out / "vae" / "vae.ckpt"),
        "evaluator": file_sha256(out / "evaluator" / "evaluator.ckpt"),
        "diffusion": file_sha256(out / name / "diffusion.ckpt"),
    }
    if report is not None:
        hashes["report"] = file_sha256(out / name / "report.json")
    return RunResult(ds, vae, ev, model, report, hashes)


def config_from_mapping(base: PipelineConfig, values: dict) -> PipelineConfig:
    """Apply flat ``section.key`` (or bare VariantConfig/TrainConfig key) overrides."""
    sections = {f.name: getattr(base, f.name) for f in fields(base) if is_dataclass(getattr(base, f.name))}
    top = {f.name for f in fields(base)} - set(sections)
    updates: dict[str, dict] = {k: {} for k in sections}
    flat: dict = {}
    for key, val in values.items():
        if "." in key:
            sec, sub = key.split(".", 1)
            if sec not in sections or sub not in {f.name for f in fields(sections[sec])}:
                raise KeyError(f"unknown config key {key!r}")
            updates[sec][sub] = val
        elif key in top:
            flat[key] = val
        else:
            for sec in ("variant", "train", "denoiser"):
                if key in {f.name for f in fields(sections[sec])}:
                    updates[sec][key] = val
                    break
            else:
                raise KeyError(f"unknown config key {key!r}")
    if "mode" in updates["variant"] and "alpha_o" not in updates["variant"]:
        updates["variant"]["alpha_o"] = None  # re-derive the default weight for the new mode
    new = {sec: replace(obj, **updates[sec]) if updates[sec] else obj for sec, obj in sections.items()}
    cfg = replace(base, **new, **flat)
    return cfg.seeded(cfg.seed) if "seed" in flat else cfg


def describe(model: CompositionalDiffusion) -> str:
    v = model.variant
    return (f"variant={v.variant} mode={v.mode} K={v.K} tau={v.tau} alpha_o={v.alpha_o} "
            f"alpha_sc={v.alpha_sc} aggregation={v.aggregation} step={model.step} "
            f"params={model.store.num_parameters()}")

