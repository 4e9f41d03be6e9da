"""Shared fixtures: a trained desk-scale stack (data, VAE, evaluator) built once per session.

Set ``COMPMOTION_TEST_DIR`` to keep the trained artifacts between sessions;
otherwise they live in pytest's temporary directory.
"""
from __future__ import annotations

import os
from pathlib import Path

import pytest

from compmotion import pipeline as P


@pytest.fixture(scope="session")
def run_root(tmp_path_factory) -> Path:
    env = os.environ.get("COMPMOTION_TEST_DIR")
    if env:
        root = Path(env)
        root.mkdir(parents=True, exist_ok=True)
        return root
    return tmp_path_factory.mktemp("toy_run")


@pytest.fixture(scope="session")
def toy_cfg():
    return P.toy_config(seed=0)


@pytest.fixture(scope="session")
def toy_stack(run_root, toy_cfg):
    """(dataset, vae, evaluator) trained with the toy preset, reused when already on disk."""
    root = run_root
    if (root / "data" / "manifest.json").exists():
        ds = P.get_dataset(root / "data")
    else:
        ds = P.stage_data(toy_cfg, root / "data")
    if (root / "vae" / "vae_log.jsonl").exists():
        vae = P.get_vae(root / "vae")
    else:
        vae = P.stage_vae(toy_cfg, ds, root / "vae")
    if (root / "evaluator" / "evaluator_log.jsonl").exists():
        ev = P.get_evaluator(root / "evaluator", ds)
    else:
        ev = P.stage_evaluator(toy_cfg, ds, root / "evaluator")
    return ds, vae, ev


# variants trained for the acceptance suite; each entry overrides VariantConfig fields
VARIANT_RUNS = {
    "exp_tau07": {"variant": "exp", "tau": 0.7},
    "exp_tau00": {"variant": "exp", "tau": 0.0},
    "oss": {"variant": "oss"},
    "sc": {"variant": "sc"},
}


@pytest.fixture(scope="session")
def trained_variant(run_root, toy_cfg, toy_stack):
    """Factory: train (or reload) one toy-preset diffusion model per VARIANT_RUNS entry."""
    from dataclasses import replace

    ds, vae, ev = toy_stack
    cache: dict = {}

    def get(name: str):
        if name not in cache:
            cfg = replace(toy_cfg, variant=replace(toy_cfg.variant, **VARIANT_RUNS[name]))
            out = run_root / name
            if (out / "diffusion.ckpt").exists() and (out / "train_log.jsonl").exists():
                model = P.get_model(out, ds, vae, ev)
            else:
                model = P.stage_diffusion(cfg, ds, vae, ev, out)
            cache[name] = (cfg, model, out)
        return cache[name]

    return get
