"""
Train, sample, decompose, recombine
===================================

A compact end-to-end run. The default budget finishes in a few minutes on
one core and is far from converged; pass a larger step count as the first
argument (the toy preset uses 6000) to get usable samples.

    python demos/04_train_and_sample.py 6000 runs/demo
"""
from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from compmotion import pipeline as P
from compmotion.data import limbs_at_rest, oracle_classify
from compmotion.evaluation import label_accuracy
from compmotion.export import export_motions

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out/train")

cfg = P.toy_config(seed=0)
if steps < cfg.train.steps:
    # a short run also shrinks the stages in front of the denoiser
    cfg = replace(cfg, data=replace(cfg.data, n_train=1000), vae=replace(cfg.vae, epochs=4),
                  evaluator=replace(cfg.evaluator, epochs=3),
                  train=replace(cfg.train, steps=steps, decay_after=int(steps * 2 / 3)))

# %%
# Data, VAE and evaluator. The evaluator's text tower is reused, frozen,
# as the diffusion text encoder.
ds = P.stage_data(cfg, out / "data")
vae = P.stage_vae(cfg, ds, out / "vae")
ev = P.stage_evaluator(cfg, ds, out / "evaluator")
print("train pairs:", len(ds.seen_pairs), "held out:", ds.config.held_out)

# %%
# The Exp variant: each sample is conditioned on its two concept texts, or,
# with probability tau, on the holistic text duplicated twice. The toy
# preset composes them inside cross-attention (semantic mode).
model = P.stage_diffusion(cfg, ds, vae, ev, out / "diffusion")
print(P.describe(model))
print("last logged mse:", round(model.history[-1]["mse"], 4))

# %%
# Holistic generation from the seen pairs.
pairs = [ds.seen_pairs[i % 14] for i in range(56)]
gen = model.sample_holistic(model.condition_for(pairs), steps=50, seed=0)
print("holistic accuracy:", label_accuracy(gen, pairs))

# %%
# Decomposition: one chain per concept. The path chain should keep its
# limbs at rest, the gesture chain should stand still.
cs = model.text.predefined([("circle", "wave_right")] * 16)
path_chain, gesture_chain = model.sample_decomposed(cs, steps=50, seeds=[1, 2])
print("path chain limbs at rest:", np.mean([limbs_at_rest(m) for m in path_chain]))
print("gesture chain labels:", [oracle_classify(m)[1] for m in gesture_chain[:6]])

# %%
# Recombination on a pair never seen in training.
held = ("zigzag", "wave_left")
rec = model.sample_holistic(model.text.predefined([held] * 32), steps=50, seed=3)
print(f"recombined {held}:", label_accuracy(rec, [held] * 32))

export_motions(np.concatenate([gen[:4], rec[:4]]), out / "figures", stem="demo")
print("figures in", out / "figures")
