"""Command-line entry point.

Every subcommand works inside one run directory (``--out``, default
``$COMPMOTION_OUT`` or ``./runs``). Errors print one line
``compmotion: error: <kind>: <message>`` to stderr and exit nonzero:
2 for usage errors, 3 for a missing checkpoint, 1 otherwise.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline as P
from .diffusion import MODES, VARIANTS
from .export import export_motions
from .io import read_dmg1, write_dmg1
from .tensor.core import Tensor
from .text import VOCAB

OUT_ENV = "COMPMOTION_OUT"
EXIT_USAGE, EXIT_MISSING, EXIT_FAIL = 2, 3, 1


class UsageError(Exception):
    pass


def _fail(kind: str, msg: str, code: int) -> int:
    print(f"compmotion: error: {kind}: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# config file: UTF-8 "key = value" lines, '#' comments, values parsed as JSON when possible


def read_config_file(path) -> dict:
    values = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = json.loads(val)
        except json.JSONDecodeError:
            values[key] = val
    return values


def _coerce(values: dict) -> dict:
    out = {}
    for k, v in values.items():
        if k.endswith("held_out") and isinstance(v, list):
            v = tuple(tuple(p) for p in v)
        out[k] = v
    return out


# ---------------------------------------------------------------------------
# parser


_FLAG_KEYS = {
    # flag dest -> config key
    "variant": "variant.variant", "mode": "variant.mode", "K": "variant.K", "tau": "variant.tau",
    "alpha_o": "variant.alpha_o", "alpha_sc": "variant.alpha_sc", "aggregation": "variant.aggregation",
    "steps": "train.steps", "lr": "train.lr", "batch_size": "train.batch_size",
    "width": "denoiser.width", "layers": "denoiser.layers",
    "n_train": "data.n_train", "n_test": "data.n_test", "n_heldout": "data.n_heldout",
    "vae_epochs": "vae.epochs", "eval_epochs": "evaluator.epochs",
    "sample_steps": "sample_steps", "oracle_seeds": "oracle_seeds", "eval_samples": "eval_samples",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=None, help=f"run directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("--config", default=None, help="key = value config file; flags override it")
    common.add_argument("--preset", default="toy", choices=sorted(P.PRESETS))
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--data", default=None, help="dataset directory (default <out>/data)")
    common.add_argument("--vae", default=None, help="VAE directory (default <out>/vae)")
    common.add_argument("--evaluator", default=None, help="evaluator directory (default <out>/evaluator)")
    common.add_argument("--model", default=None, help="diffusion directory (default <out>/diffusion)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="compmotion", description="Compositional motion diffusion toolkit.")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    for f in ("n_train", "n_test", "n_heldout"):
        g.add_argument("--" + f.replace("_", "-"), dest=f, type=int, default=None)

    v = sub.add_parser("train-vae", parents=[common], help="train the motion VAE")
    v.add_argument("--epochs", dest="vae_epochs", type=int, default=None)

    e = sub.add_parser("train-eval", parents=[common], help="train the contrastive evaluator")
    e.add_argument("--epochs", dest="eval_epochs", type=int, default=None)

    d = sub.add_parser("train-diffusion", parents=[common], help="train the compositional denoiser")
    d.add_argument("--variant", choices=VARIANTS, default=None)
    d.add_argument("--mode", choices=MODES, default=None)
    d.add_argument("--K", type=int, default=None)
    d.add_argument("--tau", type=float, default=None)
    d.add_argument("--alpha-o", dest="alpha_o", type=float, default=None)
    d.add_argument("--alpha-sc", dest="alpha_sc", type=float, default=None)
    d.add_argument("--aggregation", choices=("mean", "sum"), default=None)
    d.add_argument("--steps", type=int, default=None)
    d.add_argument("--lr", type=float, default=None)
    d.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    d.add_argument("--width", type=int, default=None)
    d.add_argument("--layers", type=int, default=None)

    for name, helptext in (("sample", "text-to-motion / compositional generation"),
                           ("decompose", "one independent chain per concept")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--texts", required=True,
                       help="comma-separated concept texts; tokens within a text are space-separated")
        s.add_argument("--count", type=int, default=1)
        s.add_argument("--sample-steps", dest="sample_steps", type=int, default=None)
        s.add_argument("--output", default=None, help="DMG1 output file")

    r = sub.add_parser("recombine", parents=[common], help="compose concepts taken from different sources")
    r.add_argument("--concept1", required=True, help="concept text, or 'holistic text@k' for a projected partition")
    r.add_argument("--concept2", required=True)
    r.add_argument("--count", type=int, default=1)
    r.add_argument("--sample-steps", dest="sample_steps", type=int, default=None)
    r.add_argument("--output", default=None)

    ev = sub.add_parser("eval", parents=[common], help="compute the metric report")
    ev.add_argument("--report", default=None, help="JSON report path (text table written alongside)")
    ev.add_argument("--sample-steps", dest="sample_steps", type=int, default=None)
    ev.add_argument("--oracle-seeds", dest="oracle_seeds", type=int, default=None)
    ev.add_argument("--eval-samples", dest="eval_samples", type=int, default=None)

    x = sub.add_parser("export", parents=[common], help="SVG figures and per-frame CSV for a DMG1 file")
    x.add_argument("--input", required=True, help="DMG1 motion file")
    x.add_argument("--svg", action="store_true", help="write SVG figures")
    x.add_argument("--csv", action="store_true", help="write per-frame CSV (default when --svg is absent)")
    x.add_argument("--output-dir", default=None)
    return p


# ---------------------------------------------------------------------------
# helpers


def resolve_config(args) -> P.PipelineConfig:
    cfg = P.PRESETS[args.preset]()
    values: dict = {}
    if args.config:
        cpath = Path(args.config)
        if not cpath.is_file():
            raise UsageError(f"config file {cpath} does not exist")
        values.update(read_config_file(cpath))
    for dest, key in _FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            values[key] = val
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        return P.config_from_mapping(cfg, _coerce(values))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _dirs(args) -> dict[str, Path]:
    out = Path(args.out or os.environ.get(OUT_ENV) or "runs")
    return {
        "out": out,
        "data": Path(args.data) if args.data else out / "data",
        "vae": Path(args.vae) if args.vae else out / "vae",
        "evaluator": Path(args.evaluator) if args.evaluator else out / "evaluator",
        "model": Path(args.model) if args.model else out / "diffusion",
    }


def _parse_texts(spec: str) -> list[list[str]]:
    texts = [t.split() for t in spec.split(",")]
    for t in texts:
        if not t:
            raise UsageError(f"empty concept text in {spec!r}")
        for tok in t:
            if tok not in VOCAB or tok == "PAD":
                raise UsageError(f"unknown token {tok!r}; vocabulary: {', '.join(k for k in VOCAB if k != 'PAD')}")
    return texts


def _load_for_sampling(d: dict[str, Path]):
    # validate every input before loading anything heavy
    for key, fname in (("data", "manifest.json"), ("vae", "vae.ckpt"), ("evaluator", "evaluator.ckpt"),
                       ("model", "diffusion.ckpt")):
        P._require(d[key] / fname, f"{key} checkpoint" if key != "data" else "dataset manifest")
    ds = P.get_dataset(d["data"])
    vae = P.get_vae(d["vae"])
    ev = P.get_evaluator(d["evaluator"], ds)
    return ds, vae, ev, P.get_model(d["model"], ds, vae, ev)


def _concept_set(model, texts: list[list[str]], count: int) -> list[np.ndarray]:
    """Concept embeddings for explicit texts.

    exp: each text is one concept (a single text is duplicated to K).
    oss/sc: the texts are joined into one holistic text and projected to K concepts.
    """
    v = model.variant
    if v.variant == "exp":
        if len(texts) == 1:
            texts = texts * v.K
        return model.concept_texts(texts, count)
    tokens = [tok for t in texts for tok in t]
    hol = np.repeat(model.text.get(tokens)[None], count, axis=0)
    return [c.data for c in model.project(Tensor(hol))]


def _recombine_concept(model, spec: str, count: int) -> np.ndarray:
    if "@" in spec:
        text, idx = spec.rsplit("@", 1)
        tokens = _parse_texts(text)[0]
        try:
            k = int(idx)
        except ValueError:
            raise UsageError(f"bad partition index in {spec!r}") from None
        if model.projector is None:
            raise UsageError("'text@k' needs an oss or sc model")
        if not 0 <= k < model.variant.K:
            raise UsageError(f"partition index {k} out of range 0..{model.variant.K - 1}")
        hol = np.repeat(model.text.get(tokens)[None], count, axis=0)
        return model.project(Tensor(hol))[k].data
    tokens = _parse_texts(spec)[0]
    return np.repeat(model.text.get(tokens)[None], count, axis=0)


def _output_path(args, d, default: str) -> Path:
    return Path(args.output) if args.output else d["out"] / default


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg, d) -> dict:
    ds = P.stage_data(cfg, d["data"])
    return {"dataset": str(d["data"]), "manifest_sha256": P.manifest_hash(d["data"]),
            "counts": {k: len(v) for k, v in ds.splits.items()}}


def cmd_train_vae(args, cfg, d) -> dict:
    ds = P.get_dataset(d["data"])
    vae = P.stage_vae(cfg, ds, d["vae"])
    from .vae import reconstruction_mse
    return {"checkpoint": str(d["vae"] / "vae.ckpt"), "sha256": P.file_sha256(d["vae"] / "vae.ckpt"),
            "test_recon_mse": reconstruction_mse(vae, ds.normalized("test"))}


def cmd_train_eval(args, cfg, d) -> dict:
    ds = P.get_dataset(d["data"])
    ev = P.stage_evaluator(cfg, ds, d["evaluator"])
    from .evaluation import matched_pair_margin
    test = ds.splits["test"]
    return {"checkpoint": str(d["evaluator"] / "evaluator.ckpt"),
            "sha256": P.file_sha256(d["evaluator"] / "evaluator.ckpt"),
            "matched_fraction": matched_pair_margin(ev, test.motions, test.labels)}


def cmd_train_diffusion(args, cfg, d) -> dict:
    ds = P.get_dataset(d["data"])
    P._require(d["vae"] / "vae.ckpt", "VAE checkpoint")
    P._require(d["evaluator"] / "evaluator.ckpt", "evaluator checkpoint")
    vae = P.get_vae(d["vae"])
    ev = P.get_evaluator(d["evaluator"], ds)
    model = P.stage_diffusion(cfg, ds, vae, ev, d["model"])
    return {"checkpoint": str(d["model"] / "diffusion.ckpt"),
            "sha256": P.file_sha256(d["model"] / "diffusion.ckpt"), "model": P.describe(model),
            "final_mse": model.history[-1]["mse"] if model.history else None}


def _sampling_seed(args, cfg) -> int:
    return cfg.seed if args.seed is None else args.seed


def cmd_sample(args, cfg, d) -> dict:
    texts = _parse_texts(args.texts)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    ds, vae, ev, model = _load_for_sampling(d)
    cs = _concept_set(model, texts, args.count)
    motions = model.sample_holistic(cs, steps=cfg.sample_steps, seed=_sampling_seed(args, cfg))
    out = _output_path(args, d, "sample.dmg1")
    return {"output": str(out), "sha256": write_dmg1(out, motions), "count": len(motions)}


def cmd_decompose(args, cfg, d) -> dict:
    texts = _parse_texts(args.texts)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    ds, vae, ev, model = _load_for_sampling(d)
    cs = _concept_set(model, texts, args.count)
    seed = _sampling_seed(args, cfg)
    outs = model.sample_decomposed(cs, steps=cfg.sample_steps, seeds=[seed + k for k in range(len(cs))])
    # chain-major: all samples of chain 0, then chain 1, ...
    motions = np.concatenate(outs, axis=0)
    out = _output_path(args, d, "decompose.dmg1")
    return {"output": str(out), "sha256": write_dmg1(out, motions), "chains": len(outs), "count": len(motions)}


def cmd_recombine(args, cfg, d) -> dict:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    for spec in (args.concept1, args.concept2):
        _parse_texts(spec.rsplit("@", 1)[0] if "@" in spec else spec)
    ds, vae, ev, model = _load_for_sampling(d)
    cs = [_recombine_concept(model, s, args.count) for s in (args.concept1, args.concept2)]
    motions = model.sample_holistic(cs, steps=cfg.sample_steps, seed=_sampling_seed(args, cfg))
    out = _output_path(args, d, "recombine.dmg1")
    return {"output": str(out), "sha256": write_dmg1(out, motions), "count": len(motions)}


def cmd_eval(args, cfg, d) -> dict:
    report_path = Path(args.report) if args.report else d["model"] / "report.json"
    ds, vae, ev, model = _load_for_sampling(d)
    report = P.stage_eval(cfg, model, ev, ds, report_path)
    if not report.check_finite():
        raise FloatingPointError("metric report contains non-finite values")
    sys.stdout.write(report.to_table())
    return {"report": str(report_path), "sha256": P.file_sha256(report_path)}


def cmd_export(args, cfg, d) -> dict:
    src = Path(args.input)
    if not src.is_file():
        raise FileNotFoundError(f"input {src} does not exist")
    motions = read_dmg1(src)
    out = Path(args.output_dir) if args.output_dir else d["out"] / "export"
    want_csv = args.csv or not args.svg
    paths = export_motions(motions, out, stem=src.stem, svg=args.svg, csv_files=want_csv)
    return {"output_dir": str(out), "files": len(paths)}


COMMANDS = {
    "gen-data": cmd_gen_data, "train-vae": cmd_train_vae, "train-eval": cmd_train_eval,
    "train-diffusion": cmd_train_diffusion, "sample": cmd_sample, "decompose": cmd_decompose,
    "recombine": cmd_recombine, "eval": cmd_eval, "export": cmd_export,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        d = _dirs(args)
        result = COMMANDS[args.command](args, cfg, d)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail("usage", exc, EXIT_USAGE)
    except P.MissingCheckpoint as exc:
        return _fail("missing-checkpoint", exc, EXIT_MISSING)
    except FileNotFoundError as exc:
        return _fail("missing-file", exc, EXIT_FAIL)
    except (ValueError, FloatingPointError, OSError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_FAIL)
    print(json.dumps({"command": args.command, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
