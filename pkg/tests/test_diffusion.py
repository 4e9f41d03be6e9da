"""Noise schedule, DCA and composition identities, variant losses, sampling contracts."""
from __future__ import annotations

from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compmotion import diffusion as Dm
from compmotion.data import ALL_PAIRS
from compmotion.diffusion import (CompositionalDiffusion, Denoiser, DenoiserConfig, TrainConfig,
                                  VariantConfig, compose_eps, dca, denoise_eps, make_schedule, q_sample,
                                  respace)
from compmotion.tensor import core as F
from compmotion.tensor.core import Tape
from compmotion.tensor.gradcheck import grad_check
from compmotion.tensor.params import ParameterStore
from compmotion.text import TextEncoder
from compmotion.vae import MotionVAE, VaeConfig

TINY = DenoiserConfig(layers=1, width=16, heads=2, ff_mult=2)


def _denoiser(seed=0, cfg=TINY):
    return Denoiser(ParameterStore(), "denoiser", cfg, np.random.default_rng(seed))


def _model(variant="exp", mode="latent", seed=0, **kw):
    rng = np.random.default_rng(seed)
    vae = MotionVAE(ParameterStore(), "vae", VaeConfig(width=8, seed=seed))
    enc = TextEncoder(ParameterStore(), "text", rng, dim=64)
    return CompositionalDiffusion(vae, enc, np.zeros(6), np.ones(6), VariantConfig(variant=variant, mode=mode, **kw),
                                  TINY, TrainConfig(batch_size=4, seed=seed), seed=seed)


def _rand(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


# -- schedule ---------------------------------------------------------------


def test_schedule_examples():
    s = make_schedule()
    assert s.T == 1000
    assert s.alpha_bars[0] == 1.0 - 1e-4
    assert s.alpha_bars[-1] < s.alpha_bars[0]
    assert s.posterior_var[0] == s.betas[0]


def test_alpha_bar_matches_high_precision_product():
    getcontext().prec = 50
    betas = [Decimal(1) / Decimal(10_000) + (Decimal(2) / Decimal(100) - Decimal(1) / Decimal(10_000))
             * Decimal(i) / Decimal(999) for i in range(1000)]
    prod = Decimal(1)
    for b in betas:
        prod *= 1 - b
    got = make_schedule(1000, 1e-4, 0.02).alpha_bars[-1]
    assert abs(Decimal(float(got)) - prod) / prod < Decimal("1e-9")


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 2000), st.floats(1e-6, 0.1), st.floats(1.0, 20.0))
def test_schedule_invariants(T, beta_1, ratio):
    beta_T = min(beta_1 * ratio, 0.5)
    s = make_schedule(T, beta_1, beta_T)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all(s.eta > 0)
    assert np.all((s.posterior_var > 0) & (s.posterior_var <= s.betas * (1 + 1e-12)))


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_parameters(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_q_sample_examples():
    s = make_schedule()
    z0 = _rand((2, 16, 16), 0)
    eps = _rand((2, 16, 16), 1)
    np.testing.assert_allclose(q_sample(s, z0, 37, np.zeros_like(z0)), np.sqrt(s.alpha_bars[36]) * z0)
    np.testing.assert_allclose(q_sample(s, np.zeros_like(z0), 500, eps), np.sqrt(1 - s.alpha_bars[499]) * eps)
    per = q_sample(s, z0, np.array([1, 1000]), eps)
    np.testing.assert_allclose(per[1], q_sample(s, z0[1:], 1000, eps[1:])[0])
    with pytest.raises(ValueError):
        q_sample(s, z0, 0, eps)
    with pytest.raises(ValueError):
        q_sample(s, z0, 1001, eps)
    with pytest.raises(ValueError):
        q_sample(s, z0, 5, eps[:1])


@pytest.mark.parametrize("t", [1, 100, 500, 1000])
def test_q_sample_variance_monte_carlo(t):
    s = make_schedule()
    n = 100_000
    rng = np.random.default_rng(t)
    z0 = np.full(n, 0.7)
    zt = q_sample(s, z0, t, rng.standard_normal(n))
    var = zt.var(ddof=1)
    target = 1 - s.alpha_bars[t - 1]
    # standard error of a Gaussian sample variance: sigma^2 sqrt(2 / (n - 1))
    se = target * np.sqrt(2 / (n - 1))
    assert abs(var - target) <= 3 * se
    assert abs(zt.mean() - np.sqrt(s.alpha_bars[t - 1]) * 0.7) <= 3 * np.sqrt(target / n)


def test_respace_preserves_alpha_bars():
    s = make_schedule()
    ts, r = respace(s, 50)
    assert len(ts) == 50 and ts[0] == 1 and ts[-1] == 1000
    assert np.all(np.diff(ts) > 0)
    np.testing.assert_allclose(r.alpha_bars, s.alpha_bars[ts - 1], rtol=1e-12)
    full_ts, full = respace(s, 1000)
    assert full is s and np.array_equal(full_ts, np.arange(1, 1001))
    with pytest.raises(ValueError):
        respace(s, 1001)
    with pytest.raises(ValueError):
        respace(s, 0)


# -- DCA and composition -------------------------------------------------------


def _cross(den):
    return den.blocks[0].cross_attn


def test_dca_single_concept_is_plain_cross_attention():
    den = _denoiser()
    x = F.tensor(_rand((2, 16, 16), 0))
    c = F.tensor(_rand((2, 4, 64), 1))
    attn = _cross(den)
    assert dca(attn, x, [c]).data.tobytes() == attn(x, c).data.tobytes()
    with pytest.raises(ValueError):
        dca(attn, x, [])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_dca_identities(seed):
    with F.default_dtype(np.float64):
        den = _denoiser(seed)
        attn = _cross(den)
        x = F.tensor(_rand((2, 16, 16), seed))
        c1 = F.tensor(_rand((2, 4, 64), seed + 1))
        c2 = F.tensor(_rand((2, 4, 64), seed + 2))
        ca1, ca2 = attn(x, c1).data, attn(x, c2).data
        np.testing.assert_allclose(dca(attn, x, [c1, c1], "mean").data, ca1, atol=1e-6)
        np.testing.assert_allclose(dca(attn, x, [c1, c2], "sum").data, ca1 + ca2, atol=1e-6)
        np.testing.assert_allclose(dca(attn, x, [c1, c2], "mean").data, (ca1 + ca2) / 2, atol=1e-6)


def test_dca_shape_mismatch():
    den = _denoiser()
    x = F.tensor(_rand((2, 16, 16), 0))
    with pytest.raises(F.ShapeError):
        dca(_cross(den), x, [F.tensor(_rand((2, 4, 64), 1)), F.tensor(_rand((2, 3, 64), 1))])


@pytest.mark.parametrize("mode", ["latent", "semantic"])
def test_compose_duplicate_mean_identity(mode):
    den = _denoiser(3)
    z = _rand((3, 16, 16), 0)
    c = _rand((3, 4, 64), 1)
    t = np.array([5, 300, 999])
    single = denoise_eps(den, z, c, t).data
    dup = compose_eps(den, z, [c, c], t, mode, "mean").data
    assert np.max(np.abs(dup - single)) <= 1e-6


def test_compose_latent_sum_is_branch_sum():
    den = _denoiser(4)
    z = _rand((2, 16, 16), 0)
    c1, c2 = _rand((2, 4, 64), 1), _rand((2, 4, 64), 2)
    t = 77
    expect = denoise_eps(den, z, c1, t).data + denoise_eps(den, z, c2, t).data
    np.testing.assert_allclose(compose_eps(den, z, [c1, c2], t, "latent", "sum").data, expect, atol=1e-5)


def test_compose_single_concept_is_plain_forward():
    den = _denoiser(5)
    z = _rand((2, 16, 16), 0)
    c = _rand((2, 4, 64), 1)
    plain = denoise_eps(den, z, c, 10).data
    for mode in ("latent", "semantic"):
        assert compose_eps(den, z, [c], 10, mode).data.tobytes() == plain.tobytes()
    with pytest.raises(ValueError):
        compose_eps(den, z, [], 10)
    with pytest.raises(ValueError):
        compose_eps(den, z, [c], 10, "spectral")


def test_denoiser_contract():
    den = _denoiser()
    z = _rand((2, 16, 16), 0)
    c = _rand((2, 4, 64), 1)
    out = denoise_eps(den, z, c, 3)
    assert out.shape == (2, 16, 16)
    assert out.data.tobytes() == denoise_eps(den, z, c, 3).data.tobytes()
    with pytest.raises(F.ShapeError):
        denoise_eps(den, _rand((2, 15, 16), 0), c, 3)
    with pytest.raises(F.ShapeError):
        denoise_eps(den, z, _rand((2, 4, 32), 1), 3)
    with pytest.raises(ValueError):
        DenoiserConfig(width=30, heads=4)


def test_variant_config_validation():
    for bad in (dict(tau=1.5), dict(alpha_o=-1.0), dict(variant="x"), dict(mode="x"), dict(aggregation="max"),
                dict(variant="sc", K=3)):
        with pytest.raises(ValueError):
            VariantConfig(**bad)
    assert VariantConfig(mode="latent").alpha_o == 2.0
    assert VariantConfig(mode="semantic").alpha_o == 1.0


# -- losses ------------------------------------------------------------------


def _batch(model, n=2, seed=0):
    rng = np.random.default_rng(seed)
    z0 = rng.normal(size=(n, 16, 16))
    pairs = [ALL_PAIRS[i % 16] for i in range(3, 3 + n)]
    t, eps, mask = model.draw_batch(n, rng)
    return z0, pairs, t, eps, mask


@pytest.mark.parametrize("variant", ["oss", "sc"])
def test_zero_weights_make_total_equal_mse(variant):
    model = _model(variant, alpha_o=0.0, alpha_sc=0.0)
    z0, pairs, t, eps, mask = _batch(model)
    terms = model.losses(z0, pairs, t, eps)
    assert terms["total"].item() == terms["mse"].item()
    assert terms["ortho"] is not None


def test_exp_total_is_mse_and_tau_one_uses_holistic():
    model = _model("exp", tau=1.0)
    z0, pairs, t, eps, mask = _batch(model)
    assert mask.all()
    terms = model.losses(z0, pairs, t, eps, mask)
    assert terms["total"] is terms["mse"]
    # duplicated holistic text under mean aggregation is plain conditional training
    zt = q_sample(model.schedule, z0, t, eps).astype(np.float32)
    plain = denoise_eps(model.denoiser, zt, model.text.holistic(pairs), t)
    expect = np.mean((plain.data.astype(np.float64) - eps) ** 2)
    assert terms["mse"].item() == pytest.approx(expect, rel=1e-5)


def test_sc_loss_adds_weighted_terms():
    model = _model("sc", alpha_o=0.5, alpha_sc=2.0)
    z0, pairs, t, eps, _ = _batch(model)
    terms = model.losses(z0, pairs, t, eps)
    expect = terms["mse"].item() + 2.0 * terms["sc"].item() + 0.5 * terms["ortho"].item()
    assert terms["total"].item() == pytest.approx(expect, rel=1e-6)


@pytest.mark.parametrize("variant,mode", [(v, m) for v in Dm.VARIANTS for m in Dm.MODES])
def test_variant_total_loss_gradient_check_f64(variant, mode):
    with F.default_dtype(np.float64):
        model = _model(variant, mode, seed=1, tau=0.5)
        z0, pairs, t, eps, mask = _batch(model, n=1, seed=2)
        params = list(model.trainable().values())
        err = grad_check(lambda *_: model.losses(z0, pairs, t, eps, mask)["total"], params,
                         max_coords=3, seed=3)
    assert err <= 1e-4


def test_denoiser_mse_gradient_check_full_f64():
    with F.default_dtype(np.float64):
        den = _denoiser(7)
        z = _rand((1, 16, 16), 0)
        c = _rand((1, 4, 64), 1)
        target = F.tensor(_rand((1, 16, 16), 2))
        params = list(den.parameters().values())
        err = grad_check(lambda *_: F.mse(denoise_eps(den, z, c, 250), target), params, max_coords=6)
    assert err <= 1e-4


def test_train_step_reports_all_terms():
    model = _model("sc")
    z0, pairs, *_ = _batch(model, n=4)
    res = model.train_step(z0, pairs)
    assert model.step == 1
    for key in ("mse", "ortho", "sc", "total", "grad_norm"):
        assert np.isfinite(getattr(res, key))
    assert res.lr == model.train_config.lr


def test_lr_schedule():
    tc = TrainConfig(lr=2e-4, lr_final=2e-5, decay_after=50_000)
    assert tc.lr_at(0) == 2e-4 and tc.lr_at(49_999) == 2e-4 and tc.lr_at(50_000) == 2e-5


def test_seeded_training_is_bit_identical(tmp_path):
    digests = []
    for run in ("a", "b"):
        model = _model("oss", seed=5)
        rng = np.random.default_rng(9)
        latents = rng.normal(size=(32, 16, 16)).astype(np.float32)
        labels = [ALL_PAIRS[i % 16] for i in range(32)]
        model.fit(latents, labels, steps=100)
        digests.append(model.save(tmp_path / run))
    assert digests[0] == digests[1]
    assert (tmp_path / "a" / "diffusion.ckpt").read_bytes() == (tmp_path / "b" / "diffusion.ckpt").read_bytes()


# -- sampling ----------------------------------------------------------------


def test_sampling_contract_and_determinism():
    model = _model("exp")
    cs = model.concept_texts([("straight",), ("wave_left",)], batch=2)
    a = model.sample_holistic(cs, steps=5, seed=3)
    b = model.sample_holistic(cs, steps=5, seed=3)
    assert a.shape == (2, 64, 6) and a.dtype == np.float32
    assert a.tobytes() == b.tobytes()
    assert model.sample_holistic(cs, steps=5, seed=4).tobytes() != a.tobytes()
    with pytest.raises(ValueError):
        model.sample_holistic(cs, steps=1001)
    with pytest.raises(ValueError):
        model.sample_decomposed(cs, steps=1001)


def test_chain_streams_are_independent_of_batch_size():
    model = _model("exp")
    cs2 = model.concept_texts([("circle",), ("idle",)], batch=2)
    cs1 = model.concept_texts([("circle",), ("idle",)], batch=1)
    both = model.sample_holistic(cs2, steps=4, seed=1, decode=False)
    first = model.sample_holistic(cs1, steps=4, seed=1, decode=False)
    np.testing.assert_allclose(both[0], first[0], atol=1e-5)


def test_identical_decomposed_chains_are_identical():
    model = _model("exp", mode="semantic")
    c = model.concept_texts([("zigzag",)], batch=1)[0]
    outs = model.sample_decomposed([c, c], steps=4, seeds=[8, 8])
    assert len(outs) == 2 and outs[0].shape == (1, 64, 6)
    assert outs[0].tobytes() == outs[1].tobytes()
    with pytest.raises(ValueError):
        model.sample_decomposed([c, c], steps=4, seeds=[1])


def test_condition_sources():
    pairs = [("circle", "raise_both"), ("stop", "idle")]
    exp = _model("exp")
    hol = exp.condition_for(pairs)
    assert len(hol) == 2 and np.array_equal(hol[0], hol[1])
    pre = exp.condition_for(pairs, "predefined")
    np.testing.assert_array_equal(pre[0][0], exp.text.get(("circle",)))
    np.testing.assert_array_equal(pre[1][1], exp.text.get(("idle",)))
    oss = _model("oss")
    proj = oss.condition_for(pairs)
    assert len(proj) == 2 and proj[0].shape == (2, 4, 64)
    assert not np.allclose(proj[0], proj[1])


def test_save_and_reload(tmp_path):
    model = _model("sc", mode="semantic", seed=2)
    z0, pairs, *_ = _batch(model, n=4)
    model.train_step(z0, pairs)
    model.save(tmp_path)
    variant, den, train, step = Dm.load_diffusion_config(tmp_path)
    assert variant == model.variant and den == model.denoiser.config and step == 1
    other = _model("sc", mode="semantic", seed=9)
    other.load_weights(tmp_path / "diffusion.ckpt")
    for name, p in model.store.items():
        assert other.store[name].data.tobytes() == p.data.tobytes()


def test_tape_is_not_needed_for_inference():
    den = _denoiser()
    with Tape() as tape:
        pass
    out = denoise_eps(den, _rand((1, 16, 16), 0), _rand((1, 4, 64), 1), 1)
    assert not tape.nodes and out.shape == (1, 16, 16)
