"""Motion VAE: contracts, KL closed forms, gradients and trained-model properties."""
from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compmotion.data import oracle_classify
from compmotion.tensor import core as F
from compmotion.tensor.gradcheck import grad_check
from compmotion.tensor.params import ParameterStore
from compmotion.vae import MotionVAE, VaeConfig, kl_divergence, kl_term, reconstruction_mse


def _vae(width=16, seed=0):
    return MotionVAE(ParameterStore(), "vae", VaeConfig(width=width, seed=seed))


def test_shapes_and_determinism():
    vae = _vae()
    x = np.random.default_rng(0).normal(size=(64, 6)).astype(np.float32)
    mu, logvar = vae.encode(x)
    assert mu.shape == (16, 16) and logvar.shape == (16, 16)
    mu2, logvar2 = vae.encode(x)
    assert np.array_equal(mu.data, mu2.data) and np.array_equal(logvar.data, logvar2.data)
    out = vae.decode(mu)
    assert out.shape == (64, 6)
    assert np.array_equal(out.data, vae.decode(mu).data)
    batch = vae.encode(np.stack([x, x]))[0]
    assert batch.shape == (2, 16, 16)
    np.testing.assert_allclose(batch.data[1], mu.data, atol=1e-5)


def test_wrong_shapes_rejected():
    vae = _vae()
    with pytest.raises(F.ShapeError):
        vae.encode(np.zeros((60, 6)))
    with pytest.raises(F.ShapeError):
        vae.encode(np.zeros((64, 5)))
    with pytest.raises(F.ShapeError):
        vae.decode(np.zeros((16, 8)))
    with pytest.raises(F.ShapeError):
        vae.decode(np.zeros((15, 16)))
    with pytest.raises(ValueError):
        VaeConfig(length=62)


def test_kl_examples():
    assert kl_divergence(np.zeros(4), np.zeros(4)) == 0.0
    assert kl_divergence(1.0, 0.0) == pytest.approx(0.5)
    assert kl_term(F.tensor([1.0]), F.tensor([0.0])).item() == pytest.approx(0.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=8))
def test_kl_nonnegative(pairs):
    assert kl_divergence([p[0] for p in pairs], [p[1] for p in pairs]) >= 0


_grid = st.integers(-500, 500).map(lambda i: i / 100)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(_grid, _grid), min_size=1, max_size=8))
def test_kl_nonnegative_with_equality_only_at_prior(pairs):
    mu = np.array([p[0] for p in pairs])
    lv = np.array([p[1] for p in pairs])
    kl = kl_divergence(mu, lv)
    if np.any(mu != 0) or np.any(lv != 0):
        assert kl > 0
    else:
        assert kl == 0


def test_encoder_decoder_gradient_check_f64():
    with F.default_dtype(np.float64):
        vae = _vae(width=8)
        x = F.tensor(np.random.default_rng(1).normal(size=(1, 64, 6)))
        eps = np.random.default_rng(2).standard_normal((1, 16, 16))
        params = list(vae.trainable().values())
        err = grad_check(lambda *_: vae.loss(x, eps)[0], params, max_coords=4)
    assert err <= 1e-5


def test_input_gradient_check_f64():
    with F.default_dtype(np.float64):
        vae = _vae(width=8)
        x = np.random.default_rng(3).normal(size=(1, 64, 6))
        err = grad_check(lambda xt: F.mean(F.square(vae.decode(vae.encode(xt)[0]))), x, max_coords=40)
    assert err <= 1e-5


def test_calibration_standardizes_latents():
    vae = _vae()
    x = np.random.default_rng(4).normal(size=(32, 64, 6)).astype(np.float32)
    before = vae.decode(vae.encode(x[:2])[0]).data
    vae.calibrate_latent(x)
    mu = vae.encode_dataset(x).reshape(-1, 16).astype(np.float64)
    np.testing.assert_allclose(mu.mean(axis=0), 0, atol=1e-4)
    np.testing.assert_allclose(mu.std(axis=0), 1, atol=1e-3)
    # standardization is an affine reparameterization: decode(encode(x)) is unchanged
    np.testing.assert_allclose(vae.decode(vae.encode(x[:2])[0]).data, before, atol=1e-4)


# -- trained model -------------------------------------------------------------


@pytest.mark.slow
def test_trained_vae_reconstructs_test_split(toy_stack):
    ds, vae, _ = toy_stack
    assert reconstruction_mse(vae, ds.normalized("test")) <= 0.05


@pytest.mark.slow
def test_trained_vae_reconstructions_keep_labels(toy_stack):
    ds, vae, _ = toy_stack
    x = ds.normalized("test")[:400]
    recon = ds.denormalize(vae.decode_dataset(vae.encode_dataset(x)))
    labels = ds.splits["test"].labels[:400]
    acc = np.mean([oracle_classify(m) == tuple(p) for m, p in zip(recon, labels)])
    assert acc >= 0.95


@pytest.mark.slow
def test_recon_loss_decreases_over_first_epochs(toy_stack, run_root):
    recs = [json.loads(line) for line in (run_root / "vae" / "vae_log.jsonl").read_text().splitlines()]
    recon = [r["recon"] for r in recs[:5]]
    assert len(recon) == 5
    assert all(b < a for a, b in zip(recon, recon[1:])), recon


@pytest.mark.slow
def test_latent_statistics_on_train_split(toy_stack):
    ds, vae, _ = toy_stack
    mu = vae.encode_dataset(ds.normalized("train")).reshape(-1, 16).astype(np.float64)
    assert np.all(np.abs(mu.mean(axis=0)) <= 0.5)
    assert np.all((mu.std(axis=0) >= 0.5) & (mu.std(axis=0) <= 2.0))


@pytest.mark.slow
def test_linear_probe_separates_straight_from_circle(toy_stack):
    ds, vae, _ = toy_stack

    def latents(split):
        keep = [i for i, p in enumerate(ds.splits[split].labels) if p[0] in ("straight", "circle")]
        z = vae.encode_dataset(ds.normalized(split)[keep]).reshape(len(keep), -1).astype(np.float64)
        y = np.array([ds.splits[split].labels[i][0] == "circle" for i in keep], dtype=np.float64)
        return z, y

    z_tr, y_tr = latents("train")
    z_te, y_te = latents("test")
    # ridge-regularized least-squares probe on +-1 targets
    a = np.hstack([z_tr, np.ones((len(z_tr), 1))])
    w = np.linalg.solve(a.T @ a + 1e-2 * np.eye(a.shape[1]), a.T @ (2 * y_tr - 1))
    pred = np.hstack([z_te, np.ones((len(z_te), 1))]) @ w > 0
    assert np.mean(pred == (y_te > 0.5)) > 0.95
