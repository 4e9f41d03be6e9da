"""Tensor ops, tape, gradient checking, parameter store and AdamW."""
from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from compmotion.tensor import core as F
from compmotion.tensor import (ParameterStore, adamw_step, clip_grad_norm, decode_checkpoint,
                               encode_checkpoint, grad_check, read_checkpoint)
from compmotion.tensor.core import NonFiniteError, ShapeError, Tape, Tensor
from op_catalogue import OPS, op_error

F64 = np.float64


def _leaf(x):
    return Tensor(np.asarray(x, dtype=F64), requires_grad=True)


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_matches_finite_differences_at_ten_points(name):
    for seed in range(10):
        err = op_error(name, seed)
        assert err <= 1e-5, f"{name} seed {seed}: {err}"


def test_timestep_embedding_shape_and_values():
    emb = F.timestep_embedding(np.array([0, 5]), 8)
    assert emb.shape == (2, 8)
    np.testing.assert_allclose(emb.data[0], [1, 1, 1, 1, 0, 0, 0, 0])
    freqs = np.exp(-np.log(10000.0) * np.arange(4) / 4)
    np.testing.assert_allclose(emb.data[1], np.concatenate([np.cos(5 * freqs), np.sin(5 * freqs)]), rtol=1e-6)


# -- documented examples ----------------------------------------------------


def test_matmul_identity():
    a = np.random.default_rng(0).standard_normal((3, 7)).astype(np.float32)
    np.testing.assert_array_equal(F.matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(a)).data, a)


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(F.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, rtol=1e-7)


def test_smooth_l1_of_equal_inputs_is_zero():
    a = Tensor(np.random.default_rng(1).standard_normal((4, 4)))
    assert float(F.smooth_l1(a, a).data) == 0.0


def test_backward_of_sum_is_ones():
    x = _leaf(np.arange(5.0))
    with Tape() as tape:
        loss = F.sum(x)
    np.testing.assert_array_equal(tape.gradient(loss, x), np.ones(5))
    np.testing.assert_array_equal(F.backward(loss, x), np.ones(5))


def test_norm_of_wx_gradient_closed_form():
    with F.default_dtype(F64):
        w = _leaf([[1.0, -2.0], [0.5, 3.0]])
        x = Tensor(np.array([[2.0], [-1.0]]))
        with Tape() as tape:
            loss = F.sum(F.square(F.matmul(w, x)))
        g = tape.gradient(loss, w)
    wx = w.data @ x.data
    np.testing.assert_allclose(g, 2 * wx @ x.data.T, rtol=1e-12)


def _mlp(rng, dtype):
    w1 = Tensor(rng.standard_normal((4, 8)).astype(dtype), requires_grad=True)
    b1 = Tensor(rng.standard_normal(8).astype(dtype), requires_grad=True)
    w2 = Tensor(rng.standard_normal((8, 1)).astype(dtype), requires_grad=True)
    x = Tensor(rng.standard_normal((6, 4)).astype(dtype))
    fn = lambda a, b, c: F.mean(F.square(F.matmul(F.tanh(F.add(F.matmul(x, a), b)), c)))  # noqa: E731
    return fn, [w1, b1, w2]


def test_two_layer_mlp_gradients_f64():
    with F.default_dtype(F64):
        fn, params = _mlp(np.random.default_rng(3), F64)
        assert grad_check(fn, params) <= 1e-5


def test_two_layer_mlp_gradients_f32():
    fn, params = _mlp(np.random.default_rng(3), np.float32)
    assert grad_check(fn, params, eps=1e-2) <= 1e-3


def test_grad_check_examples():
    with F.default_dtype(F64):
        assert grad_check(lambda x: F.sum(F.square(x)), [_leaf([1.0, 2.0])], eps=1e-5) <= 1e-8
        x = _leaf([1.0, 2.0])
        assert grad_check(lambda x: F.scale(F.sum(x), 0.0), [x]) == 0.0
        rng = np.random.default_rng(4)
        pts = [_leaf(rng.standard_normal(8)), _leaf(rng.standard_normal(8)), _leaf(rng.standard_normal(8))]
        fn = lambda a, g, b: F.sum(F.square(F.softmax(F.layer_norm(a, g, b))))  # noqa: E731
        assert grad_check(fn, pts) <= 1e-5


def test_unused_leaf_gets_zero_gradient():
    x, y = _leaf([1.0, 2.0]), _leaf([[3.0]])
    with Tape() as tape:
        loss = F.sum(F.square(x))
    gx, gy = tape.gradient(loss, [x, y])
    np.testing.assert_array_equal(gy, np.zeros((1, 1)))
    np.testing.assert_array_equal(gx, 2 * x.data)


def test_non_scalar_loss_rejected():
    x = _leaf([1.0, 2.0])
    with Tape() as tape:
        y = F.square(x)
    with pytest.raises(ShapeError, match="backward"):
        tape.gradient(y, x)
    with pytest.raises(ShapeError):
        F.backward(y, x)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        F.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    msg = str(exc.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 5)" in msg
    with pytest.raises(ShapeError, match="add"):
        F.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_inputs_rejected(bad):
    x = np.ones((2, 2))
    x[0, 1] = bad
    for op in (F.exp, F.tanh, F.gelu, F.softmax, lambda t: F.add(t, t)):
        with pytest.raises(NonFiniteError):
            op(Tensor(x))


def test_ops_record_only_under_tape():
    x = _leaf([1.0])
    y = F.square(x)
    assert y._tape is None
    with Tape() as tape:
        F.square(Tensor(np.ones(2)))  # no grad input, nothing recorded
        F.square(x)
    assert len(tape) == 1


def test_tape_replay_gives_identical_gradients():
    rng = np.random.default_rng(5)
    fn, params = _mlp(rng, np.float32)
    grads = []
    for _ in range(2):
        with Tape() as tape:
            loss = fn(*params)
        grads.append(tape.gradient(loss, params))
    for a, b in zip(*grads):
        np.testing.assert_array_equal(a, b)


def test_tape_is_topologically_ordered():
    x = _leaf([1.0, 2.0])
    with Tape() as tape:
        y = F.square(x)
        z = F.add(y, x)
        F.sum(z)
    seen = {id(x)}
    for node in tape.nodes:
        for inp in node.inputs:
            assert id(inp) in seen or not inp.requires_grad
        seen.add(id(node.out))


def test_default_dtype_switch():
    assert F.get_default_dtype() == np.float32
    with F.default_dtype(np.float64):
        assert F.tensor([1.0]).dtype == np.float64
    assert F.tensor([1.0]).dtype == np.float32


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = F.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_forward_and_gradients_are_deterministic(seed):
    out = []
    for _ in range(2):
        fn, params = _mlp(np.random.default_rng(seed), np.float32)
        with Tape() as tape:
            loss = fn(*params)
        out.append((loss.data.copy(), tape.gradient(loss, params)))
    assert out[0][0].tobytes() == out[1][0].tobytes()
    for a, b in zip(out[0][1], out[1][1]):
        assert a.tobytes() == b.tobytes()


# -- parameter store, checkpoint, optimizer ----------------------------------


def test_parameter_names_unique():
    store = ParameterStore()
    store.add("a.w", np.zeros(2))
    with pytest.raises(KeyError):
        store.add("a.w", np.zeros(2))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    store = ParameterStore()
    store.add("enc.w", rng.standard_normal((3, 4)))
    store.add("enc.b", rng.standard_normal(4))
    store.add("scalar", np.array(2.5))
    digest = store.save(tmp_path / "m.ckpt")
    other = ParameterStore()
    other.add("enc.w", np.zeros((3, 4)))
    other.add("enc.b", np.zeros(4))
    other.add("scalar", np.array(0.0))
    other.load(tmp_path / "m.ckpt")
    for name in store:
        assert store[name].data.tobytes() == other[name].data.tobytes()
    assert other.save(tmp_path / "n.ckpt") == digest


def test_checkpoint_layout_is_as_documented():
    state = {"w": np.array([[1.0, 2.0, 3.0]], dtype=np.float32)}
    raw = encode_checkpoint(state)
    expected = (b"DMGC" + struct.pack("<I", 1) + struct.pack("<I", 1) + b"w" + struct.pack("<I", 2)
                + struct.pack("<II", 1, 3) + np.array([1, 2, 3], dtype="<f4").tobytes())
    assert raw == expected
    back = decode_checkpoint(raw)
    assert list(back) == ["w"] and back["w"].tobytes() == state["w"].tobytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(ValueError):
        read_checkpoint(p)


def test_adamw_zero_grad_no_decay_leaves_params():
    store = ParameterStore()
    w = store.add("w", np.array([1.0, -2.0]))
    before = w.data.copy()
    adamw_step(store, {"w": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(w.data, before)
    assert store.step == 1


def test_adamw_descends_on_square():
    store = ParameterStore()
    w = store.add("w", np.array(1.0))
    adamw_step(store, {"w": 2 * w.data}, lr=0.1)
    assert float(w.data) ** 2 < 1.0


def test_adamw_first_step_hand_computed():
    # g=1: m = 0.1, v = 0.001; bias-corrected m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    with F.default_dtype(F64):
        store = ParameterStore()
        w = store.add("w", np.array(0.5))
        adamw_step(store, {"w": np.array(1.0)}, lr=0.1, betas=(0.9, 0.999), eps=1e-8)
        assert float(w.data) == pytest.approx(0.5 - 0.1 / (1 + 1e-8), abs=1e-15)
        # decoupled decay scales the weight before the adaptive step
        store2 = ParameterStore()
        w2 = store2.add("w", np.array(0.5))
        adamw_step(store2, {"w": np.array(1.0)}, lr=0.1, weight_decay=0.01)
        assert float(w2.data) == pytest.approx(0.5 * (1 - 0.1 * 0.01) - 0.1 / (1 + 1e-8), abs=1e-15)


def test_adamw_missing_gradient_rejected():
    store = ParameterStore()
    store.add("a", np.zeros(1))
    store.add("b", np.zeros(1))
    with pytest.raises(KeyError, match="b"):
        adamw_step(store, {"a": np.zeros(1)}, lr=0.1)


def test_clip_grad_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    total = np.sqrt(sum((g ** 2).sum() for g in grads.values()))
    assert total == pytest.approx(1.0)
