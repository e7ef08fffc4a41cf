import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from ors_lab import nn


def _loss_setup(widths, layer_norm, seed=0, n=7):
    rng = np.random.default_rng(seed)
    net = nn.init_mlp(widths, rng, layer_norm=layer_norm)
    x = rng.normal(size=(n, widths[0]))
    w = rng.normal(size=(n, widths[-1]))

    def loss():
        return float((nn.forward(net, x) * w).sum())

    return net, x, w, loss


@pytest.mark.parametrize("widths", [[3, 1], [4, 8, 2], [5, 16, 16, 3], [2, 6, 6, 6, 4]])
@pytest.mark.parametrize("layer_norm", [True, False])
def test_parameter_gradients_match_finite_differences(widths, layer_norm):
    net, x, w, loss = _loss_setup(widths, layer_norm)
    grads, _ = nn.backward(net, x, w)
    chk = nn.gradient_check(loss, net.params, grads, np.random.default_rng(1), probes=32)
    assert chk.ok(1e-5), chk


@pytest.mark.parametrize("layer_norm", [True, False])
def test_input_gradient_matches_finite_differences(layer_norm):
    net, x, w, _ = _loss_setup([4, 12, 12, 3], layer_norm)
    _, gin = nn.backward(net, x, w)
    eps = 1e-6
    for i, j in [(0, 0), (3, 2), (6, 3), (2, 1)]:
        xp, xm = x.copy(), x.copy()
        xp[i, j] += eps
        xm[i, j] -= eps
        fd = ((nn.forward(net, xp) - nn.forward(net, xm)) * w).sum() / (2 * eps)
        assert abs(fd - gin[i, j]) <= 1e-5 * max(abs(fd) + abs(gin[i, j]), 1e-7)


def test_identity_activation_path_is_affine():
    rng = np.random.default_rng(0)
    net = nn.init_mlp([3, 5, 2], rng, layer_norm=False, activation="identity")
    x, y = rng.normal(size=(2, 3))
    lhs = nn.forward(net, 2 * x - y)
    rhs = 2 * nn.forward(net, x) - nn.forward(net, y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@given(st.floats(-20, 20, allow_nan=False))
def test_gelu_is_exact_gaussian_cdf_form(x):
    assert nn.gelu(x) == pytest.approx(x * norm.cdf(x), abs=1e-12)


@given(st.floats(-8, 8, allow_nan=False))
def test_gelu_grad_matches_central_difference(x):
    eps = 1e-6
    fd = (nn.gelu(x + eps) - nn.gelu(x - eps)) / (2 * eps)
    assert nn.gelu_grad(x) == pytest.approx(fd, abs=1e-7)


def test_single_vector_input_keeps_rank():
    rng = np.random.default_rng(0)
    net = nn.init_mlp([3, 4, 2], rng)
    x = rng.normal(size=3)
    assert nn.forward(net, x).shape == (2,)
    np.testing.assert_allclose(nn.forward(net, x), nn.forward(net, x[None])[0])


def test_shape_errors():
    rng = np.random.default_rng(0)
    net = nn.init_mlp([3, 4, 2], rng)
    with pytest.raises(nn.ShapeError):
        nn.forward(net, np.zeros((2, 4)))
    with pytest.raises(nn.ShapeError):
        nn.backward(net, np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(nn.ShapeError):
        nn.init_mlp([3, 0, 2], rng)


def test_layer_norm_output_is_normalized_before_gain():
    rng = np.random.default_rng(0)
    net = nn.init_mlp([4, 32, 1], rng)
    _, cache = nn.forward_cache(net, rng.normal(size=(10, 4)))
    zhat = cache[0]["zhat"]
    np.testing.assert_allclose(zhat.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(zhat.var(axis=1), 1.0, rtol=1e-3)


def test_adam_first_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = nn.AdamState.for_params(params, lr=0.1)
    nn.adam_step(params, {"w": np.array([0.5, -4.0, 1e-3])}, state)
    # bias-corrected first step is lr * sign(g) up to eps
    np.testing.assert_allclose(params["w"], [0.9, -1.9, 2.9], atol=1e-4)


def test_adam_rejects_non_finite_gradients():
    params = {"w": np.zeros(2)}
    state = nn.AdamState.for_params(params)
    with pytest.raises(FloatingPointError, match="'w'"):
        nn.adam_step(params, {"w": np.array([np.nan, 0.0])}, state)
    assert state.step == 0


def test_adam_minimizes_quadratic():
    params = {"w": np.array([5.0, -3.0])}
    state = nn.AdamState.for_params(params, lr=0.05)
    for _ in range(2000):
        nn.adam_step(params, {"w": 2 * params["w"]}, state)
    np.testing.assert_allclose(params["w"], 0.0, atol=1e-2)


@given(st.floats(1e-3, 1.0))
@settings(max_examples=25)
def test_polyak_interpolates(rate):
    rng = np.random.default_rng(0)
    src = nn.init_mlp([2, 3, 1], rng)
    tgt = nn.TargetCopy({k: np.zeros_like(v) for k, v in src.params.items()}, rate)
    nn.polyak_update(tgt, src)
    for k, v in src.params.items():
        np.testing.assert_allclose(tgt.params[k], rate * v, rtol=1e-12, atol=1e-15)


def test_polyak_rate_one_copies_and_bad_rates_rejected():
    rng = np.random.default_rng(0)
    src = nn.init_mlp([2, 3, 1], rng)
    tgt = nn.TargetCopy({k: rng.normal(size=v.shape) for k, v in src.params.items()}, 1.0)
    nn.polyak_update(tgt, src)
    for k in src.params:
        assert np.array_equal(tgt.params[k], src.params[k])
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            nn.polyak_update(tgt, src, bad)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    net = nn.init_mlp([3, 8, 2], rng)
    state = nn.AdamState.for_params(net.params, lr=1e-3)
    nn.adam_step(net.params, {k: np.ones_like(v) for k, v in net.params.items()}, state)
    path = tmp_path / "ck.json"
    nn.save_checkpoint(path, {"f": net}, {"f": state}, {"note": 1})
    nets, adam, extra = nn.load_checkpoint(path)
    x = rng.normal(size=(4, 3))
    assert np.array_equal(nn.forward(nets["f"], x), nn.forward(net, x))
    assert adam["f"].step == 1 and extra == {"note": 1}
    for k in state.m:
        assert np.array_equal(adam["f"].m[k], state.m[k])


def test_checkpoint_rejects_unknown_format(tmp_path):
    path = tmp_path / "ck.json"
    path.write_text(json.dumps({"format_version": 99}))
    with pytest.raises(ValueError, match="format"):
        nn.load_checkpoint(path)


def test_gradient_check_detects_wrong_gradient():
    net, x, w, loss = _loss_setup([3, 4, 1], True)
    grads, _ = nn.backward(net, x, w)
    bad = {k: 1.1 * v for k, v in grads.items()}
    assert not nn.gradient_check(loss, net.params, bad, np.random.default_rng(0)).ok(1e-5)
