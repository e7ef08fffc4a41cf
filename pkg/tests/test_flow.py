import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ors_lab import envs, exact, flow, nn
from ors_lab.flow import OccupancyConfig


def small_net(seed=0, state_dim=2, n_actions=3, gamma=0.9, hidden=(16, 16)):
    cfg = OccupancyConfig(gamma=gamma, hidden=hidden, target_rate=0.1)
    return flow.make_velocity_field(state_dim, np.random.default_rng(seed), n_actions=n_actions,
                                    config=cfg)


def perturb_target(net, seed=5, size=0.3):
    rng = np.random.default_rng(seed)
    for v in net.target.params.values():
        v += size * rng.standard_normal(v.shape)


def batch(n=6, seed=1):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(n, 2)), rng.integers(3, size=n), rng.normal(size=(n, 2)),
            rng.integers(3, size=n))


def test_single_euler_step_is_one_velocity_evaluation():
    net = small_net()
    s, a, _, _ = batch()
    x0 = np.random.default_rng(3).standard_normal((6, 2))
    out = flow.sample_future_batch(net, s, a, None, 1, x0=x0)
    np.testing.assert_allclose(out, x0 + net.velocity(np.zeros(6), s, a, x0))


def test_euler_error_shrinks_when_steps_double():
    net = small_net(hidden=(32, 32))
    s, a, _, _ = batch(50)
    x0 = np.random.default_rng(4).standard_normal((50, 2))
    ref = flow.sample_future_batch(net, s, a, None, 1024, x0=x0)
    errs = [np.abs(flow.sample_future_batch(net, s, a, None, k, x0=x0) - ref).max()
            for k in (4, 8, 16, 32)]
    for coarse, fine in zip(errs, errs[1:]):
        assert coarse / fine >= 1.5


def test_sampler_rejects_zero_steps_and_reports_divergence():
    net = small_net()
    s, a, _, _ = batch()
    with pytest.raises(ValueError):
        flow.sample_future_batch(net, s, a, np.random.default_rng(0), 0)
    x0 = np.zeros((6, 2))
    x0[2] = np.nan
    with pytest.raises(FloatingPointError, match="sample 2"):
        flow.sample_future_batch(net, s, a, None, 2, x0=x0)


def test_pretrain_gradient_matches_finite_differences():
    net = small_net()
    s, a, x1, _ = batch()
    _, grads = flow.pretrain_loss_and_grads(net, s, a, x1, np.random.default_rng(9))
    loss = lambda: flow.pretrain_loss_and_grads(net, s, a, x1, np.random.default_rng(9))[0]
    chk = nn.gradient_check(loss, net.mlp.params, grads, np.random.default_rng(0), probes=24)
    assert chk.ok(1e-5), chk


@pytest.mark.parametrize("mode", flow.FUTURE_TARGET_MODES)
def test_flow_gradient_matches_finite_differences(mode):
    net = small_net()
    perturb_target(net)
    s, a, s2, a2 = batch()
    args = (net, s, a, s2, a2, 0.9)
    _, grads, _ = flow.flow_loss_and_grads(*args, np.random.default_rng(9), 4, mode)
    loss = lambda: flow.flow_loss_and_grads(*args, np.random.default_rng(9), 4, mode)[0]
    chk = nn.gradient_check(loss, net.mlp.params, grads, np.random.default_rng(0), probes=24)
    assert chk.ok(1e-5), chk


def test_future_target_is_treated_as_data():
    """Recomputing the future branch with the target velocities frozen as
    plain arrays reproduces the gradient exactly."""
    net = small_net()
    perturb_target(net)
    s, a, s2, a2 = batch()
    gamma = 0.9
    _, grads, parts = flow.flow_loss_and_grads(net, s, a, s2, a2, gamma,
                                                np.random.default_rng(9), 4)
    rng = np.random.default_rng(9)
    nb = flow.make_flow_batch(s2, rng)
    _, g_next, _ = flow._regression(net, s, a, nb.xt, nb.t, nb.x1 - nb.x0, np.ones(6))
    x1 = flow.sample_future_batch(net, s2, a2, rng, 4, params=net.target.params)
    fb = flow.make_flow_batch(x1, rng)
    v_const = np.array(net.target_velocity(fb.t, s2, a2, fb.xt))
    _, g_fut, _ = flow._regression(net, s, a, fb.xt, fb.t, v_const, np.ones(6))
    for k in grads:
        assert np.abs(grads[k] - ((1 - gamma) * g_next[k] + gamma * g_fut[k])).max() < 1e-8
    assert set(grads) == set(net.mlp.params)


def test_loss_depends_on_target_but_grads_only_touch_online_params():
    net = small_net()
    s, a, s2, a2 = batch()
    before = {k: v.copy() for k, v in net.target.params.items()}
    l0, _, _ = flow.flow_loss_and_grads(net, s, a, s2, a2, 0.9, np.random.default_rng(9), 4)
    for v in net.mlp.params.values():                 # online edits leave the target alone
        v += 0.1
    for k, v in net.target.params.items():
        assert np.array_equal(v, before[k])
    for v in net.mlp.params.values():
        v -= 0.1
    perturb_target(net, size=1e-3)
    l1, _, _ = flow.flow_loss_and_grads(net, s, a, s2, a2, 0.9, np.random.default_rng(9), 4)
    assert l1 != l0


def test_gamma_zero_uses_next_state_branch_only():
    net = small_net()
    s, a, s2, a2 = batch()
    loss, grads, parts = flow.flow_loss_and_grads(net, s, a, s2, a2, 0.0, np.random.default_rng(2))
    assert parts["future"] == 0.0 and loss == parts["next"]
    ref, _ = flow.pretrain_loss_and_grads(net, s, a, s2, np.random.default_rng(2))
    assert loss == pytest.approx(ref)


def test_mixture_weights_parts():
    net = small_net()
    s, a, s2, a2 = batch()
    loss, _, parts = flow.flow_loss_and_grads(net, s, a, s2, a2, 0.7, np.random.default_rng(2))
    assert loss == pytest.approx(0.3 * parts["next"] + 0.7 * parts["future"])
    with pytest.raises(ValueError):
        flow.flow_loss_and_grads(net, s, a, s2, a2, 0.7, np.random.default_rng(2), mode="x")


@given(st.floats(0.0, 0.95))
@settings(max_examples=10, deadline=None)
def test_geometric_offsets_mean(gamma):
    k = flow.sample_geometric_offsets(gamma, 50_000, np.random.default_rng(0))
    assert k.min() >= 1
    assert k.mean() == pytest.approx(1 / (1 - gamma), rel=0.05)


def test_cosine_schedule_endpoints():
    cfg = OccupancyConfig(lr=1e-3, lr_final=1e-5)
    assert flow.cosine_lr(cfg, 0, 100) == pytest.approx(1e-3)
    assert flow.cosine_lr(cfg, 99, 100) == pytest.approx(1e-5)
    assert flow.cosine_lr(OccupancyConfig(lr=2e-3), 50, 100) == 2e-3


def test_config_validation():
    with pytest.raises(ValueError):
        OccupancyConfig(future_target_mode="mean")
    with pytest.raises(ValueError):
        OccupancyConfig(gamma=1.0)
    with pytest.raises(ValueError):
        flow.make_velocity_field(2, np.random.default_rng(0))


def test_two_state_chain_learns_its_modes():
    mdp = envs.chain(2)
    ds = envs.generate_dataset(mdp, envs.PolicySpec("uniform"), 30, 40, seed=0)
    coords = np.array([[-1.0, 0.0], [1.0, 0.0]])
    cfg = OccupancyConfig(gamma=0.5, pretrain_steps=3000, flow_loss_steps=0, batch_size=128,
                          lr=3e-3, lr_final=1e-4, hidden=(64, 64))
    rng = np.random.default_rng(0)
    net, hist = flow.train_occupancy(ds, cfg, rng, embed=lambda s: coords[s], n_actions=5)
    assert np.mean(hist["pretrain"][-50:]) < np.mean(hist["pretrain"][:50])
    occ = exact.solve_occupancy(mdp, envs.empirical_policy(ds, 2, 5), 0.5)
    for s, a in ((0, 2), (1, 3), (0, 4)):
        x = flow.sample_future(net, coords[s], a, 1000, 32, rng)
        d = np.sqrt(((x[:, None] - coords[None]) ** 2).sum(-1))
        assert (d.min(axis=1) < 0.2).mean() >= 0.95
        frac = np.bincount(d.argmin(axis=1), minlength=2) / len(x)
        assert np.abs(frac - occ.row(s, a)).max() < 0.1


def test_snapped_occupancy_rows_sum_to_one():
    net = small_net()
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    table = flow.snapped_occupancy(net, coords, 3, 20, np.random.default_rng(0), 2)
    assert table.shape == (9, 3)
    np.testing.assert_allclose(table.sum(axis=1), 1.0)


def test_checkpoint_round_trip(tmp_path):
    net = small_net()
    perturb_target(net)
    nn.save_checkpoint(tmp_path / "occ.json", *flow.net_to_checkpoint(net))
    back = flow.net_from_checkpoint(*nn.load_checkpoint(tmp_path / "occ.json"))
    s, a, x, _ = batch()
    np.testing.assert_array_equal(back.velocity(0.3, s, a, x), net.velocity(0.3, s, a, x))
    np.testing.assert_array_equal(back.target_velocity(0.3, s, a, x),
                                  net.target_velocity(0.3, s, a, x))
    assert back.n_actions == 3 and back.gamma == net.gamma
