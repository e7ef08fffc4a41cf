import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ors_lab import analysis, envs, exact
from ors_lab.analysis import ExpertTrajectory
from ors_lab.reward import ExactRewardSource


def corridor(n=40, gamma=0.9):
    m = envs.chain(n).with_absorbing_goal(n - 1)
    lay = envs.compute_layers(m, n - 1)
    pol = envs.layer_monotone_policy(m, lay)
    _, W = exact.goal_wasserstein(envs.chain(n), pol, n - 1, gamma)
    return m, ExactRewardSource(W)


@given(st.integers(2, 60), st.floats(0.5, 0.999))
@settings(max_examples=40)
def test_sparse_recursion_closed_form(L, gamma):
    states = np.append(np.arange(L), 99)
    V = analysis.value_recursion(analysis.sparse_rewards(states, 99), gamma)
    t = np.arange(L + 1)
    np.testing.assert_allclose(V, -(1 - gamma ** (L - t)) / (1 - gamma), rtol=1e-12, atol=1e-12)


def test_noise_free_values_never_drop_toward_goal():
    m, src = corridor()
    states, actions = envs.shortest_path_trajectory(m, 0, m.n_states - 1)
    rng = np.random.default_rng(0)
    for mode in ("sparse", "ors"):
        tr = analysis.noisy_value_trace(states, m.n_states - 1, src, 0.99, 0.0, rng, mode, actions)
        assert analysis.delta_v(tr) == 0.0


def test_raw_mode_uses_reward_as_value():
    r = np.array([-3.0, -2.0, -1.0])
    np.testing.assert_allclose(analysis.value_recursion(r, 0.9, mode="raw_rw"), [-3, -2, -1, 0])
    eps = np.array([0.1, 0.0, -0.5])
    np.testing.assert_allclose(analysis.value_recursion(r, 0.9, eps, "raw_rw"), [-3.3, -2, -0.5, 0])


def test_batched_recursion_matches_rows():
    rng = np.random.default_rng(0)
    r = -rng.random(12)
    eps = 0.1 * rng.standard_normal((5, 12))
    batch = analysis.value_recursion(r, 0.95, eps)
    for i in range(5):
        np.testing.assert_allclose(batch[i], analysis.value_recursion(r, 0.95, eps[i]))
    np.testing.assert_allclose(analysis.delta_v_values(batch),
                               [analysis.delta_v_values(b) for b in batch])


def test_input_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="goal"):
        analysis.noisy_value_trace([0, 1, 2], 5, None, 0.9, 0.0, rng)
    with pytest.raises(ValueError, match="mode"):
        analysis.noisy_value_trace([0, 1], 1, None, 0.9, 0.0, rng, mode="dense")
    with pytest.raises(ValueError):
        analysis.value_recursion([-1.0, -1.0], 0.9, np.zeros(3))
    with pytest.raises(ValueError):
        analysis.delta_v_values([1.0])
    with pytest.raises(ValueError):
        analysis.NoisyValueTrace(np.arange(3), "sparse", 0.0, np.zeros(2))


def test_sparse_noise_flips_far_from_goal():
    # far from the goal consecutive sparse values differ by gamma^k, so
    # modest noise reorders them
    states = np.append(np.arange(300), 300)
    tr = analysis.noisy_value_trace(states, 300, None, 0.99, 5e-3, np.random.default_rng(0))
    assert analysis.delta_v(tr) > 0.1


def test_sweep_is_paired_and_checks_pass_on_corridor():
    m, src = corridor(200)
    g = m.n_states - 1
    trajs = []
    for start in (0, 25, 50):
        st_, ac = envs.shortest_path_trajectory(m, start, g)
        trajs.append(ExpertTrajectory(np.asarray(st_), np.asarray(ac), g))
    rewards = {"sparse": [None] * 3,
               "ors": [src(t.states[:-1], t.actions, np.full(len(t.actions), g)) for t in trajs]}
    rows = analysis.sweep_sigma(trajs, rewards, [0.0, 2e-3, 5e-3], 50, 0.99,
                                np.random.default_rng(0))
    assert len(rows) == 6
    zero = [r for r in rows if r["sigma"] == 0.0]
    assert all(r["mean_delta_v"] == 0.0 and r["se"] == 0.0 for r in zero)
    checks = analysis.sweep_checks(rows)
    assert checks == {"sparse_monotone": True, "ors_below_sparse": True}


def test_sweep_checks_detect_breaks():
    rows = [{"mode": "sparse", "sigma": 0.1, "mean_delta_v": 0.5, "se": 0.01},
            {"mode": "sparse", "sigma": 0.2, "mean_delta_v": 0.3, "se": 0.01},
            {"mode": "ors", "sigma": 0.1, "mean_delta_v": 0.6, "se": 0.01},
            {"mode": "ors", "sigma": 0.2, "mean_delta_v": 0.1, "se": 0.01}]
    assert analysis.sweep_checks(rows) == {"sparse_monotone": False, "ors_below_sparse": False}
    # the 2-SE band tolerates a small dip
    rows[1]["mean_delta_v"] = 0.48
    assert analysis.sweep_checks(rows)["sparse_monotone"]


def test_field_dump_on_chain_is_perfectly_ranked(tmp_path):
    m, src = corridor(12)
    dump = analysis.reward_field_dump(src, m, m.n_states - 1)
    assert dump.spearman == pytest.approx(1.0)
    assert len(dump.records) == 12
    analysis.write_field_csv(dump, tmp_path / "f.csv")
    with open(tmp_path / "f.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["x", "y", "reward", "steps"] and len(rows) == 12
    assert int(rows[-1]["steps"]) == 0
