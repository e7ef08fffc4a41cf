import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ors_lab import envs, exact
from ors_lab.envs import compute_layers, layer_monotone_policy


def random_policy(mdp, rng):
    p = rng.random((mdp.n_states, mdp.n_actions)) + 1e-3
    return p / p.sum(axis=1, keepdims=True)


def test_deterministic_cycle_matches_closed_form():
    # always step forward: the first visit time m to state j is unique mod n
    n, gamma = 4, 0.8
    mdp = envs.cycle(n)
    pol = np.tile([1.0, 0.0], (n, 1))
    occ = exact.solve_occupancy(mdp, pol, gamma)
    for s in range(n):
        for j in range(n):
            m = (j - s) % n or n
            expected = (1 - gamma) * gamma ** (m - 1) / (1 - gamma ** n)
            assert occ.row(s, 0)[j] == pytest.approx(expected, abs=1e-12)


def test_truncated_series_oracle():
    rng = np.random.default_rng(0)
    mdp = envs.open_grid(3, 3)
    pol = random_policy(mdp, rng)
    gamma = 0.7
    occ = exact.solve_occupancy(mdp, pol, gamma)
    P = exact.transition_matrix(mdp).toarray()
    Pi = exact.policy_matrix(pol).toarray()
    term, total = P.copy(), np.zeros_like(P)
    for k in range(200):
        total += (1 - gamma) * gamma ** k * term
        term = P @ (Pi @ term)
    np.testing.assert_allclose(occ.D, total, atol=1e-12)


@given(st.integers(0, 1000), st.floats(0.05, 0.995))
@settings(max_examples=25, deadline=None)
def test_occupancy_rows_are_distributions(seed, gamma):
    rng = np.random.default_rng(seed)
    mdp = envs.random_maze(int(rng.integers(2, 5)), int(rng.integers(2, 5)), 0.2, rng)
    occ = exact.solve_occupancy(mdp, random_policy(mdp, rng), gamma)
    assert (occ.D >= 0).all()
    np.testing.assert_allclose(occ.D.sum(axis=1), 1.0, atol=1e-9)
    assert exact.bellman_residual(mdp, occ) < 1e-9


def test_monte_carlo_oracle_on_three_cycle():
    mdp = envs.cycle(3)
    pol = envs.uniform_policy(mdp)
    occ = exact.solve_occupancy(mdp, pol, 0.9)
    mc = exact.occupancy_monte_carlo(mdp, pol, 0.9, 200_000, np.random.default_rng(0))
    assert exact.total_variation(mc, occ.D).max() < 1e-2


def test_iterative_solver_agrees_with_direct(monkeypatch):
    mdp = envs.open_grid(3, 4)
    pol = random_policy(mdp, np.random.default_rng(1))
    direct = exact.solve_occupancy(mdp, pol, 0.9)
    monkeypatch.setattr(exact, "DIRECT_SOLVE_MAX_ROWS", 0)
    iterative = exact.solve_occupancy(mdp, pol, 0.9, tol=1e-14)
    np.testing.assert_allclose(iterative.D, direct.D, atol=1e-10)


def test_two_wasserstein_computations_agree():
    mdp = envs.random_maze(5, 5, 0.15, np.random.default_rng(4))
    pol = envs.uniform_policy(mdp)
    occ = exact.solve_occupancy(mdp, pol, 0.99)
    direct = exact.wasserstein_to_goal(mdp, occ)
    rec = exact.solve_wasserstein_recursion(mdp, pol, 0.99)
    assert direct.recursion_residual < 1e-9
    np.testing.assert_allclose(direct.M_sa, rec.M_sa, rtol=1e-9, atol=1e-9)


def test_wasserstein_is_mean_squared_distance_by_sampling():
    # W2^2 to a Dirac is E||X - g||^2: check against sampled futures
    mdp = envs.chain(5)
    pol = envs.uniform_policy(mdp)
    occ = exact.solve_occupancy(mdp, pol, 0.9)
    W = exact.wasserstein_to_goal(mdp, occ, [0])
    mc = exact.occupancy_monte_carlo(mdp, pol, 0.9, 100_000, np.random.default_rng(1), rows=[7])
    sq = ((mdp.coords - mdp.coords[0]) ** 2).sum(axis=1)
    assert W.M_sa[7, 0] == pytest.approx(float(mc[0] @ sq), rel=2e-2)


def test_goal_and_scale_validation():
    mdp = envs.chain(3)
    occ = exact.solve_occupancy(mdp, envs.uniform_policy(mdp), 0.9)
    with pytest.raises(ValueError):
        exact.wasserstein_to_goal(mdp, occ, [5])
    with pytest.raises(ValueError):
        exact.shaped_reward_exact(np.ones(3), scale=0.0)
    with pytest.raises(ValueError):
        exact.solve_occupancy(mdp, envs.uniform_policy(mdp), 1.0)
    with pytest.raises(ValueError):
        exact.solve_occupancy(mdp, np.ones((3, 5)), 0.9)


@pytest.mark.parametrize("gamma", [0.9, 0.99])
def test_theory_on_open_grid_interior_goal(gamma):
    grid = envs.open_grid(4, 4)
    g = grid.state_at(1, 2)
    p1 = exact.verify_prop1(grid, None, g, gamma)
    t1 = exact.verify_theorem1(grid, None, g, gamma)
    assert p1.ok and p1.instances_checked > 0
    assert t1.ok and t1.fraction_matching == 1.0 and t1.delta_phi > 0


def test_theory_is_gated_on_assumptions():
    m = envs.u_maze()
    rep = exact.verify_prop1(m, None, m.goal, 0.9)
    assert not rep.preconditions_met and not rep.ok and rep.instances_checked == 0
    assert not exact.verify_theorem1(m, None, m.goal, 0.9).ok


def test_prop1_flags_a_planted_violation(monkeypatch):
    grid = envs.open_grid(3, 3)
    g = grid.state_at(1, 1)
    real = exact.goal_wasserstein

    def corrupted(mdp, policy, goal, gamma):
        occ, W = real(mdp, policy, goal, gamma)
        far = compute_layers(mdp.with_absorbing_goal(goal), goal).layers[2][0]
        W.M_s[far] = -1.0
        return occ, W

    monkeypatch.setattr(exact, "goal_wasserstein", corrupted)
    rep = exact.verify_prop1(grid, None, g, 0.9)
    assert rep.layer_violations and not rep.ok


def test_shaped_greedy_policy_reaches_goal_on_chain():
    from ors_lab.gcrl import tabular_q_iteration

    m = envs.chain(7).with_absorbing_goal(6)
    lay = compute_layers(m, 6)
    _, W = exact.goal_wasserstein(envs.chain(7), layer_monotone_policy(m, lay), 6, 0.9)
    res = tabular_q_iteration(m, exact.shaped_reward_exact(W.for_goal(6)), 0.9)
    for s in range(6):
        assert res.argmax_sets[s][2] and res.argmax_sets[s].sum() == 1


def test_family_meets_assumptions():
    fam = exact.assumption_family(n_mazes=3, goals_per_maze=2, seed=7)
    assert len(fam) == 3
    for inst in fam:
        assert len(inst.goals) == 2
        for g in inst.goals:
            assert g in exact.goals_satisfying_assumptions(inst.mdp)


def test_dataset_conditioned_occupancy_matches_averaged_for_markov_data():
    mdp = envs.open_grid(3, 3)
    ds = envs.generate_dataset(mdp, envs.PolicySpec("uniform"), 400, 60, seed=0)
    pol = envs.empirical_policy(ds, mdp.n_states, mdp.n_actions)
    avg = exact.solve_occupancy(mdp, pol, 0.8)
    cond = exact.dataset_occupancy(mdp, ds, 0.8)
    np.testing.assert_allclose(cond.D.sum(axis=1), 1.0, atol=1e-9)
    # uniform behaviour is Markov: the two forms differ only by sampling noise
    assert exact.total_variation(cond.D, avg.D).max() < 0.03


def test_dataset_conditioned_occupancy_sees_non_markov_behaviour():
    # eps-greedy toward a per-trajectory goal: a' depends on more than s'
    mdp = envs.open_grid(3, 3)
    ds = envs.generate_dataset(mdp, envs.PolicySpec("eps_greedy", 0.1), 400, 30, seed=1)
    pol = envs.empirical_policy(ds, mdp.n_states, mdp.n_actions)
    avg = exact.solve_occupancy(mdp, pol, 0.9)
    cond = exact.dataset_occupancy(mdp, ds, 0.9)
    assert exact.total_variation(cond.D, avg.D).max() > 0.05
