"""Closed-form tabular occupancy measures, the Wasserstein functional M and
the executable checks of the monotonicity / optimality results.

Rows of every (S*A)-indexed table are ordered ``s * n_actions + a``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .envs import (DeterministicMdp, AssumptionReport, check_assumptions, compute_layers,
                   layer_monotone_policy, potential, potential_gap, shortest_path_actions,
                   UNREACHABLE, maze_text, random_maze)

DIRECT_SOLVE_MAX_ROWS = 4096
EXACT_TOL = 1e-9


@dataclass(eq=False)
class OccupancyTable:
    D: np.ndarray        # (S*A, S), D[(s,a), s+] = d(s+ | s, a)
    gamma: float
    policy: np.ndarray   # (S, A)

    @property
    def n_states(self):
        return self.D.shape[1]

    @property
    def n_actions(self):
        return self.policy.shape[1]

    def row(self, s, a) -> np.ndarray:
        return self.D[s * self.n_actions + a]


def _check_gamma(gamma):
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")


def _check_policy(mdp, policy):
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy table shape {policy.shape} != {(mdp.n_states, mdp.n_actions)}")
    if (policy < 0).any() or not np.allclose(policy.sum(axis=1), 1.0, atol=1e-12):
        raise ValueError("policy rows must be probability distributions")
    return policy


def transition_matrix(mdp: DeterministicMdp) -> sp.csr_matrix:
    """One-step P[(s,a), s'] as a sparse 0/1 matrix."""
    S, A = mdp.n_states, mdp.n_actions
    rows = np.arange(S * A)
    return sp.csr_matrix((np.ones(S * A), (rows, mdp.successor.ravel())), shape=(S * A, S))


def policy_matrix(policy: np.ndarray) -> sp.csr_matrix:
    """Pi[s, (s,a)] = pi(a | s)."""
    S, A = policy.shape
    rows = np.repeat(np.arange(S), A)
    return sp.csr_matrix((policy.ravel(), (rows, np.arange(S * A))), shape=(S, S * A))


def _bootstrap_operator(mdp, policy):
    return (transition_matrix(mdp) @ policy_matrix(policy)).tocsr()


def solve_occupancy(mdp: DeterministicMdp, policy, gamma: float | None = None,
                    tol: float = 1e-12, max_iter: int = 200_000) -> OccupancyTable:
    """Fixed point of ``D = (1-gamma) P + gamma P Pi D``.

    Direct dense solve up to 4096 rows, fixed-point iteration beyond that.
    """
    gamma = mdp.gamma if gamma is None else gamma
    _check_gamma(gamma)
    policy = _check_policy(mdp, policy)
    P = transition_matrix(mdp)
    B = _bootstrap_operator(mdp, policy)
    n = B.shape[0]
    rhs = (1.0 - gamma) * P.toarray()
    if n <= DIRECT_SOLVE_MAX_ROWS:
        D = np.linalg.solve(np.eye(n) - gamma * B.toarray(), rhs)
    else:
        D = rhs.copy()
        for _ in range(max_iter):
            D_new = rhs + gamma * (B @ D)
            if np.abs(D_new - D).max() < tol:
                D = D_new
                break
            D = D_new
        else:
            raise ArithmeticError("occupancy iteration did not converge")
    np.clip(D, 0.0, None, out=D)
    return OccupancyTable(D, gamma, policy)


def dataset_occupancy(mdp: DeterministicMdp, dataset, gamma: float | None = None,
                      prior_policy=None) -> OccupancyTable:
    """Occupancy with the bootstrap conditioned on the dataset's own next
    action: ``D(s,a) = (1-gamma) e_{s'} + gamma E[D(s', a') | s, a]`` where the
    expectation uses observed (s, a) -> a' counts. Rows never seen in the data
    fall back to ``prior_policy`` at ``s'`` (uniform by default). Agrees with
    :func:`solve_occupancy` when the behaviour is Markov in the state.
    """
    gamma = mdp.gamma if gamma is None else gamma
    _check_gamma(gamma)
    S, A = mdp.n_states, mdp.n_actions
    prior = np.full((S, A), 1.0 / A) if prior_policy is None else _check_policy(mdp, prior_policy)
    counts = np.zeros((S * A, A))
    np.add.at(counts, (np.asarray(dataset.s) * A + np.asarray(dataset.a), np.asarray(dataset.a_next)), 1.0)
    nxt = mdp.successor.ravel()
    seen = counts.sum(axis=1) > 0
    cond = np.where(seen[:, None], counts / np.maximum(counts.sum(axis=1, keepdims=True), 1.0),
                    prior[nxt])
    B = np.zeros((S * A, S * A))
    B[np.arange(S * A)[:, None], nxt[:, None] * A + np.arange(A)[None, :]] = cond
    P = transition_matrix(mdp).toarray()
    D = np.linalg.solve(np.eye(S * A) - gamma * B, (1.0 - gamma) * P)
    np.clip(D, 0.0, None, out=D)
    # the stored policy is the state-marginal of the bootstrap actions
    pol = prior.copy()
    cnt_s = np.zeros((S, A))
    np.add.at(cnt_s, (np.asarray(dataset.s), np.asarray(dataset.a)), 1.0)
    has = cnt_s.sum(axis=1) > 0
    pol[has] = cnt_s[has] / cnt_s[has].sum(axis=1, keepdims=True)
    return OccupancyTable(D, gamma, pol)


def bellman_residual(mdp: DeterministicMdp, occ: OccupancyTable) -> float:
    P = transition_matrix(mdp)
    B = _bootstrap_operator(mdp, occ.policy)
    resid = occ.D - ((1.0 - occ.gamma) * P.toarray() + occ.gamma * (B @ occ.D))
    return float(np.abs(resid).max())


def occupancy_monte_carlo(mdp: DeterministicMdp, policy, gamma: float, n_samples: int,
                          rng: np.random.Generator, rows=None, chunk: int = 2_000_000) -> np.ndarray:
    """Empirical future-state frequencies from geometric-horizon rollouts.

    For each (s, a) row, draw ``dt ~ Geom(1 - gamma)`` on {1, 2, ...}, step
    ``s1 = f(s, a)`` then follow ``policy`` until time ``dt`` and record the
    state. Independent of any linear algebra. Returns (len(rows), S).
    """
    policy = _check_policy(mdp, policy)
    S, A = mdp.n_states, mdp.n_actions
    rows = np.arange(S * A) if rows is None else np.asarray(rows)
    cum = np.cumsum(policy, axis=1)
    cum[:, -1] = 1.0
    counts = np.zeros((len(rows), S))
    total = len(rows) * n_samples
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        row_of = idx // n_samples
        sa = rows[row_of]
        state = mdp.successor[sa // A, sa % A]
        remaining = rng.geometric(1.0 - gamma, size=len(idx)) - 1
        active = np.flatnonzero(remaining > 0)
        while active.size:
            st = state[active]
            u = rng.random(active.size)
            act = (u[:, None] >= cum[st]).sum(axis=1)
            state[active] = mdp.successor[st, act]
            remaining[active] -= 1
            active = active[remaining[active] > 0]
        np.add.at(counts, (row_of, state), 1.0)
    return counts / n_samples


def total_variation(p, q) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


@dataclass(eq=False)
class WassersteinTable:
    """``M_sa[(s,a), j] = W2^2(delta_{goals[j]}, d(. | s, a))`` and its
    behaviour-policy average ``M_s[s, j]``."""

    M_sa: np.ndarray
    M_s: np.ndarray
    goals: np.ndarray
    n_actions: int
    recursion_residual: float = 0.0

    def for_goal(self, g) -> np.ndarray:
        """(S, A) slice for goal ``g``."""
        j = int(np.flatnonzero(self.goals == g)[0])
        return self.M_sa[:, j].reshape(-1, self.n_actions)

    def state_values(self, g) -> np.ndarray:
        j = int(np.flatnonzero(self.goals == g)[0])
        return self.M_s[:, j]


def _goal_array(goals, S):
    goals = np.atleast_1d(np.arange(S) if goals is None else np.asarray(goals, dtype=np.int64))
    if goals.min() < 0 or goals.max() >= S:
        raise ValueError("goal outside the state set")
    return goals


def wasserstein_to_goal(mdp: DeterministicMdp, occ: OccupancyTable, goals=None,
                        check: bool = True) -> WassersteinTable:
    """Expectation of squared goal distance under each occupancy row.

    The Dirac-to-measure Wasserstein distance needs no coupling search: the
    only plan moves every unit of mass to ``g``. With ``check`` the values are
    also pushed through the one-step recursion
    ``M(s,a,g) = (1-gamma) Phi(s', g) + gamma E_{a'} M(s', a', g)`` and the
    residual is recorded.
    """
    goals = _goal_array(goals, mdp.n_states)
    phi = potential(mdp.coords[:, None, :], mdp.coords[goals][None, :, :])   # (S, G)
    M_sa = occ.D @ phi
    A = mdp.n_actions
    M_s = (occ.policy[:, :, None] * M_sa.reshape(-1, A, len(goals))).sum(axis=1)
    resid = 0.0
    if check:
        nxt = mdp.successor.ravel()
        rhs = (1.0 - occ.gamma) * phi[nxt] + occ.gamma * M_s[nxt]
        resid = float(np.abs(M_sa - rhs).max() / max(1.0, np.abs(M_sa).max()))
    return WassersteinTable(M_sa, M_s, goals, A, resid)


def solve_wasserstein_recursion(mdp: DeterministicMdp, policy, gamma: float | None = None,
                                goals=None) -> WassersteinTable:
    """M as the fixed point of its own recursion, never forming the occupancy
    matrix. Sparse LU, so it scales to long corridors."""
    gamma = mdp.gamma if gamma is None else gamma
    _check_gamma(gamma)
    policy = _check_policy(mdp, policy)
    goals = _goal_array(goals, mdp.n_states)
    phi = potential(mdp.coords[:, None, :], mdp.coords[goals][None, :, :])
    P = transition_matrix(mdp)
    B = _bootstrap_operator(mdp, policy)
    n = B.shape[0]
    lhs = (sp.identity(n, format="csc") - gamma * B.tocsc()).tocsc()
    M_sa = spla.splu(lhs).solve((1.0 - gamma) * (P @ phi))
    M_sa = np.asarray(M_sa).reshape(n, len(goals))
    A = mdp.n_actions
    M_s = (policy[:, :, None] * M_sa.reshape(-1, A, len(goals))).sum(axis=1)
    return WassersteinTable(M_sa, M_s, goals, A)


def shaped_reward_exact(M: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """``r = -M / scale``; accepts a raw array or a :class:`WassersteinTable`
    (returns its (S*A, G) table)."""
    if scale <= 0:
        raise ValueError(f"reward scale must be positive, got {scale}")
    if isinstance(M, WassersteinTable):
        M = M.M_sa
    return -np.asarray(M, dtype=np.float64) / scale


# -- executable theory ------------------------------------------------------

@dataclass
class Prop1Report:
    goal: int
    gamma: float
    preconditions_met: bool
    assumption_report: dict
    layer_violations: list = field(default_factory=list)
    action_violations: list = field(default_factory=list)
    max_violation_magnitude: float = 0.0
    instances_checked: int = 0

    @property
    def violations(self):
        return self.layer_violations + self.action_violations

    @property
    def ok(self) -> bool:
        return self.preconditions_met and not self.violations

    def to_dict(self):
        return {"goal": self.goal, "gamma": self.gamma,
                "preconditions_met": self.preconditions_met,
                "assumption_report": self.assumption_report,
                "violations": self.violations,
                "max_violation_magnitude": self.max_violation_magnitude,
                "instances_checked": self.instances_checked}


@dataclass
class Theorem1Report:
    goal: int
    gamma: float
    preconditions_met: bool
    assumption_report: dict
    mismatch_states: list = field(default_factory=list)
    gap_violations: list = field(default_factory=list)
    states_checked: int = 0
    fraction_matching: float = float("nan")
    delta_phi: float = float("nan")
    bellman_residual: float = float("nan")

    @property
    def violations(self):
        return self.mismatch_states + self.gap_violations

    @property
    def ok(self) -> bool:
        return self.preconditions_met and not self.violations

    def to_dict(self):
        return {"goal": self.goal, "gamma": self.gamma,
                "preconditions_met": self.preconditions_met,
                "assumption_report": self.assumption_report,
                "violations": self.violations,
                "max_violation_magnitude": max((v.get("magnitude", 0.0) for v in self.violations),
                                               default=0.0),
                "instances_checked": self.states_checked,
                "fraction_matching": self.fraction_matching,
                "delta_phi": self.delta_phi}


def _gate(mdp, policy, g):
    goal_mdp = mdp.with_absorbing_goal(g)
    layers = compute_layers(goal_mdp, g)
    if policy is None:
        policy = layer_monotone_policy(goal_mdp, layers)
    report = check_assumptions(goal_mdp, None, g, policy=policy)
    return goal_mdp, layers, policy, report


def goal_wasserstein(mdp: DeterministicMdp, policy, g: int, gamma: float) -> tuple:
    """Occupancy and M for goal ``g`` with the goal made absorbing."""
    goal_mdp = mdp.with_absorbing_goal(g)
    occ = solve_occupancy(goal_mdp, policy, gamma)
    return occ, wasserstein_to_goal(goal_mdp, occ, [g])


def verify_prop1(mdp: DeterministicMdp, policy, g: int, gamma: float | None = None,
                 tol: float = EXACT_TOL, max_listed: int = 20) -> Prop1Report:
    """Layer monotonicity of the state-averaged M and minimality of M at the
    shortest-path actions, checked exhaustively for goal ``g``.

    ``policy`` is the behaviour table; ``None`` means the layer-monotone one.
    """
    gamma = mdp.gamma if gamma is None else gamma
    goal_mdp, layers, policy, report = _gate(mdp, policy, g)
    out = Prop1Report(int(g), gamma, report.all_hold, report.to_dict())
    if not report.all_hold:
        return out
    _, W = goal_wasserstein(mdp, policy, g, gamma)
    Ms = W.state_values(g)
    Msa = W.for_goal(g)
    worst, checked = 0.0, 0
    for k in range(1, len(layers.layers)):
        lo, hi = layers.layers[k - 1], layers.layers[k]
        diff = Ms[lo][:, None] - Ms[hi][None, :]          # should be <= 0
        checked += diff.size
        bad = np.argwhere(diff > tol)
        worst = max(worst, float(diff.max()))
        for i, j in bad[:max_listed]:
            out.layer_violations.append({"kind": "layer", "s1": int(lo[i]), "s2": int(hi[j]),
                                         "k": k, "magnitude": float(diff[i, j])})
    # every shortest-path action against every non-shortest one; where all
    # actions are shortest-path actions there is nothing to compare
    sp_mask = shortest_path_actions(goal_mdp, layers)
    for s in np.flatnonzero(layers.steps != UNREACHABLE):
        best, rest = Msa[s][sp_mask[s]], Msa[s][~sp_mask[s]]
        if not rest.size:
            continue
        diff = best[:, None] - rest[None, :]
        checked += diff.size
        worst = max(worst, float(diff.max()))
        if (diff > tol).any():
            i, j = np.unravel_index(np.argmax(diff), diff.shape)
            out.action_violations.append({"kind": "action", "s": int(s),
                                          "a_star": int(np.flatnonzero(sp_mask[s])[i]),
                                          "a": int(np.flatnonzero(~sp_mask[s])[j]),
                                          "magnitude": float(diff[i, j])})
    out.max_violation_magnitude = max(worst, 0.0)
    out.instances_checked = checked
    return out


def verify_theorem1(mdp: DeterministicMdp, policy, g: int, gamma: float | None = None,
                    tol: float = 1e-10, max_iter: int = 100_000) -> Theorem1Report:
    """Greedy policy of Q* under ``r = -M`` versus BFS shortest paths, plus
    the adjacent-layer gap bound on V*.

    Raises ``ArithmeticError`` if value iteration does not converge.
    """
    from .gcrl import tabular_q_iteration

    gamma = mdp.gamma if gamma is None else gamma
    goal_mdp, layers, policy, report = _gate(mdp, policy, g)
    out = Theorem1Report(int(g), gamma, report.all_hold, report.to_dict())
    if not report.all_hold:
        return out
    _, W = goal_wasserstein(mdp, policy, g, gamma)
    reward = shaped_reward_exact(W.for_goal(g))
    res = tabular_q_iteration(goal_mdp, reward, gamma, tol=tol, max_iter=max_iter)
    out.bellman_residual = res.residual
    sp_mask = shortest_path_actions(goal_mdp, layers)
    reach = np.flatnonzero(layers.steps != UNREACHABLE)
    good = 0
    for s in reach:
        extra = res.argmax_sets[s] & ~sp_mask[s]
        if extra.any():
            out.mismatch_states.append({"kind": "greedy", "s": int(s),
                                        "greedy": np.flatnonzero(res.argmax_sets[s]).tolist(),
                                        "shortest": np.flatnonzero(sp_mask[s]).tolist(),
                                        "magnitude": float(res.Q[s].max() - res.Q[s][sp_mask[s]].max())})
        else:
            good += 1
    out.states_checked = len(reach)
    out.fraction_matching = good / max(len(reach), 1)

    delta, _ = potential_gap(goal_mdp, layers)
    out.delta_phi = delta
    V = res.V
    for k in range(1, len(layers.layers)):
        lo, hi = layers.layers[k - 1], layers.layers[k]
        margin = V[lo].min() - V[hi].max()
        bound = (1.0 - gamma ** (k - 1)) * delta
        if margin < bound - EXACT_TOL:
            out.gap_violations.append({"kind": "value_gap", "k": k, "margin": float(margin),
                                       "bound": float(bound), "magnitude": float(bound - margin)})
    return out


@dataclass
class FamilyInstance:
    mdp: DeterministicMdp
    goals: list


def goals_satisfying_assumptions(mdp: DeterministicMdp) -> list[int]:
    """Goals for which the absorbing-goal, layer-monotone setup meets every
    assumption of the exact theory."""
    return [g for g in range(mdp.n_states) if _gate(mdp, None, g)[3].all_hold]


def assumption_family(n_mazes: int = 20, goals_per_maze: int = 3, seed: int = 0,
                      sizes=(3, 4, 5, 6), wall_fractions=(0.1, 0.15, 0.2),
                      max_draws: int = 5000) -> list[FamilyInstance]:
    """Random mazes that admit at least ``goals_per_maze`` assumption-satisfying
    goals (the first ones by state id are kept). Raises ``RuntimeError`` when
    ``max_draws`` candidates are not enough."""
    rng = np.random.default_rng(seed)
    out, seen = [], set()
    for _ in range(max_draws):
        h, w = int(rng.choice(sizes)), int(rng.choice(sizes))
        mdp = random_maze(h, w, float(rng.choice(wall_fractions)), rng)
        key = maze_text(mdp)
        if mdp.n_states < 3 or key in seen:
            continue
        seen.add(key)
        goals = goals_satisfying_assumptions(mdp)
        if len(goals) >= goals_per_maze:
            out.append(FamilyInstance(mdp, goals[:goals_per_maze]))
            if len(out) == n_mazes:
                return out
    raise RuntimeError(f"only {len(out)} of {n_mazes} mazes found in {max_draws} draws")
