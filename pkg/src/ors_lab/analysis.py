"""Why sparse rewards make value estimates fragile, measured directly.

A value trace along an expert trajectory is computed backwards from the goal
with multiplicative noise on the bootstrap term,

    V_t = r_t + gamma (1 + eps_t) V_{t+1},    eps_t ~ N(0, sigma^2),

and ``delta_V`` counts how often the estimate *drops* when moving one step
closer to the goal. Sparse rewards give near-equal values far from the goal,
so small noise flips their order; shaped rewards keep a visible gradient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .envs import DeterministicMdp, compute_layers

REWARD_MODES = ("sparse", "ors", "raw_rw")


@dataclass
class NoisyValueTrace:
    states: np.ndarray
    mode: str
    sigma: float
    values: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        if len(self.values) != len(self.states):
            raise ValueError("trace length must equal trajectory length")


def sparse_rewards(states, g) -> np.ndarray:
    """``-1`` for every step taken from a non-goal state."""
    states = np.asarray(states)
    return -(states[:-1] != g).astype(np.float64)


def value_recursion(rewards, gamma: float, eps=None, mode: str = "sparse") -> np.ndarray:
    """Backward recursion anchored at ``V(goal) = 0``.

    ``rewards[t]`` is paid on the step ``s_t -> s_{t+1}``; the result has one
    more entry than ``rewards``. ``eps`` may be a (L,) vector or a
    (seeds, L) matrix of multiplicative noise. In ``raw_rw`` mode the reward
    itself is used as the value estimate (noise multiplies it directly).
    """
    r = np.asarray(rewards, dtype=np.float64)
    L = len(r)
    e = np.zeros(L) if eps is None else np.asarray(eps, dtype=np.float64)
    batch = e.ndim == 2
    e2 = e if batch else e[None, :]
    if e2.shape[1] != L:
        raise ValueError(f"need one noise draw per step: got {e2.shape[1]}, expected {L}")
    V = np.zeros((e2.shape[0], L + 1))
    if mode == "raw_rw":
        V[:, :L] = r[None, :] * (1.0 + e2)
    else:
        for t in range(L - 1, -1, -1):
            V[:, t] = r[t] + gamma * (1.0 + e2[:, t]) * V[:, t + 1]
    return V if batch else V[0]


def noisy_value_trace(states, g, reward_fn, gamma: float, sigma: float,
                      rng: np.random.Generator, mode: str = "sparse", actions=None,
                      seed: int | None = None) -> NoisyValueTrace:
    """Noisy value estimates along ``states`` (which must end at ``g``).

    ``reward_fn(s, a, g)`` supplies the per-step rewards for ``ors`` and
    ``raw_rw`` modes; ``sparse`` ignores it.
    """
    states = np.asarray(states)
    if len(states) == 0 or states[-1] != g:
        raise ValueError("trajectory must terminate at the goal")
    if mode not in REWARD_MODES:
        raise ValueError(f"unknown reward mode {mode!r}")
    if mode == "sparse":
        r = sparse_rewards(states, g)
    else:
        a = np.zeros(len(states) - 1, dtype=np.int64) if actions is None else np.asarray(actions)
        r = np.asarray(reward_fn(states[:-1], a, np.full(len(states) - 1, g)), dtype=np.float64)
    eps = sigma * rng.standard_normal(len(r)) if sigma > 0 else np.zeros(len(r))
    return NoisyValueTrace(states, mode, sigma, value_recursion(r, gamma, eps, mode), seed)


def delta_v_values(values) -> np.ndarray:
    """Fraction of steps where the value decreases toward the goal; works on
    (L,) or (n, L) arrays."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[-1] < 2:
        raise ValueError("need at least two values")
    return (v[..., 1:] < v[..., :-1]).mean(axis=-1)


def delta_v(trace: NoisyValueTrace) -> float:
    return float(delta_v_values(trace.values))


@dataclass
class ExpertTrajectory:
    states: np.ndarray
    actions: np.ndarray
    goal: int


def sweep_sigma(trajectories: list[ExpertTrajectory], rewards: dict, sigmas, seeds: int,
                gamma: float, rng: np.random.Generator) -> list[dict]:
    """Mean and standard error of ``delta_V`` per (mode, sigma).

    ``rewards[mode]`` is a list with one reward vector per trajectory (ignored
    for ``sparse``). Noise is paired: the same standard-normal draws are
    scaled by each sigma and reused for every mode. Each seed's score is the
    unweighted mean over trajectories.
    """
    sigmas = list(sigmas)
    z = [rng.standard_normal((seeds, len(tr.states) - 1)) for tr in trajectories]
    rows = []
    for mode, per_traj in rewards.items():
        for sigma in sigmas:
            scores = np.zeros(seeds)
            for k, tr in enumerate(trajectories):
                r = sparse_rewards(tr.states, tr.goal) if mode == "sparse" else per_traj[k]
                V = value_recursion(r, gamma, sigma * z[k], mode)
                scores += delta_v_values(V)
            scores /= len(trajectories)
            se = float(scores.std(ddof=1) / np.sqrt(seeds)) if seeds > 1 else 0.0
            rows.append({"mode": mode, "sigma": float(sigma),
                         "mean_delta_v": float(scores.mean()), "se": se})
    return rows


def sweep_checks(rows: list[dict]) -> dict:
    """Orderings asserted by the analysis: sparse non-decreasing in sigma
    (2-SE band) and ORS below sparse at every sigma."""
    by = {}
    for r in rows:
        by.setdefault(r["mode"], {})[r["sigma"]] = r
    out = {}
    if "sparse" in by:
        sp = [by["sparse"][s] for s in sorted(by["sparse"])]
        out["sparse_monotone"] = all(
            b["mean_delta_v"] >= a["mean_delta_v"] - 2.0 * np.hypot(a["se"], b["se"])
            for a, b in zip(sp, sp[1:]))
    if "sparse" in by and "ors" in by:
        out["ors_below_sparse"] = all(
            by["ors"][s]["mean_delta_v"] < by["sparse"][s]["mean_delta_v"]
            for s in by["ors"] if s in by["sparse"] and s > 0)
    return out


def write_csv(rows: list[dict], path, fields=None):
    fields = fields or (list(rows[0]) if rows else ["mode", "sigma", "mean_delta_v", "se"])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


# -- reward field -----------------------------------------------------------

@dataclass
class FieldDump:
    records: list = field(default_factory=list)
    spearman: float | None = None


def reward_field_dump(reward_fn, mdp: DeterministicMdp, g: int, states=None) -> FieldDump:
    """One record per state: coordinates and ``max_a r(s, a, g)``.

    Also reports Spearman's rho between ``-max_a r`` and the shortest-path
    distance to ``g`` over reachable states other than ``g`` itself: the goal
    and its neighbours share the same best successor, so including the goal
    only adds a tie.
    """
    states = np.arange(mdp.n_states) if states is None else np.asarray(states)
    A = mdp.n_actions
    s_rep = np.repeat(states, A)
    a_rep = np.tile(np.arange(A), len(states))
    r = np.asarray(reward_fn(s_rep, a_rep, np.full(len(s_rep), g)), dtype=np.float64)
    best = r.reshape(len(states), A).max(axis=1)
    steps = compute_layers(mdp, g).steps[states]
    recs = [{"x": float(mdp.coords[s][1]), "y": float(mdp.coords[s][0]), "reward": float(b),
             "steps": int(k)} for s, b, k in zip(states, best, steps)]
    ok = steps > 0
    rho = float(spearmanr(-best[ok], steps[ok]).statistic) if ok.sum() > 1 else None
    return FieldDump(recs, rho)


def write_field_csv(dump: FieldDump, path):
    write_csv(dump.records, path, ["x", "y", "reward", "steps"])
