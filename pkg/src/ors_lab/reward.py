"""Occupancy-based shaped rewards.

The learned reward replaces the exact ``W2^2(delta_g, d(.|s,a))`` with the
flow model's velocity error against the Dirac path to ``g``:

    MSE(s, a, g) = E_{x0, t} || v(t, s, a, t g + (1-t) x0) - (g - x0) ||^2

which upper-bounds the squared Wasserstein distance up to a constant. A
small reward network is then distilled onto ``-MSE`` so acting never needs
the ODE solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import nn
from .envs import DeterministicMdp, OfflineDataset
from .exact import WassersteinTable
from .flow import VelocityFieldNet
from .gcrl import GoalSampler, sample_goals


@dataclass
class W2Estimate:
    s: np.ndarray
    a: object
    g: np.ndarray
    estimate: float
    n_draws: int
    std_error: float


def velocity_mse(net: VelocityFieldNet, s, a, g, n_draws: int, rng: np.random.Generator,
                 params=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-row Monte-Carlo mean and standard error of the velocity MSE.

    ``s``, ``a``, ``g`` are batches of equal length (``g`` in embedding space).
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    s = np.asarray(s, dtype=np.float64).reshape(-1, net.state_dim)
    g = np.asarray(g, dtype=np.float64).reshape(-1, net.state_dim)
    n, d = g.shape
    a = np.asarray(a)
    s_rep = np.repeat(s, n_draws, axis=0)
    g_rep = np.repeat(g, n_draws, axis=0)
    a_rep = np.repeat(a, n_draws, axis=0)
    x0 = rng.standard_normal((n * n_draws, d))
    t = rng.random(n * n_draws)
    xt = t[:, None] * g_rep + (1.0 - t)[:, None] * x0
    v = net.velocity(t, s_rep, a_rep, xt, params)
    err = ((v - (g_rep - x0)) ** 2).sum(axis=1).reshape(n, n_draws)
    mean = err.mean(axis=1)
    se = err.std(axis=1, ddof=1) / np.sqrt(n_draws) if n_draws > 1 else np.full(n, np.inf)
    return mean, se


def estimate_w2_mse(net: VelocityFieldNet, s, a, g, n_draws: int,
                    rng: np.random.Generator) -> W2Estimate:
    s_arr = np.asarray(s, dtype=np.float64).reshape(1, -1)
    g_arr = np.asarray(g, dtype=np.float64).reshape(1, -1)
    a_arr = np.asarray(a).reshape(1, -1) if net.n_actions is None else np.array([int(a)])
    mean, se = velocity_mse(net, s_arr, a_arr, g_arr, n_draws, rng)
    return W2Estimate(s_arr[0], a, g_arr[0], float(mean[0]), int(n_draws), float(se[0]))


# -- empirical check of the upper bound -------------------------------------

@dataclass
class Prop2Report:
    triples: int
    C_hat: float
    spearman_rho: float
    violations: list = field(default_factory=list)
    min_rho: float = 0.9
    warning: str | None = None

    @property
    def passed(self) -> bool:
        return not self.violations and np.isfinite(self.C_hat) and self.spearman_rho >= self.min_rho

    def to_dict(self) -> dict:
        d = {"triples": self.triples, "C_hat": self.C_hat, "spearman_rho": self.spearman_rho,
             "violations": self.violations, "passed": self.passed}
        if self.warning:
            d["warning"] = self.warning
        return d


def all_triples(mdp: DeterministicMdp) -> np.ndarray:
    """Every (s, a, g) as rows of an int array."""
    S, A = mdp.n_states, mdp.n_actions
    s, a, g = np.meshgrid(np.arange(S), np.arange(A), np.arange(S), indexing="ij")
    return np.stack([s.ravel(), a.ravel(), g.ravel()], axis=1)


def validate_prop2(net: VelocityFieldNet, mdp: DeterministicMdp, table: WassersteinTable,
                   triples=None, n_draws: int = 256, rng: np.random.Generator | None = None,
                   embed: np.ndarray | None = None, exact_scale: float = 1.0,
                   min_rho: float = 0.9, warning: str | None = None) -> Prop2Report:
    """Compare exact ``W2^2`` against the velocity-MSE estimate on triples.

    ``embed`` is the (S, d) array the flow model was trained on (defaults to
    ``mdp.coords``). ``exact_scale`` converts table distances into the
    embedding's units (``scale^2`` for a uniformly scaled embedding).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    triples = all_triples(mdp) if triples is None else np.asarray(triples, dtype=np.int64)
    emb = mdp.coords.astype(np.float64) if embed is None else np.asarray(embed, dtype=np.float64)
    s, a, g = triples.T
    goal_col = {int(x): j for j, x in enumerate(table.goals)}
    w2 = exact_scale * np.array([table.M_sa[si * table.n_actions + ai, goal_col[int(gi)]]
                                 for si, ai, gi in triples])
    mse, _ = velocity_mse(net, emb[s], a, emb[g], n_draws, rng)
    violations = []
    zero_mse = (mse <= 0) & (w2 > 0)
    for i in np.flatnonzero(zero_mse):
        violations.append({"s": int(s[i]), "a": int(a[i]), "g": int(g[i]),
                           "w2": float(w2[i]), "mse": float(mse[i])})
    pos = w2 > 0
    C_hat = float(np.max(w2[pos] / mse[pos])) if pos.any() and not zero_mse.any() else \
        (0.0 if not pos.any() else float("inf"))
    rho = float(spearmanr(w2, mse).statistic) if len(w2) > 1 else float("nan")
    return Prop2Report(len(triples), C_hat, rho, violations, min_rho, warning)


# -- distilled reward network -----------------------------------------------

@dataclass
class RewardConfig:
    steps: int = 2000
    batch_size: int = 256
    mc_draws: int = 32
    lr: float = 3e-4
    hidden: tuple = (128, 128)
    scale: float = 1.0
    sampler: GoalSampler = field(default_factory=GoalSampler)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.scale <= 0:
            raise ValueError("reward scale must be positive")


@dataclass(eq=False)
class RewardNet:
    mlp: nn.Mlp
    opt: nn.AdamState
    state_dim: int
    action_dim: int
    n_actions: int | None = None
    scale: float = 1.0

    def inputs(self, s, a, g) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64).reshape(-1, self.state_dim)
        g = np.asarray(g, dtype=np.float64).reshape(-1, self.state_dim)
        if self.n_actions is not None:
            af = np.eye(self.n_actions)[np.asarray(a, dtype=np.int64).reshape(-1)]
        else:
            af = np.asarray(a, dtype=np.float64).reshape(-1, self.action_dim)
        return np.concatenate([s, af, g], axis=1)

    def raw(self, s, a, g) -> np.ndarray:
        """Unscaled prediction of ``-MSE``."""
        return nn.forward(self.mlp, self.inputs(s, a, g))[:, 0]


def make_reward_net(state_dim: int, rng: np.random.Generator, n_actions: int | None = None,
                    action_dim: int | None = None, config: RewardConfig | None = None) -> RewardNet:
    cfg = config or RewardConfig()
    adim = n_actions if n_actions is not None else action_dim
    mlp = nn.init_mlp([2 * state_dim + adim, *cfg.hidden, 1], rng)
    return RewardNet(mlp, nn.AdamState.for_params(mlp.params, lr=cfg.lr), state_dim, adim,
                     n_actions, cfg.scale)


def reward_loss_and_grads(rnet: RewardNet, s, a, g, target):
    """Squared error between the prediction and ``-target`` (an MSE estimate)."""
    x = rnet.inputs(s, a, g)
    out, cache = nn.forward_cache(rnet.mlp, x)
    d = out[:, 0] + np.asarray(target, dtype=np.float64)
    n = len(d)
    grads, _ = nn.backward_cache(rnet.mlp, cache, (2.0 * d / n)[:, None], need_input_grad=False)
    return float((d * d).mean()), grads


def reward_step(rnet: RewardNet, occ: VelocityFieldNet, s, a, g, n_draws: int, rng) -> float:
    """Regress the reward net onto fresh ``-MSE`` targets; returns the loss."""
    target, _ = velocity_mse(occ, s, a, g, n_draws, rng)
    loss, grads = reward_loss_and_grads(rnet, s, a, g, target)
    nn.adam_step(rnet.mlp.params, grads, rnet.opt)
    return loss


def train_reward(occ: VelocityFieldNet, dataset: OfflineDataset, sampler: GoalSampler,
                 config: RewardConfig, rng: np.random.Generator, embed=None,
                 rnet: RewardNet | None = None):
    """Distil ``-MSE`` into a reward network over dataset (s, a) and sampled
    goals. Returns ``(net, losses)``."""
    embed = embed if embed is not None else (lambda x: np.asarray(x, dtype=np.float64))
    if rnet is None:
        rnet = make_reward_net(occ.state_dim, rng, occ.n_actions,
                               None if occ.n_actions is not None else occ.action_dim, config)
    losses = []
    N = len(dataset)
    for _ in range(config.steps):
        idx = rng.integers(N, size=config.batch_size)
        g = sample_goals(dataset, idx, sampler, rng)
        losses.append(reward_step(rnet, occ, embed(dataset.s[idx]), dataset.a[idx], embed(g),
                                  config.mc_draws, rng))
    return rnet, losses


# -- reward sources ---------------------------------------------------------

@dataclass
class ExactRewardSource:
    """Table lookup ``-M(s, a, g) / scale`` for discrete states."""

    table: WassersteinTable
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("reward scale must be positive")
        self._col = -np.ones(int(self.table.goals.max()) + 1, dtype=np.int64)
        self._col[self.table.goals] = np.arange(len(self.table.goals))

    def __call__(self, s, a, g) -> np.ndarray:
        s = np.asarray(s, dtype=np.int64)
        a = np.asarray(a, dtype=np.int64)
        g = np.asarray(g, dtype=np.int64)
        n_states = self.table.M_sa.shape[0] // self.table.n_actions
        if np.any((s < 0) | (s >= n_states)) or np.any((g < 0) | (g >= len(self._col))):
            raise IndexError("state outside the reward table")
        col = self._col[g]
        if np.any(col < 0):
            raise IndexError("goal not covered by the reward table")
        return -self.table.M_sa[s * self.table.n_actions + a, col] / self.scale


@dataclass
class NetRewardSource:
    """Distilled network; ``embed`` maps raw states to network inputs."""

    net: RewardNet
    scale: float | None = None
    embed: object = None

    def __call__(self, s, a, g) -> np.ndarray:
        f = self.embed if self.embed is not None else (lambda x: np.asarray(x, dtype=np.float64))
        scale = self.net.scale if self.scale is None else self.scale
        return self.net.raw(f(s), a, f(g)) / scale


def sparse_reward(s, g) -> np.ndarray:
    """``-1`` away from the goal, ``0`` on it (discrete states)."""
    return -(np.asarray(s) != np.asarray(g)).astype(np.float64)


def shaped_reward(src, s, a, g):
    """``r^W / scale`` from an exact or distilled source; scalar inputs give a
    scalar."""
    scalar = np.ndim(s) == 0 or (not isinstance(src, ExactRewardSource) and np.ndim(s) == 1)
    if scalar:
        out = src(np.atleast_1d(s) if isinstance(src, ExactRewardSource) else np.asarray(s)[None],
                  np.atleast_1d(a) if np.ndim(a) == 0 else np.asarray(a)[None],
                  np.atleast_1d(g) if isinstance(src, ExactRewardSource) else np.asarray(g)[None])
        return float(out[0])
    return src(s, a, g)
