"""Offline goal-conditioned RL on top of a shaped reward: expectile value
learning with hindsight goals (tabular and neural), DDPG+BC extraction for
continuous actions, exact Q-iteration and policy evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import DeterministicMdp, OfflineDataset, PointMaze2d
from . import nn


# -- exact Q iteration ------------------------------------------------------

@dataclass
class QIterationResult:
    Q: np.ndarray            # (S, A)
    V: np.ndarray            # (S,)
    greedy: np.ndarray       # (S,) lowest-id argmax
    argmax_sets: np.ndarray  # (S, A) bool
    residual: float
    iterations: int


def tabular_q_iteration(mdp: DeterministicMdp, reward, gamma: float | None = None,
                        tol: float = 1e-10, max_iter: int = 100_000,
                        tie_tol: float = 1e-9) -> QIterationResult:
    """Optimal Q for a fixed goal by value iteration, polished with exact
    policy evaluation so ties are resolved to machine precision.

    ``reward`` is an (S, A) table. Raises ``ArithmeticError`` when the
    Bellman residual is still above ``tol`` after ``max_iter`` sweeps.
    """
    gamma = mdp.gamma if gamma is None else gamma
    reward = np.asarray(reward, dtype=np.float64)
    if reward.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"reward table shape {reward.shape} != {(mdp.n_states, mdp.n_actions)}")
    if not np.all(np.isfinite(reward)):
        raise ValueError("reward table must be finite")
    succ = mdp.successor
    Q = np.zeros_like(reward)
    resid = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        Q_new = reward + gamma * Q.max(axis=1)[succ]
        resid = float(np.abs(Q_new - Q).max())
        Q = Q_new
        if resid < tol:
            break
    else:
        raise ArithmeticError(f"Q iteration did not converge: residual {resid:.3e} "
                              f"after {max_iter} iterations")
    # policy-iteration polish: evaluate the greedy policy exactly
    S = mdp.n_states
    for _ in range(50):
        pi = Q.argmax(axis=1)
        nxt = succ[np.arange(S), pi]
        T = np.zeros((S, S))
        T[np.arange(S), nxt] = 1.0
        V = np.linalg.solve(np.eye(S) - gamma * T, reward[np.arange(S), pi])
        Q_new = reward + gamma * V[succ]
        if np.array_equal(Q_new.argmax(axis=1), pi):
            Q = Q_new
            break
        Q = Q_new
    V = Q.max(axis=1)
    scale = max(1.0, np.abs(Q).max())
    sets = Q >= V[:, None] - tie_tol * scale
    residual = float(np.abs(reward + gamma * V[succ] - Q).max())
    return QIterationResult(Q, V, Q.argmax(axis=1), sets, residual, it)


# -- hindsight goals --------------------------------------------------------

@dataclass
class GoalSampler:
    """Mixture over goal sources: the current state, a later state of the same
    trajectory, or a uniformly random dataset state."""

    p_cur: float = 0.2
    p_traj: float = 0.5
    p_rand: float = 0.3
    geometric: bool = True      # geometric vs uniform offsets for p_traj
    gamma: float = 0.99

    def __post_init__(self):
        probs = np.array([self.p_cur, self.p_traj, self.p_rand], dtype=np.float64)
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"goal mixture must be non-negative and sum to 1, got {probs.tolist()}")

    @property
    def probs(self) -> np.ndarray:
        return np.array([self.p_cur, self.p_traj, self.p_rand])


def sample_goal_kinds(n: int, sampler: GoalSampler, rng) -> np.ndarray:
    """0 = current state, 1 = same-trajectory future, 2 = random."""
    u = rng.random(n)
    return np.searchsorted(np.cumsum(sampler.probs)[:2], u, side="right")


def sample_goals(dataset: OfflineDataset, idx, sampler: GoalSampler, rng) -> np.ndarray:
    """One goal per tuple index. Trajectory goals come strictly after the
    tuple's own state; geometric offsets past the end clamp to the final
    state ``s'`` of the last tuple."""
    idx = np.asarray(idx, dtype=np.int64)
    n = len(idx)
    kinds = sample_goal_kinds(n, sampler, rng)
    remaining = dataset.traj_end[idx] - idx + 1          # states strictly after s_t
    if sampler.geometric:
        offsets = rng.geometric(1.0 - sampler.gamma, size=n) if sampler.gamma > 0 else np.ones(n, int)
    else:
        offsets = 1 + np.floor(rng.random(n) * remaining).astype(np.int64)
    rand_idx = rng.integers(len(dataset), size=n)
    cur = dataset.s[idx]
    fut = dataset.future_state(idx, offsets)
    rnd = dataset.s[rand_idx]
    if dataset.discrete:
        return np.where(kinds == 0, cur, np.where(kinds == 1, fut, rnd))
    k = kinds[:, None]
    return np.where(k == 0, cur, np.where(k == 1, fut, rnd))


# -- expectile regression ---------------------------------------------------

def expectile_weights(u, kappa: float) -> np.ndarray:
    return np.abs(kappa - (np.asarray(u) < 0).astype(np.float64))


def expectile_loss(u, kappa: float) -> np.ndarray:
    """Elementwise ``|kappa - 1(u < 0)| u^2``."""
    if not 0.0 < kappa < 1.0:
        raise ValueError("expectile kappa must lie in (0, 1)")
    u = np.asarray(u, dtype=np.float64)
    return expectile_weights(u, kappa) * u * u


@dataclass
class GciqlConfig:
    kappa: float = 0.6
    alpha: float = 0.3
    gamma: float = 0.99
    batch_size: int = 256
    steps: int = 20000
    lr: float = 3e-4
    target_rate: float = 0.005
    hidden: tuple = (256, 256)
    critic_sampler: GoalSampler = field(default_factory=GoalSampler)
    actor_sampler: GoalSampler = field(default_factory=lambda: GoalSampler(0.0, 1.0, 0.0))
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    eval_every: int = 0

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise ValueError("kappa must lie in (0, 1)")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        self.hidden = tuple(int(h) for h in self.hidden)


def _check_finite(name: str, values: np.ndarray):
    bad = ~np.isfinite(values)
    if bad.any():
        raise FloatingPointError(f"non-finite {name} at batch index {int(np.flatnonzero(bad)[0])}")


# -- tabular GCIQL ----------------------------------------------------------

@dataclass(eq=False)
class TabularGciql:
    """Q1, Q2 of shape (S, A, G) and V of shape (S, G) trained by the same
    losses as the neural version, with Adam on the tables."""

    params: dict
    target: nn.TargetCopy
    opt: nn.AdamState
    kappa: float
    gamma: float
    support: np.ndarray          # (S, A) bool: actions seen in the data at s

    @classmethod
    def create(cls, n_states: int, n_actions: int, config: GciqlConfig,
               support: np.ndarray | None = None) -> "TabularGciql":
        params = {"Q1": np.zeros((n_states, n_actions, n_states)),
                  "Q2": np.zeros((n_states, n_actions, n_states)),
                  "V": np.zeros((n_states, n_states))}
        sup = np.ones((n_states, n_actions), bool) if support is None else support.astype(bool)
        return cls(params, nn.TargetCopy({k: params[k].copy() for k in ("Q1", "Q2")},
                                         config.target_rate),
                   nn.AdamState.for_params(params, lr=config.lr), config.kappa, config.gamma, sup)

    def q(self, s, g) -> np.ndarray:
        """Mean of the two critics, shape (n, A)."""
        return 0.5 * (self.params["Q1"][s, :, g] + self.params["Q2"][s, :, g])

    def act(self, s, g) -> np.ndarray:
        q = np.where(self.support[s], self.q(s, g), -np.inf)
        return q.argmax(axis=1)


def tabular_gciql_step(agent: TabularGciql, reward_fn, s, a, s_next, g) -> dict:
    """One joint Adam step of the V (expectile) and double-Q (TD) losses.

    ``reward_fn(s, a, g)`` returns rewards; transitions whose state already
    equals the goal do not bootstrap.
    """
    P, T = agent.params, agent.target.params
    n = len(s)
    r = np.asarray(reward_fn(s, a, g), dtype=np.float64)
    _check_finite("reward", r)
    q_bar = np.minimum(T["Q1"][s, a, g], T["Q2"][s, a, g])
    u = q_bar - P["V"][s, g]
    loss_v = float(expectile_loss(u, agent.kappa).mean())
    mask = (s != g).astype(np.float64)
    y = r + agent.gamma * mask * P["V"][s_next, g]
    grads = {k: np.zeros_like(v) for k, v in P.items()}
    np.add.at(grads["V"], (s, g), -2.0 * expectile_weights(u, agent.kappa) * u / n)
    loss_q = 0.0
    for k in ("Q1", "Q2"):
        d = P[k][s, a, g] - y
        _check_finite("TD error", d)
        loss_q += float((d * d).mean())
        np.add.at(grads[k], (s, a, g), 2.0 * d / n)
    nn.adam_step(P, grads, agent.opt)
    for k in ("Q1", "Q2"):
        T[k] *= 1.0 - agent.target.rate
        T[k] += agent.target.rate * P[k]
    return {"loss_v": loss_v, "loss_q": loss_q, "loss_pi": 0.0}


def dataset_support(dataset: OfflineDataset, n_states: int, n_actions: int) -> np.ndarray:
    sup = np.zeros((n_states, n_actions), bool)
    sup[dataset.s, dataset.a] = True
    sup[~sup.any(axis=1)] = True
    return sup


def train_tabular_gciql(mdp: DeterministicMdp, dataset: OfflineDataset, reward_fn,
                        config: GciqlConfig, rng: np.random.Generator,
                        eval_fn=None) -> tuple[TabularGciql, list[dict]]:
    agent = TabularGciql.create(mdp.n_states, mdp.n_actions, config,
                                dataset_support(dataset, mdp.n_states, mdp.n_actions))
    rows = []
    N = len(dataset)
    for step in range(1, config.steps + 1):
        idx = rng.integers(N, size=config.batch_size)
        g = sample_goals(dataset, idx, config.critic_sampler, rng)
        losses = tabular_gciql_step(agent, reward_fn, dataset.s[idx], dataset.a[idx],
                                    dataset.s_next[idx], g)
        if config.eval_every and eval_fn is not None and step % config.eval_every == 0:
            ev = eval_fn(agent)
            rows.append({"step": step, **losses, "eval_success": ev.success_rate,
                         "eval_return": ev.mean_return})
    return agent, rows


# -- neural GCIQL -----------------------------------------------------------

@dataclass(eq=False)
class ExpectileCritic:
    v: nn.Mlp
    q1: nn.Mlp
    q2: nn.Mlp
    q1_target: nn.TargetCopy
    q2_target: nn.TargetCopy
    opt: dict
    kappa: float = 0.6
    gamma: float = 0.99
    alpha: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise ValueError("kappa must lie in (0, 1)")

    def value(self, s, g) -> np.ndarray:
        return nn.forward(self.v, np.concatenate([s, g], axis=1))[:, 0]

    def q_values(self, s, a, g, target: bool = False) -> tuple[np.ndarray, np.ndarray]:
        x = np.concatenate([s, a, g], axis=1)
        p1 = self.q1_target.params if target else None
        p2 = self.q2_target.params if target else None
        return nn.forward(self.q1, x, p1)[:, 0], nn.forward(self.q2, x, p2)[:, 0]


@dataclass(eq=False)
class GaussianPolicy:
    """Diagonal Gaussian with ``tanh``-squashed mean inside ``[low, high]``."""

    mlp: nn.Mlp
    opt: nn.AdamState
    action_dim: int
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    low: float = -1.0
    high: float = 1.0

    def _split(self, out):
        half = 0.5 * (self.high - self.low)
        mid = 0.5 * (self.high + self.low)
        th = np.tanh(out[:, :self.action_dim])
        raw_ls = out[:, self.action_dim:]
        log_std = np.clip(raw_ls, self.log_std_min, self.log_std_max)
        return mid + half * th, log_std, th, raw_ls

    def mean(self, s, g) -> np.ndarray:
        out = nn.forward(self.mlp, np.concatenate([s, g], axis=1))
        m, *_ = self._split(out)
        _check_finite("policy mean", m.sum(axis=1))
        return m

    def log_std(self, s, g) -> np.ndarray:
        return self._split(nn.forward(self.mlp, np.concatenate([s, g], axis=1)))[1]

    def sample(self, s, g, rng) -> np.ndarray:
        out = nn.forward(self.mlp, np.concatenate([s, g], axis=1))
        m, ls, *_ = self._split(out)
        return np.clip(m + np.exp(ls) * rng.standard_normal(m.shape), self.low, self.high)


def make_gciql(state_dim: int, action_dim: int, config: GciqlConfig, rng: np.random.Generator):
    """Fresh critic (V, double Q, targets) and Gaussian policy."""
    h = list(config.hidden)
    v = nn.init_mlp([2 * state_dim, *h, 1], rng)
    q1 = nn.init_mlp([2 * state_dim + action_dim, *h, 1], rng)
    q2 = nn.init_mlp([2 * state_dim + action_dim, *h, 1], rng)
    pi = nn.init_mlp([2 * state_dim, *h, 2 * action_dim], rng)
    opt = {k: nn.AdamState.for_params(m.params, lr=config.lr) for k, m in
           (("v", v), ("q1", q1), ("q2", q2))}
    critic = ExpectileCritic(v, q1, q2, nn.TargetCopy.of(q1, config.target_rate),
                             nn.TargetCopy.of(q2, config.target_rate), opt,
                             config.kappa, config.gamma, config.alpha)
    policy = GaussianPolicy(pi, nn.AdamState.for_params(pi.params, lr=config.lr), action_dim,
                            config.log_std_min, config.log_std_max)
    return critic, policy


@dataclass
class GcBatch:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    g: np.ndarray                # critic goals
    mask: np.ndarray             # 0 where s already satisfies the goal
    g_actor: np.ndarray | None = None


def _scalar_net_grad(net, x, dout):
    out, cache = nn.forward_cache(net, x)
    grads, gin = nn.backward_cache(net, cache, dout[:, None])
    return grads, gin


def policy_loss_and_grads(critic: ExpectileCritic, policy: GaussianPolicy, s, a, g,
                          lam: float | None = None):
    """DDPG+BC: maximise ``Q(s, mu(s,g), g) / mean|Q| + alpha log pi(a|s,g)``.

    Returns ``(loss, grads)`` for the policy parameters. Q is the minimum of
    the two online critics; its scale is treated as a constant (pass ``lam``
    to fix it explicitly).
    """
    n, d = a.shape
    x_pi = np.concatenate([s, g], axis=1)
    out, cache = nn.forward_cache(policy.mlp, x_pi)
    mu, log_std, th, raw_ls = policy._split(out)
    x_q = np.concatenate([s, mu, g], axis=1)
    q1o, c1 = nn.forward_cache(critic.q1, x_q)
    q2o, c2 = nn.forward_cache(critic.q2, x_q)
    use1 = q1o[:, 0] <= q2o[:, 0]
    q = np.where(use1, q1o[:, 0], q2o[:, 0])
    if lam is None:
        lam = max(float(np.abs(q).mean()), 1e-6)
    # dq/dmu through whichever critic attains the minimum
    _, gin1 = nn.backward_cache(critic.q1, c1, (use1 / 1.0)[:, None].astype(float))
    _, gin2 = nn.backward_cache(critic.q2, c2, (~use1)[:, None].astype(float))
    dq_dmu = (gin1 + gin2)[:, s.shape[1]:s.shape[1] + d]
    std = np.exp(log_std)
    z = (a - mu) / std
    log_prob = (-0.5 * z * z - log_std - 0.5 * np.log(2 * np.pi)).sum(axis=1)
    loss = float(-(q / lam).mean() - critic.alpha * log_prob.mean())
    d_mu = -dq_dmu / (lam * n) - critic.alpha * (z / std) / n
    d_ls = -critic.alpha * (z * z - 1.0) / n
    d_ls = d_ls * ((raw_ls >= policy.log_std_min) & (raw_ls <= policy.log_std_max))
    half = 0.5 * (policy.high - policy.low)
    dout = np.concatenate([d_mu * half * (1.0 - th * th), d_ls], axis=1)
    grads, _ = nn.backward_cache(policy.mlp, cache, dout, need_input_grad=False)
    return loss, grads


def critic_loss_and_grads(critic: ExpectileCritic, reward_fn, batch: GcBatch):
    """Expectile V loss and TD losses of both Q heads.

    Returns ``(losses, grads)`` with grads keyed ``v``, ``q1``, ``q2``. The
    targets (target critics for V, online V at ``s'`` for Q) are constants.
    """
    s, a, s2, g = batch.s, batch.a, batch.s_next, batch.g
    n = len(s)
    r = np.asarray(reward_fn(s, a, g), dtype=np.float64).reshape(-1)
    _check_finite("reward", r)
    t1, t2 = critic.q_values(s, a, g, target=True)
    q_bar = np.minimum(t1, t2)
    x_v = np.concatenate([s, g], axis=1)
    v_out, v_cache = nn.forward_cache(critic.v, x_v)
    u = q_bar - v_out[:, 0]
    _check_finite("value residual", u)
    loss_v = float(expectile_loss(u, critic.kappa).mean())
    v_next = critic.value(s2, g)
    y = r + critic.gamma * batch.mask * v_next
    x_q = np.concatenate([s, a, g], axis=1)
    grads = {}
    loss_q = 0.0
    for name, net in (("q1", critic.q1), ("q2", critic.q2)):
        out, cache = nn.forward_cache(net, x_q)
        d = out[:, 0] - y
        _check_finite("TD error", d)
        loss_q += float((d * d).mean())
        grads[name], _ = nn.backward_cache(net, cache, (2.0 * d / n)[:, None], need_input_grad=False)
    dv = -2.0 * expectile_weights(u, critic.kappa) * u / n
    grads["v"], _ = nn.backward_cache(critic.v, v_cache, dv[:, None], need_input_grad=False)
    return {"loss_v": loss_v, "loss_q": loss_q}, grads


def gciql_step(critic: ExpectileCritic, policy: GaussianPolicy | None, reward_fn,
               batch: GcBatch, rng=None) -> dict:
    """One Adam step each on V, Q1, Q2 and (if given) the policy, then Polyak
    updates of the target critics."""
    losses, grads = critic_loss_and_grads(critic, reward_fn, batch)
    loss_pi = 0.0
    if policy is not None:
        ga = batch.g_actor if batch.g_actor is not None else batch.g
        loss_pi, pgrads = policy_loss_and_grads(critic, policy, batch.s, batch.a, ga)
        if not np.isfinite(loss_pi):
            raise FloatingPointError("non-finite policy loss")
        nn.adam_step(policy.mlp.params, pgrads, policy.opt)
    for name, net in (("v", critic.v), ("q1", critic.q1), ("q2", critic.q2)):
        nn.adam_step(net.params, grads[name], critic.opt[name])
    nn.polyak_update(critic.q1_target, critic.q1)
    nn.polyak_update(critic.q2_target, critic.q2)
    return {**losses, "loss_pi": loss_pi}


def make_batch(dataset: OfflineDataset, idx, config: GciqlConfig, rng, reached_fn) -> GcBatch:
    g = sample_goals(dataset, idx, config.critic_sampler, rng)
    g_actor = sample_goals(dataset, idx, config.actor_sampler, rng)
    s = dataset.s[idx]
    mask = 1.0 - np.asarray(reached_fn(s, g), dtype=np.float64)
    return GcBatch(s, dataset.a[idx], dataset.s_next[idx], g, mask, g_actor)


def train_gciql(env: PointMaze2d, dataset: OfflineDataset, reward_fn, config: GciqlConfig,
                rng: np.random.Generator, eval_fn=None):
    """Neural GCIQL on a continuous dataset. Returns ``(critic, policy, rows)``
    where ``rows`` are metric dicts logged every ``config.eval_every`` steps."""
    if dataset.discrete:
        raise ValueError("neural GCIQL expects a continuous dataset; use train_tabular_gciql")
    critic, policy = make_gciql(env.state_dim, env.action_dim, config, rng)
    rows = []
    for step in range(1, config.steps + 1):
        idx = rng.integers(len(dataset), size=config.batch_size)
        batch = make_batch(dataset, idx, config, rng, env.reached)
        losses = gciql_step(critic, policy, reward_fn, batch, rng)
        if config.eval_every and step % config.eval_every == 0:
            row = {"step": step, **losses, "eval_success": float("nan"), "eval_return": float("nan")}
            if eval_fn is not None:
                ev = eval_fn(policy)
                row.update(eval_success=ev.success_rate, eval_return=ev.mean_return)
            rows.append(row)
    return critic, policy, rows


# -- evaluation -------------------------------------------------------------

@dataclass
class EvalResult:
    success_rate: float
    mean_return: float
    per_goal: dict

    def to_dict(self):
        return {"success_rate": self.success_rate, "mean_return": self.mean_return,
                "per_goal": {str(k): v for k, v in self.per_goal.items()}}


def evaluate_policy(env, policy, goals, episodes: int, horizon: int, rng: np.random.Generator,
                    starts=None) -> EvalResult:
    """Binary success: the goal is reached within ``horizon`` steps.

    ``policy(s, g)`` maps batches of states and goals to actions. For a
    :class:`DeterministicMdp` states are ids and success means equality; for
    :class:`PointMaze2d` success is ``env.reached``. Returns are the sparse
    ``-1`` per step spent away from the goal.
    """
    goals = list(goals)
    if not goals:
        raise ValueError("goal set is empty")
    per_goal = {}
    all_succ, all_ret = [], []
    tabular = isinstance(env, DeterministicMdp)
    for gi, g in enumerate(goals):
        if starts is not None:
            s = np.asarray(starts[gi])
            s = np.repeat(s[None], episodes, axis=0) if not tabular else np.full(episodes, int(s))
        elif tabular:
            s = rng.integers(env.n_states, size=episodes)
        else:
            s = env.sample_states(episodes, rng)
        if tabular:
            g_b = np.full(episodes, int(g))
            done = s == g_b
        else:
            g_b = np.repeat(np.asarray(g, dtype=np.float64)[None], episodes, axis=0)
            done = env.reached(s, g_b)
        ret = np.zeros(episodes)
        for _ in range(horizon):
            if done.all():
                break
            act = policy(s, g_b)
            s_new = env.successor[s, act] if tabular else env.step(s, act, rng)
            s = np.where(done, s, s_new) if tabular else np.where(done[:, None], s, s_new)
            ret -= ~done
            done = done | ((s == g_b) if tabular else env.reached(s, g_b))
        key = int(g) if tabular else gi
        per_goal[key] = float(done.mean())
        all_succ.append(done)
        all_ret.append(ret)
    return EvalResult(float(np.concatenate(all_succ).mean()), float(np.concatenate(all_ret).mean()),
                      per_goal)


def oracle_policy(mdp: DeterministicMdp):
    """Shortest-path actor (lowest-id action among shortest moves)."""
    from .envs import compute_layers, shortest_path_actions
    cache = {}

    def act(s, g):
        out = np.empty(len(s), dtype=np.int64)
        for i, (si, gi) in enumerate(zip(np.asarray(s), np.asarray(g))):
            gi = int(gi)
            if gi not in cache:
                cache[gi] = shortest_path_actions(mdp, compute_layers(mdp, gi)).argmax(axis=1)
            out[i] = cache[gi][si]
        return out
    return act
