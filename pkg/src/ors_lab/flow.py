"""Flow-matching model of the occupancy measure d(s+ | s, a).

The velocity field ``v(t, s, a, x)`` transports N(0, I) at t=0 to future
states at t=1 along straight interpolants ``x_t = (1-t) x0 + t x1``.
Training has two phases: a warm start regressing onto Monte-Carlo futures
drawn at geometric offsets inside a trajectory, then the bootstrapped loss
that mixes the next-state flow (weight 1-gamma) with the target network's
velocity at the successor pair (weight gamma).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .envs import OfflineDataset

FUTURE_TARGET_MODES = ("sampled", "target_path")


@dataclass
class OccupancyConfig:
    gamma: float = 0.99
    pretrain_steps: int = 2000
    flow_loss_steps: int = 2000
    flow_steps_train: int = 16
    flow_steps_sample: int = 16
    batch_size: int = 256
    lr: float = 3e-4
    lr_final: float | None = None    # cosine decay to this value per phase; None = constant
    flow_lr: float | None = None     # peak rate of the bootstrapped phase; None = lr
    target_rate: float = 0.005
    hidden: tuple = (128, 128, 128)
    layer_norm: bool = True
    future_target_mode: str = "sampled"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.future_target_mode not in FUTURE_TARGET_MODES:
            raise ValueError(f"future_target_mode must be one of {FUTURE_TARGET_MODES}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


@dataclass(eq=False)
class VelocityFieldNet:
    mlp: nn.Mlp
    target: nn.TargetCopy
    opt: nn.AdamState
    state_dim: int
    action_dim: int
    n_actions: int | None = None     # discrete actions are one-hot encoded
    gamma: float = 0.99
    flow_steps: int = 16

    def action_features(self, a) -> np.ndarray:
        if self.n_actions is not None:
            a = np.asarray(a, dtype=np.int64).reshape(-1)
            return np.eye(self.n_actions)[a]
        return np.asarray(a, dtype=np.float64).reshape(-1, self.action_dim)

    def inputs(self, t, s, a, x) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64).reshape(-1, self.state_dim)
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.state_dim)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (len(x), 1))
        return np.concatenate([t, s, self.action_features(a), x], axis=1)

    def velocity(self, t, s, a, x, params=None) -> np.ndarray:
        return nn.forward(self.mlp, self.inputs(t, s, a, x), params)

    def target_velocity(self, t, s, a, x) -> np.ndarray:
        return self.velocity(t, s, a, x, params=self.target.params)


def make_velocity_field(state_dim: int, rng: np.random.Generator, n_actions: int | None = None,
                        action_dim: int | None = None, config: OccupancyConfig | None = None
                        ) -> VelocityFieldNet:
    cfg = config or OccupancyConfig()
    adim = n_actions if n_actions is not None else action_dim
    if adim is None:
        raise ValueError("give n_actions (discrete) or action_dim (continuous)")
    widths = [1 + state_dim + adim + state_dim, *cfg.hidden, state_dim]
    mlp = nn.init_mlp(widths, rng, layer_norm=cfg.layer_norm)
    return VelocityFieldNet(mlp, nn.TargetCopy.of(mlp, cfg.target_rate),
                            nn.AdamState.for_params(mlp.params, lr=cfg.lr),
                            state_dim, adim, n_actions, cfg.gamma, cfg.flow_steps_sample)


@dataclass
class FlowBatch:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    xt: np.ndarray


def make_flow_batch(x1, rng: np.random.Generator) -> FlowBatch:
    """Noise, times and straight-line interpolants for targets ``x1``.

    Draw order is fixed (noise first, then times) so that losses sharing an
    rng see identical draws.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x0 = rng.standard_normal(x1.shape)
    t = rng.random(len(x1))
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    return FlowBatch(x0, x1, t, xt)


def sample_geometric_offsets(gamma: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Offsets on {1, 2, ...} with P(k) = (1-gamma) gamma^(k-1)."""
    if gamma <= 0.0:
        return np.ones(n, dtype=np.int64)
    return rng.geometric(1.0 - gamma, size=n)


def _regression(net, s, a, xt, t, target, weights, params=None):
    """Weighted mean squared velocity error and its parameter gradients."""
    inp = net.inputs(t, s, a, xt)
    out, cache = nn.forward_cache(net.mlp, inp, params)
    diff = out - target
    per = (diff * diff).sum(axis=1)
    n = len(per)
    loss = float((weights * per).sum() / n)
    dout = (2.0 / n) * weights[:, None] * diff
    grads, _ = nn.backward_cache(net.mlp, cache, dout, params, need_input_grad=False)
    return loss, grads, per


def pretrain_loss_and_grads(net: VelocityFieldNet, s, a, x1, rng):
    if len(x1) == 0:
        raise ValueError("empty batch")
    b = make_flow_batch(x1, rng)
    loss, grads, _ = _regression(net, s, a, b.xt, b.t, b.x1 - b.x0, np.ones(len(b.t)))
    return loss, grads


def pretrain_step(net: VelocityFieldNet, s, a, x1, rng) -> float:
    """One Adam step of plain flow matching onto given future states ``x1``.

    ``x1`` are usually geometric-offset futures from the dataset (see
    :func:`geometric_future_batch`). Returns the loss before the step.
    """
    loss, grads = pretrain_loss_and_grads(net, s, a, x1, rng)
    nn.adam_step(net.mlp.params, grads, net.opt)
    nn.polyak_update(net.target, net.mlp)
    return loss


def sample_future_batch(net: VelocityFieldNet, s, a, rng, flow_steps: int | None = None,
                        params=None, x0=None) -> np.ndarray:
    """One Euler-integrated sample per (s, a) row."""
    k = net.flow_steps if flow_steps is None else int(flow_steps)
    if k < 1:
        raise ValueError("flow_steps must be >= 1")
    s = np.asarray(s, dtype=np.float64).reshape(-1, net.state_dim)
    x = rng.standard_normal(s.shape) if x0 is None else np.array(x0, dtype=np.float64)
    dt = 1.0 / k
    for i in range(k):
        x = x + dt * net.velocity(np.full(len(x), i * dt), s, a, x, params)
        bad = ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            raise FloatingPointError(f"Euler sample {int(np.flatnonzero(bad)[0])} diverged "
                                     f"at step {i + 1}/{k}")
    return x


def sample_future(net: VelocityFieldNet, s, a, n_samples: int, flow_steps: int | None = None,
                  rng: np.random.Generator | None = None, params=None) -> np.ndarray:
    """``n_samples`` future-state samples for a single (s, a)."""
    rng = rng if rng is not None else np.random.default_rng()
    s_rep = np.repeat(np.asarray(s, dtype=np.float64).reshape(1, -1), n_samples, axis=0)
    a_arr = np.asarray(a)
    a_rep = np.repeat(a_arr.reshape(1, -1), n_samples, axis=0) if net.n_actions is None \
        else np.full(n_samples, int(a_arr))
    return sample_future_batch(net, s_rep, a_rep, rng, flow_steps, params)


def _target_path_points(net, s_next, a_next, x0, t, flow_steps):
    """Integrate the target flow from ``x0`` up to each row's own time ``t``."""
    x = x0.copy()
    dt = t / flow_steps
    for i in range(flow_steps):
        x = x + dt[:, None] * net.target_velocity(i * dt, s_next, a_next, x)
    return x


def flow_loss_and_grads(net: VelocityFieldNet, s, a, s_next, a_next, gamma: float, rng,
                        flow_steps: int | None = None, mode: str = "sampled"):
    """Bootstrapped occupancy loss ``(1-gamma) L_next + gamma L_future``.

    The future branch regresses onto the target network's velocity at
    ``(s', a')``; the target is evaluated forward-only, so no gradient
    reaches its parameters. Returns ``(loss, grads, parts)``.
    """
    if mode not in FUTURE_TARGET_MODES:
        raise ValueError(f"unknown future target mode {mode!r}")
    s_next = np.asarray(s_next, dtype=np.float64)
    n = len(s_next)
    if n == 0:
        raise ValueError("empty batch")
    nb = make_flow_batch(s_next, rng)
    loss_next, g_next, _ = _regression(net, s, a, nb.xt, nb.t, nb.x1 - nb.x0, np.ones(n))
    parts = {"next": loss_next, "future": 0.0}
    if gamma == 0.0:
        return loss_next, g_next, parts
    k = net.flow_steps if flow_steps is None else flow_steps
    if mode == "sampled":
        x1 = sample_future_batch(net, s_next, a_next, rng, k, params=net.target.params)
        fb = make_flow_batch(x1, rng)
        xt, t = fb.xt, fb.t
    else:
        x0 = rng.standard_normal(s_next.shape)
        t = rng.random(n)
        xt = _target_path_points(net, s_next, a_next, x0, t, k)
    v_target = net.target_velocity(t, s_next, a_next, xt)      # constant: no backprop
    loss_future, g_future, _ = _regression(net, s, a, xt, t, v_target, np.ones(n))
    parts["future"] = loss_future
    loss = (1.0 - gamma) * loss_next + gamma * loss_future
    grads = {k_: (1.0 - gamma) * g_next[k_] + gamma * g_future[k_] for k_ in g_next}
    return loss, grads, parts


def flow_loss_step(net: VelocityFieldNet, s, a, s_next, a_next, gamma: float, rng,
                   flow_steps: int | None = None, mode: str = "sampled") -> float:
    loss, grads, _ = flow_loss_and_grads(net, s, a, s_next, a_next, gamma, rng, flow_steps, mode)
    nn.adam_step(net.mlp.params, grads, net.opt)
    nn.polyak_update(net.target, net.mlp)
    return loss


def geometric_future_batch(dataset: OfflineDataset, idx, gamma: float, rng) -> np.ndarray:
    """Dataset state ``t_tau ~ Geom(1-gamma)`` steps after each tuple (clamped
    to the trajectory's last state)."""
    offsets = sample_geometric_offsets(gamma, len(idx), rng)
    return dataset.future_state(idx, offsets)


def cosine_lr(config: OccupancyConfig, step: int, total: int, peak: float | None = None) -> float:
    peak = config.lr if peak is None else peak
    if config.lr_final is None or total <= 1:
        return peak
    frac = step / (total - 1)
    return config.lr_final + 0.5 * (peak - config.lr_final) * (1.0 + np.cos(np.pi * frac))


def train_occupancy(dataset: OfflineDataset, config: OccupancyConfig, rng: np.random.Generator,
                    embed=None, n_actions: int | None = None, net: VelocityFieldNet | None = None,
                    log_every: int = 0):
    """Warm start for ``pretrain_steps`` then bootstrapped training for
    ``flow_loss_steps``. ``embed`` maps dataset states to vectors (identity for
    continuous data). Returns ``(net, history)`` with one loss per step.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    embed = embed if embed is not None else (lambda x: np.asarray(x, dtype=np.float64))
    S = embed(dataset.s)
    S_next = embed(dataset.s_next)
    if net is None:
        adim = None if dataset.discrete else np.asarray(dataset.a).reshape(len(dataset), -1).shape[1]
        net = make_velocity_field(S.shape[1], rng, n_actions=n_actions if dataset.discrete else None,
                                  action_dim=adim, config=config)
    history = {"pretrain": [], "flow": []}
    N = len(dataset)
    for step in range(config.pretrain_steps):
        net.opt.lr = cosine_lr(config, step, config.pretrain_steps)
        idx = rng.integers(N, size=config.batch_size)
        x1 = embed(geometric_future_batch(dataset, idx, config.gamma, rng))
        history["pretrain"].append(pretrain_step(net, S[idx], dataset.a[idx], x1, rng))
        if log_every and step % log_every == 0:
            print(f"pretrain {step}: {history['pretrain'][-1]:.4f}")
    for step in range(config.flow_loss_steps):
        net.opt.lr = cosine_lr(config, step, config.flow_loss_steps, config.flow_lr)
        idx = rng.integers(N, size=config.batch_size)
        history["flow"].append(flow_loss_step(net, S[idx], dataset.a[idx], S_next[idx],
                                              dataset.a_next[idx], config.gamma, rng,
                                              config.flow_steps_train, config.future_target_mode))
        if log_every and step % log_every == 0:
            print(f"flow {step}: {history['flow'][-1]:.4f}")
    return net, history


def snapped_occupancy(net: VelocityFieldNet, coords: np.ndarray, n_actions: int, n_samples: int,
                      rng: np.random.Generator, flow_steps: int | None = None) -> np.ndarray:
    """Empirical distribution of nearest-state-snapped samples, shaped like an
    exact occupancy table: (S*A, S)."""
    S = len(coords)
    s_ids = np.repeat(np.arange(S), n_actions * n_samples)
    a_ids = np.tile(np.repeat(np.arange(n_actions), n_samples), S)
    x = sample_future_batch(net, coords[s_ids], a_ids, rng, flow_steps)
    d2 = ((x[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
    snapped = d2.argmin(axis=1)
    rows = s_ids * n_actions + a_ids
    out = np.zeros((S * n_actions, S))
    np.add.at(out, (rows, snapped), 1.0)
    return out / n_samples


def net_to_checkpoint(net: VelocityFieldNet) -> tuple[dict, dict, dict]:
    extra = {"kind": "velocity_field", "state_dim": net.state_dim, "action_dim": net.action_dim,
             "n_actions": net.n_actions, "gamma": net.gamma, "flow_steps": net.flow_steps,
             "target_rate": net.target.rate, "target": nn.pack_arrays(net.target.params)}
    return {"velocity": net.mlp}, {"velocity": net.opt}, extra


def net_from_checkpoint(nets, adam, extra) -> VelocityFieldNet:
    mlp = nets["velocity"]
    target = nn.TargetCopy(nn.unpack_arrays(extra["target"]), extra["target_rate"])
    opt = adam.get("velocity") or nn.AdamState.for_params(mlp.params)
    return VelocityFieldNet(mlp, target, opt, extra["state_dim"], extra["action_dim"],
                            extra["n_actions"], extra["gamma"], extra["flow_steps"])
