"""Run configuration: nested dataclasses <-> TOML documents.

Every field has a default, unknown keys raise, and ``from_dict(to_dict(c))``
returns an equal config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:          # Python < 3.11
    import tomli as tomllib
import tomli_w

STREAMS = ("dataset", "occupancy", "reward", "policy", "analysis", "eval")


@dataclass
class EnvConfig:
    name: str = "chain"              # chain | grid | maze8x8 | u_maze | point | file
    size: int = 5                    # chain length
    height: int = 3
    width: int = 3
    maze_file: str = ""
    gamma: float = 0.99
    goal: int = -1                   # -1: no fixed goal


@dataclass
class DatasetConfig:
    policy: str = "uniform"          # uniform | eps_greedy | layer_monotone
    epsilon: float = 0.3
    n_trajectories: int = 50
    horizon: int = 200
    seed: int = 0


@dataclass
class OccupancySection:
    gamma: float = 0.9
    pretrain_steps: int = 2000
    flow_loss_steps: int = 500
    flow_steps_train: int = 16
    flow_steps_sample: int = 16
    batch_size: int = 256
    lr: float = 2e-3
    lr_final: float = 1e-5
    flow_lr: float = 3e-4
    target_rate: float = 0.005
    hidden: list = field(default_factory=lambda: [128, 128, 128])
    future_target_mode: str = "sampled"


@dataclass
class RewardSection:
    steps: int = 1000
    batch_size: int = 256
    mc_draws: int = 32
    lr: float = 1e-3
    hidden: list = field(default_factory=lambda: [128, 128])
    scale: float = 1.0
    p_cur: float = 0.2
    p_traj: float = 0.5
    p_rand: float = 0.3


@dataclass
class GcrlSection:
    reward: str = "learned"          # learned | exact | sparse
    kappa: float = 0.6
    alpha: float = 0.3
    gamma: float = 0.99
    batch_size: int = 256
    steps: int = 3000
    lr: float = 0.05
    target_rate: float = 0.05
    critic_ratios: list = field(default_factory=lambda: [0.2, 0.5, 0.3])
    actor_ratios: list = field(default_factory=lambda: [0.0, 1.0, 0.0])
    eval_every: int = 500
    eval_episodes: int = 20
    eval_horizon: int = 50


@dataclass
class AnalysisSection:
    sigmas: list = field(default_factory=lambda: [1e-4, 5e-4, 1e-3, 5e-3])
    seeds: int = 100
    gamma: float = 0.99
    corridor_length: int = 801
    starts: list = field(default_factory=lambda: [300, 400, 500, 600, 700])


@dataclass
class VerifySection:
    family_size: int = 20
    goals_per_maze: int = 3
    gammas: list = field(default_factory=lambda: [0.9, 0.99])
    prop2_draws: int = 256


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    env: EnvConfig = field(default_factory=EnvConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    occupancy: OccupancySection = field(default_factory=OccupancySection)
    reward: RewardSection = field(default_factory=RewardSection)
    gcrl: GcrlSection = field(default_factory=GcrlSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    verify: VerifySection = field(default_factory=VerifySection)


class ConfigError(ValueError):
    pass


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where or 'root'}]: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".strip("."))
        elif isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{name} must be a list")
            kwargs[name] = list(value)
        elif isinstance(default, bool):
            kwargs[name] = bool(value)
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{where}.{name} must be a number")
            kwargs[name] = float(value)
        elif isinstance(default, int):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{where}.{name} must be an integer")
            kwargs[name] = value
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{where}.{name} must be a string")
            kwargs[name] = value
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def loads(text: str) -> RunConfig:
    return from_dict(tomllib.loads(text))


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def save(cfg: RunConfig, path):
    Path(path).write_text(dumps(cfg))


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named pipeline stage."""
    if name not in STREAMS:
        raise KeyError(f"unknown rng stream {name!r}")
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS.index(name),)))
