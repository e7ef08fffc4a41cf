"""Command-line entry point: ``ors-lab {gen-data,train,verify,analyze,eval}``.

Exit codes: 0 clean, 2 usage / missing prerequisite, 3 verification
violation, 4 preconditions unmet.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import nn
from .analysis import (ExpertTrajectory, reward_field_dump, sweep_checks, sweep_sigma,
                       write_csv, write_field_csv)
from .envs import (MAZE_8X8, PointMaze2d, PolicySpec, chain, check_assumptions, compute_layers,
                   empirical_policy, generate_dataset, generate_point_dataset,
                   layer_monotone_policy, load_jsonl, load_maze, open_grid, parse_maze,
                   save_jsonl, shortest_path_trajectory, u_maze)
from .exact import (assumption_family, solve_occupancy, solve_wasserstein_recursion,
                    verify_prop1, verify_theorem1, wasserstein_to_goal)
from .flow import OccupancyConfig, net_from_checkpoint, net_to_checkpoint, train_occupancy
from .gcrl import (GciqlConfig, GoalSampler, TabularGciql, evaluate_policy, train_tabular_gciql)
from .reward import (ExactRewardSource, NetRewardSource, RewardConfig, RewardNet,
                     make_reward_net, sparse_reward, train_reward, validate_prop2)

EXIT_OK, EXIT_USAGE, EXIT_VIOLATION, EXIT_PRECONDITION = 0, 2, 3, 4


class PrerequisiteError(RuntimeError):
    pass


def _apply_thread_cap():
    n = os.environ.get("ORS_LAB_THREADS")
    if n:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


# -- environment and data helpers ------------------------------------------

def build_env(cfg: cfgmod.RunConfig):
    e = cfg.env
    if e.name == "chain":
        return chain(e.size, e.gamma)
    if e.name == "grid":
        return open_grid(e.height, e.width, e.gamma)
    if e.name == "maze8x8":
        return parse_maze(MAZE_8X8, e.gamma)
    if e.name == "u_maze":
        return u_maze(e.gamma)
    if e.name == "file":
        return load_maze(e.maze_file, e.gamma)
    if e.name == "point":
        return PointMaze2d(gamma=e.gamma)
    raise ValueError(f"unknown env name {e.name!r}")


def _goal(cfg, mdp):
    return cfg.env.goal if cfg.env.goal >= 0 else (mdp.goal if mdp.goal is not None else None)


def _out(cfg) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def update_manifest(out: Path, cfg, artifacts: list[Path]):
    """Record artifacts and their hashes in ``manifest.json`` (merged)."""
    mpath = out / "manifest.json"
    doc = json.loads(mpath.read_text()) if mpath.exists() else {"artifacts": {}}
    doc["config_hash"] = cfgmod.config_hash(cfg)
    doc["seed"] = cfg.seed
    for p in artifacts:
        doc["artifacts"][p.name] = {"sha256": _sha256(p), "bytes": p.stat().st_size}
    mpath.write_text(json.dumps(doc, indent=2, sort_keys=True))


def _load_dataset(cfg, out, mdp):
    path = out / "dataset.jsonl"
    if not path.exists():
        raise PrerequisiteError("dataset missing: run `gen-data` first")
    return load_jsonl(path, None if isinstance(mdp, PointMaze2d) else mdp)


def _embed(mdp):
    if isinstance(mdp, PointMaze2d):
        return None
    coords = mdp.coords.astype(np.float64)
    return lambda s: coords[np.asarray(s, dtype=np.int64)]


def _check_hash(extra, cfg, what):
    h = extra.get("config_hash")
    if h is not None and h != cfgmod.config_hash(cfg):
        warnings.warn(f"{what} checkpoint was written under a different config ({h})")


# -- gen-data ---------------------------------------------------------------

def cmd_gen_data(cfg: cfgmod.RunConfig) -> int:
    out = _out(cfg)
    mdp = build_env(cfg)
    d = cfg.dataset
    seed = int(cfgmod.stream(cfg.seed, "dataset").integers(2**31)) + d.seed
    if isinstance(mdp, PointMaze2d):
        ds = generate_point_dataset(mdp, d.n_trajectories, d.horizon, seed, d.epsilon)
        save_jsonl(ds, out / "dataset.jsonl")
        report = {"note": "assumption checks apply to enumerable instances only"}
    else:
        goal = _goal(cfg, mdp)
        ds = generate_dataset(mdp, PolicySpec(d.policy, d.epsilon, goal), d.n_trajectories,
                              d.horizon, seed)
        save_jsonl(ds, out / "dataset.jsonl", mdp)
        goals = [goal] if goal is not None else list(range(mdp.n_states))
        reps = [check_assumptions(mdp, ds, g).to_dict() for g in goals]
        report = {"goals": reps, "all_hold": all(r["all_hold"] for r in reps)}
    (out / "assumptions.json").write_text(json.dumps(report, indent=2))
    update_manifest(out, cfg, [out / "dataset.jsonl", out / "assumptions.json"])
    print(f"wrote {len(ds)} tuples ({ds.n_trajectories} trajectories) to {out / 'dataset.jsonl'}")
    return EXIT_OK


# -- train ------------------------------------------------------------------

def _occ_config(cfg) -> OccupancyConfig:
    o = cfg.occupancy
    return OccupancyConfig(gamma=o.gamma, pretrain_steps=o.pretrain_steps,
                           flow_loss_steps=o.flow_loss_steps, flow_steps_train=o.flow_steps_train,
                           flow_steps_sample=o.flow_steps_sample, batch_size=o.batch_size,
                           lr=o.lr, lr_final=o.lr_final, flow_lr=o.flow_lr,
                           target_rate=o.target_rate, hidden=tuple(o.hidden),
                           future_target_mode=o.future_target_mode)


def _reward_config(cfg) -> RewardConfig:
    r = cfg.reward
    return RewardConfig(steps=r.steps, batch_size=r.batch_size, mc_draws=r.mc_draws, lr=r.lr,
                        hidden=tuple(r.hidden), scale=r.scale,
                        sampler=GoalSampler(r.p_cur, r.p_traj, r.p_rand, gamma=cfg.occupancy.gamma))


def _gcrl_config(cfg) -> GciqlConfig:
    c = cfg.gcrl
    return GciqlConfig(kappa=c.kappa, alpha=c.alpha, gamma=c.gamma, batch_size=c.batch_size,
                       steps=c.steps, lr=c.lr, target_rate=c.target_rate,
                       critic_sampler=GoalSampler(*c.critic_ratios, gamma=c.gamma),
                       actor_sampler=GoalSampler(*c.actor_ratios, gamma=c.gamma),
                       eval_every=c.eval_every)


def _write_losses(path: Path, columns: dict):
    n = max((len(v) for v in columns.values()), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *columns])
        for i in range(n):
            w.writerow([i + 1, *(repr(v[i]) if i < len(v) else "" for v in columns.values())])


def train_occupancy_stage(cfg, out, mdp, ds) -> list[Path]:
    rng = cfgmod.stream(cfg.seed, "occupancy")
    n_actions = None if isinstance(mdp, PointMaze2d) else mdp.n_actions
    net, hist = train_occupancy(ds, _occ_config(cfg), rng, embed=_embed(mdp), n_actions=n_actions)
    nets, adam, extra = net_to_checkpoint(net)
    extra["config_hash"] = cfgmod.config_hash(cfg)
    nn.save_checkpoint(out / "occupancy.json", nets, adam, extra)
    _write_losses(out / "occupancy_loss.csv", {"pretrain": hist["pretrain"], "flow": hist["flow"]})
    return [out / "occupancy.json", out / "occupancy_loss.csv"]


def load_occupancy(cfg, out):
    path = out / "occupancy.json"
    if not path.exists():
        raise PrerequisiteError("occupancy checkpoint missing: run `train --stage occupancy` first")
    nets, adam, extra = nn.load_checkpoint(path)
    _check_hash(extra, cfg, "occupancy")
    return net_from_checkpoint(nets, adam, extra)


def train_reward_stage(cfg, out, mdp, ds) -> list[Path]:
    occ = load_occupancy(cfg, out)
    rcfg = _reward_config(cfg)
    rnet, losses = train_reward(occ, ds, rcfg.sampler, rcfg, cfgmod.stream(cfg.seed, "reward"),
                                embed=_embed(mdp))
    nn.save_checkpoint(out / "reward.json", {"reward": rnet.mlp}, {"reward": rnet.opt},
                       {"kind": "reward", "state_dim": rnet.state_dim,
                        "action_dim": rnet.action_dim, "n_actions": rnet.n_actions,
                        "scale": rnet.scale, "config_hash": cfgmod.config_hash(cfg)})
    _write_losses(out / "reward_loss.csv", {"loss": losses})
    return [out / "reward.json", out / "reward_loss.csv"]


def load_reward(cfg, out) -> RewardNet:
    path = out / "reward.json"
    if not path.exists():
        raise PrerequisiteError("reward checkpoint missing: run `train --stage reward` first")
    nets, adam, extra = nn.load_checkpoint(path)
    _check_hash(extra, cfg, "reward")
    return RewardNet(nets["reward"], adam["reward"], extra["state_dim"], extra["action_dim"],
                     extra["n_actions"], extra["scale"])


def reward_function(cfg, out, mdp, ds, kind: str):
    if kind == "sparse":
        return lambda s, a, g: sparse_reward(s, g)
    if kind == "exact":
        pol = empirical_policy(ds, mdp.n_states, mdp.n_actions)
        occ = solve_occupancy(mdp, pol, cfg.occupancy.gamma)
        return ExactRewardSource(wasserstein_to_goal(mdp, occ), cfg.reward.scale)
    if kind == "learned":
        return NetRewardSource(load_reward(cfg, out), cfg.reward.scale, _embed(mdp))
    raise ValueError(f"unknown reward kind {kind!r}")


def _eval_goals(cfg, mdp):
    g = _goal(cfg, mdp)
    return [g] if g is not None else list(range(mdp.n_states))


def _evaluate_tabular(cfg, mdp, agent, rng):
    c = cfg.gcrl
    return evaluate_policy(mdp, agent.act, _eval_goals(cfg, mdp), c.eval_episodes, c.eval_horizon, rng)


def _tabular_agent_arrays(agent: TabularGciql) -> dict:
    return {**agent.params, "support": agent.support.astype(np.float64)}


def train_policy_stage(cfg, out, mdp, ds) -> list[Path]:
    if isinstance(mdp, PointMaze2d):
        raise PrerequisiteError("policy training from the CLI supports enumerable mazes; "
                                "see scripts/ for the continuous point-maze run")
    if cfg.gcrl.reward == "learned" and not (out / "reward.json").exists():
        raise PrerequisiteError("reward checkpoint missing: run `train --stage reward` first")
    gcfg = _gcrl_config(cfg)
    artifacts = []
    runs = [("policy", cfg.gcrl.reward)]
    if cfg.gcrl.reward != "sparse":
        runs.append(("control", "sparse"))
    for tag, kind in runs:
        rfn = reward_function(cfg, out, mdp, ds, kind)
        rng = cfgmod.stream(cfg.seed, "policy")
        eval_rng = cfgmod.stream(cfg.seed, "eval")
        agent, rows = train_tabular_gciql(mdp, ds, rfn, gcfg, rng,
                                          eval_fn=lambda ag: _evaluate_tabular(cfg, mdp, ag, eval_rng))
        final = _evaluate_tabular(cfg, mdp, agent, cfgmod.stream(cfg.seed, "eval"))
        if not rows or rows[-1]["step"] != gcfg.steps:
            rows.append({"step": gcfg.steps, "loss_v": float("nan"), "loss_q": float("nan"),
                         "loss_pi": 0.0, "eval_success": final.success_rate,
                         "eval_return": final.mean_return})
        write_csv([{k: repr(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows],
                  out / f"{tag}_metrics.csv",
                  ["step", "loss_v", "loss_q", "loss_pi", "eval_success", "eval_return"])
        nn.save_checkpoint(out / f"{tag}.json", {}, None,
                           {"kind": "tabular_gciql", "reward": kind,
                            "arrays": nn.pack_arrays(_tabular_agent_arrays(agent)),
                            "kappa": agent.kappa, "gamma": agent.gamma,
                            "final_eval": final.to_dict(), "config_hash": cfgmod.config_hash(cfg)})
        artifacts += [out / f"{tag}_metrics.csv", out / f"{tag}.json"]
        print(f"{tag} ({kind} reward): eval success {final.success_rate:.3f}")
    return artifacts


STAGES = ("occupancy", "reward", "policy")


def cmd_train(cfg: cfgmod.RunConfig, stage: str) -> int:
    out = _out(cfg)
    mdp = build_env(cfg)
    ds = _load_dataset(cfg, out, mdp)
    todo = STAGES if stage == "all" else (stage,)
    fns = {"occupancy": train_occupancy_stage, "reward": train_reward_stage,
           "policy": train_policy_stage}
    for st in todo:
        arts = fns[st](cfg, out, mdp, ds)
        update_manifest(out, cfg, arts)
    return EXIT_OK


# -- verify -----------------------------------------------------------------

def _instances(cfg):
    """(mdp, goals) pairs: a generated family, or the configured maze."""
    if cfg.env.name == "family":
        v = cfg.verify
        return [(i.mdp, i.goals) for i in assumption_family(v.family_size, v.goals_per_maze, cfg.seed)]
    mdp = build_env(cfg)
    if isinstance(mdp, PointMaze2d):
        raise ValueError("exact verification needs an enumerable maze")
    return [(mdp, _eval_goals(cfg, mdp))]


def cmd_verify(cfg: cfgmod.RunConfig, which: str, untrained: bool = False) -> int:
    out = _out(cfg)
    checks = ("prop1", "theorem1", "prop2") if which == "all" else (which,)
    violations, satisfied, unmet = 0, 0, 0
    artifacts = []
    for check in checks:
        if check == "prop2":
            v, doc = _verify_prop2(cfg, out, untrained)
            violations += v
            satisfied += 1
        else:
            fn = verify_prop1 if check == "prop1" else verify_theorem1
            reports = []
            for mdp, goals in _instances(cfg):
                for g in goals:
                    for gm in cfg.verify.gammas:
                        rep = fn(mdp, None, g, gm)
                        reports.append(rep.to_dict())
                        if not rep.preconditions_met:
                            unmet += 1
                        else:
                            satisfied += 1
                            violations += not rep.ok
            doc = {"check": check, "instances": len(reports),
                   "violating": sum(1 for r in reports if r["preconditions_met"] and r["violations"]),
                   "preconditions_unmet": sum(1 for r in reports if not r["preconditions_met"]),
                   "reports": reports}
        path = out / f"verify_{check}.json"
        path.write_text(json.dumps(doc, indent=2))
        artifacts.append(path)
        print(f"{check}: {doc.get('violating', 0)} violating, "
              f"{doc.get('preconditions_unmet', 0)} preconditions unmet")
    update_manifest(out, cfg, artifacts)
    if violations:
        return EXIT_VIOLATION
    if unmet and not satisfied:
        print("preconditions unmet: no instance satisfies the assumptions")
        return EXIT_PRECONDITION
    return EXIT_OK


def _verify_prop2(cfg, out, untrained: bool):
    mdp = build_env(cfg)
    if isinstance(mdp, PointMaze2d):
        raise ValueError("prop2 verification needs an enumerable maze")
    if untrained:
        from .flow import make_velocity_field
        net = make_velocity_field(mdp.state_dim, cfgmod.stream(cfg.seed, "occupancy"),
                                  n_actions=mdp.n_actions, config=_occ_config(cfg))
        ds = None
    else:
        net = load_occupancy(cfg, out)
        ds = _load_dataset(cfg, out, mdp)
    pol = empirical_policy(ds, mdp.n_states, mdp.n_actions) if ds is not None else \
        np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    table = wasserstein_to_goal(mdp, solve_occupancy(mdp, pol, cfg.occupancy.gamma))
    rep = validate_prop2(net, mdp, table, n_draws=cfg.verify.prop2_draws,
                         rng=cfgmod.stream(cfg.seed, "eval"),
                         warning="untrained network: diagnostic only" if untrained else None)
    doc = {"check": "prop2", **rep.to_dict(), "violating": 0 if (untrained or rep.passed) else 1}
    return (0 if untrained else int(not rep.passed)), doc


# -- analyze ----------------------------------------------------------------

def corridor_setup(length: int, starts, gamma: float):
    """Corridor with an absorbing goal at its right end, exact ORS rewards
    under the shortest-path behaviour, and one expert trajectory per start
    distance."""
    mdp = chain(length, gamma)
    g = length - 1
    goal_mdp = mdp.with_absorbing_goal(g)
    pol = layer_monotone_policy(goal_mdp, compute_layers(goal_mdp, g))
    src = ExactRewardSource(solve_wasserstein_recursion(goal_mdp, pol, gamma, [g]))
    trajs, ors = [], []
    for d in starts:
        if not 0 < d < length:
            raise ValueError(f"start distance {d} outside the corridor")
        st, ac = shortest_path_trajectory(mdp, g - d, g)
        trajs.append(ExpertTrajectory(st, ac, g))
        ors.append(src(st[:-1], ac, np.full(len(ac), g)))
    return mdp, g, src, trajs, ors


def cmd_analyze(cfg: cfgmod.RunConfig) -> int:
    out = _out(cfg)
    a = cfg.analysis
    _, _, _, trajs, ors = corridor_setup(a.corridor_length, a.starts, a.gamma)
    rows = sweep_sigma(trajs, {"sparse": None, "ors": ors, "raw_rw": ors}, a.sigmas, a.seeds,
                       a.gamma, cfgmod.stream(cfg.seed, "analysis"))
    write_csv(rows, out / "sweep.csv", ["mode", "sigma", "mean_delta_v", "se"])
    checks = sweep_checks(rows) if rows else {}
    print(f"sweep orderings: {checks}")
    artifacts = [out / "sweep.csv"]
    mdp = build_env(cfg)
    if not isinstance(mdp, PointMaze2d):
        g = _goal(cfg, mdp)
        g = mdp.n_states - 1 if g is None else g
        goal_mdp = mdp.with_absorbing_goal(g)
        pol = layer_monotone_policy(goal_mdp, compute_layers(goal_mdp, g))
        src = ExactRewardSource(solve_wasserstein_recursion(goal_mdp, pol, mdp.gamma, [g]))
        dump = reward_field_dump(src, mdp, g)
        write_field_csv(dump, out / "field.csv")
        (out / "field_summary.json").write_text(json.dumps({"goal": g, "spearman": dump.spearman,
                                                            "sweep_checks": checks}, indent=2))
        print(f"reward field spearman vs shortest-path distance: {dump.spearman:.4f}")
        artifacts += [out / "field.csv", out / "field_summary.json"]
    update_manifest(out, cfg, artifacts)
    return EXIT_OK


# -- eval -------------------------------------------------------------------

def cmd_eval(cfg: cfgmod.RunConfig) -> int:
    out = _out(cfg)
    mdp = build_env(cfg)
    path = out / "policy.json"
    if not path.exists():
        raise PrerequisiteError("policy checkpoint missing: run `train --stage policy` first")
    _, _, extra = nn.load_checkpoint(path)
    _check_hash(extra, cfg, "policy")
    arr = nn.unpack_arrays(extra["arrays"])
    agent = TabularGciql({k: arr[k] for k in ("Q1", "Q2", "V")}, nn.TargetCopy({}, 1.0),
                         nn.AdamState(), extra["kappa"], extra["gamma"], arr["support"] > 0)
    res = _evaluate_tabular(cfg, mdp, agent, cfgmod.stream(cfg.seed, "eval"))
    (out / "eval.json").write_text(json.dumps(res.to_dict(), indent=2))
    update_manifest(out, cfg, [out / "eval.json"])
    print(f"success rate {res.success_rate:.3f}, mean return {res.mean_return:.2f}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ors-lab", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run config")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--out", type=str, help="output directory (overrides config)")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate an offline dataset")
    t = sub.add_parser("train", parents=[common], help="train occupancy / reward / policy")
    t.add_argument("--stage", choices=[*STAGES, "all"], default="all")
    v = sub.add_parser("verify", parents=[common], help="run the exact-theory checks")
    v.add_argument("--which", choices=["prop1", "prop2", "theorem1", "all"], default="all")
    v.add_argument("--untrained", action="store_true",
                   help="prop2 on a freshly initialised net (diagnostic only)")
    sub.add_parser("analyze", parents=[common], help="noise sweep and reward-field dump")
    sub.add_parser("eval", parents=[common], help="evaluate the trained policy")
    return p


def resolve_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.stage)
        if args.command == "verify":
            return cmd_verify(cfg, args.which, args.untrained)
        if args.command == "analyze":
            return cmd_analyze(cfg)
        return cmd_eval(cfg)
    except (PrerequisiteError, cfgmod.ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
