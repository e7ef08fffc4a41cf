"""Tabular GCIQL on the 8x8 maze: exact ORS rewards vs the sparse control.

Both arms share the dataset, the training seed and the evaluation seed.

    python scripts/gcrl_compare.py --scale 20 --steps 10000 --seeds 4
"""

import argparse
import time

import numpy as np

from ors_lab import envs, exact, gcrl, reward
from ors_lab.gcrl import GciqlConfig, GoalSampler
from ors_lab.reward import ExactRewardSource


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=4)
    ap.add_argument("--eps", type=float, default=0.5, help="behaviour epsilon")
    ap.add_argument("--trajectories", type=int, default=100)
    ap.add_argument("--horizon", type=int, default=50)
    ap.add_argument("--scale", type=float, default=20.0, help="ORS reward = -M / scale")
    ap.add_argument("--occupancy-gamma", type=float, default=0.9)
    ap.add_argument("--steps", type=int, default=10_000)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--episodes", type=int, default=10)
    args = ap.parse_args()

    mdp = envs.parse_maze(envs.MAZE_8X8)
    res = {"ors": [], "sparse": []}
    t0 = time.perf_counter()
    for seed in range(args.seeds):
        ds = envs.generate_dataset(mdp, envs.PolicySpec("eps_greedy", args.eps),
                                   args.trajectories, args.horizon, seed=seed)
        pol = envs.empirical_policy(ds, mdp.n_states, mdp.n_actions)
        W = exact.wasserstein_to_goal(mdp, exact.solve_occupancy(mdp, pol, args.occupancy_gamma))
        arms = {"ors": ExactRewardSource(W, args.scale),
                "sparse": lambda s, a, g: reward.sparse_reward(s, g)}
        for kind, rfn in arms.items():
            cfg = GciqlConfig(lr=args.lr, target_rate=0.05, steps=args.steps, gamma=0.99,
                              critic_sampler=GoalSampler(0.2, 0.5, 0.3, gamma=0.99))
            agent, _ = gcrl.train_tabular_gciql(mdp, ds, rfn, cfg, np.random.default_rng(100 + seed))
            ev = gcrl.evaluate_policy(mdp, agent.act, range(mdp.n_states), args.episodes, 40,
                                      np.random.default_rng(7))
            res[kind].append(ev.success_rate)
        print(f"seed {seed}: ors {res['ors'][-1]:.3f} sparse {res['sparse'][-1]:.3f}", flush=True)
    print(f"mean: ors {np.mean(res['ors']):.3f} sparse {np.mean(res['sparse']):.3f} "
          f"({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
