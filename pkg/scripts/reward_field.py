"""Rank agreement between the exact shaped reward and shortest-path distance,
for every goal of a maze.

    python scripts/reward_field.py --env maze8x8 --csv field.csv --goal 0
"""

import argparse

import numpy as np

from ors_lab import analysis, envs, exact
from ors_lab.reward import ExactRewardSource


def field(mdp, g, gamma):
    goal_mdp = mdp.with_absorbing_goal(g)
    pol = envs.layer_monotone_policy(goal_mdp, envs.compute_layers(goal_mdp, g))
    src = ExactRewardSource(exact.solve_wasserstein_recursion(goal_mdp, pol, gamma, [g]))
    return analysis.reward_field_dump(src, mdp, g)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--env", choices=["chain", "maze8x8"], default="maze8x8")
    ap.add_argument("--gamma", type=float, default=0.9)
    ap.add_argument("--goal", type=int, help="goal whose field is written to --csv")
    ap.add_argument("--csv")
    args = ap.parse_args()

    mdp = envs.chain(15) if args.env == "chain" else envs.parse_maze(envs.MAZE_8X8)
    rho = np.array([field(mdp, g, args.gamma).spearman for g in range(mdp.n_states)])
    print(f"spearman over {len(rho)} goals: min {rho.min():.4f} mean {rho.mean():.4f} "
          f"(worst goal {int(rho.argmin())})")
    if args.csv:
        g = int(rho.argmin()) if args.goal is None else args.goal
        analysis.write_field_csv(field(mdp, g, args.gamma), args.csv)


if __name__ == "__main__":
    main()
