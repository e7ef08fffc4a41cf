"""Train the flow occupancy model on a small enumerable MDP and compare its
snapped samples, and its MSE reward estimate, with the exact tables.

    python scripts/flow_fidelity.py --env grid --steps 6000 --batch 512 --lr 3e-3
"""

import argparse
import time

import numpy as np

from ors_lab import envs, exact, flow, reward
from ors_lab.flow import OccupancyConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--env", choices=["chain", "grid"], default="chain")
    ap.add_argument("--gamma", type=float, default=0.9)
    ap.add_argument("--steps", type=int, default=2500, help="warm-start steps")
    ap.add_argument("--flow-steps", type=int, default=200, help="bootstrapped steps")
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--flow-lr", type=float, default=1e-4)
    ap.add_argument("--euler", type=int, default=64, help="Euler steps (train and sample)")
    ap.add_argument("--samples", type=int, default=2000, help="samples per (s, a)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    mdp = envs.chain(5) if args.env == "chain" else envs.open_grid(3, 3)
    ds = envs.generate_dataset(mdp, envs.PolicySpec("uniform"), 50, 200, seed=args.seed)
    occ = exact.solve_occupancy(mdp, envs.empirical_policy(ds, mdp.n_states, mdp.n_actions),
                                args.gamma)
    cfg = OccupancyConfig(gamma=args.gamma, pretrain_steps=args.steps,
                          flow_loss_steps=args.flow_steps, batch_size=args.batch, lr=args.lr,
                          lr_final=1e-5, flow_lr=args.flow_lr, flow_steps_train=args.euler,
                          flow_steps_sample=args.euler)
    rng = np.random.default_rng(args.seed)
    emb = mdp.coords - mdp.coords.mean(axis=0)
    t0 = time.perf_counter()
    net, hist = flow.train_occupancy(ds, cfg, rng, embed=lambda s: emb[s], n_actions=mdp.n_actions,
                                     log_every=500)
    print(f"trained in {time.perf_counter() - t0:.0f}s")
    tv = exact.total_variation(flow.snapped_occupancy(net, emb, mdp.n_actions, args.samples, rng,
                                                      args.euler), occ.D)
    print(f"snapped TV: max {tv.max():.3f} mean {tv.mean():.3f} "
          f"worst row (s, a) = {divmod(int(tv.argmax()), mdp.n_actions)}")
    rep = reward.validate_prop2(net, mdp, exact.wasserstein_to_goal(mdp, occ), n_draws=256,
                                rng=rng, embed=emb)
    print(f"MSE vs W2^2: C_hat {rep.C_hat:.3f} spearman {rep.spearman_rho:.3f} "
          f"violations {len(rep.violations)}")


if __name__ == "__main__":
    main()
