"""Value non-monotonicity under noise: sparse vs exact ORS on a corridor.

    python scripts/sigma_sweep.py --length 801 --seeds 100 --out sweep.csv
"""

import argparse

import numpy as np

from ors_lab import analysis
from ors_lab.cli import corridor_setup


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--length", type=int, default=801)
    ap.add_argument("--starts", type=int, nargs="+", default=[300, 400, 500, 600, 700])
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 1e-4, 5e-4, 1e-3, 5e-3])
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--gamma", type=float, default=0.99)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="CSV path")
    args = ap.parse_args()

    _, _, _, trajs, ors = corridor_setup(args.length, args.starts, args.gamma)
    rows = analysis.sweep_sigma(trajs, {"sparse": None, "ors": ors, "raw_rw": ors}, args.sigmas,
                                args.seeds, args.gamma, np.random.default_rng(args.seed))
    for r in rows:
        print(f"{r['mode']:7s} sigma={r['sigma']:<7g} delta_V={r['mean_delta_v']:.4f} "
              f"+- {r['se']:.4f}")
    print(analysis.sweep_checks(rows))
    if args.out:
        analysis.write_csv(rows, args.out)


if __name__ == "__main__":
    main()
