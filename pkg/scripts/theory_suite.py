"""Exact-theory checks over a random family of assumption-satisfying mazes.

    python scripts/theory_suite.py --mazes 20 --goals 3 --gammas 0.9 0.99
"""

import argparse
import json
import time

from ors_lab import exact


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mazes", type=int, default=20)
    ap.add_argument("--goals", type=int, default=3)
    ap.add_argument("--gammas", type=float, nargs="+", default=[0.9, 0.99])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="write per-run reports here")
    args = ap.parse_args()

    t0 = time.perf_counter()
    family = exact.assumption_family(args.mazes, args.goals, args.seed)
    reports = []
    for i, inst in enumerate(family):
        for g in inst.goals:
            for gamma in args.gammas:
                p1 = exact.verify_prop1(inst.mdp, None, g, gamma)
                t1 = exact.verify_theorem1(inst.mdp, None, g, gamma)
                reports.append({"maze": i, "prop1": p1.to_dict(), "theorem1": t1.to_dict()})
                print(f"maze {i:2d} ({inst.mdp.n_states:2d} states) goal {g:2d} gamma {gamma:<5} "
                      f"prop1 {'ok' if p1.ok else 'FAIL'} theorem1 {'ok' if t1.ok else 'FAIL'} "
                      f"greedy match {t1.fraction_matching:.3f} delta_phi {t1.delta_phi:.3g}")
    bad = sum(not (r["prop1"]["violations"] == [] and r["theorem1"]["violations"] == [])
              for r in reports)
    print(f"{len(reports)} runs, {bad} with violations, {time.perf_counter() - t0:.1f}s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(reports, fh, indent=2)


if __name__ == "__main__":
    main()
