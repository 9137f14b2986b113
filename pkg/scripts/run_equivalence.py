#!/usr/bin/env python3
"""Four-way equivalence verdicts over the bundled corpus.

For each system: Riccati solvability, feedback stabilizability, weak
observability on a (T, delta) grid, and null controllability with cost
certified by control synthesis.  The four verdicts must agree.
"""

import argparse

from sctk.corpus import CORPUS
from sctk.stabilizer import equivalence_harness


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--systems", nargs="+", default=sorted(CORPUS))
    ap.add_argument("--T-grid", type=float, nargs="+", default=[0.5, 1.0])
    ap.add_argument("--delta-grid", type=float, nargs="+", default=[0.3, 0.6, 0.9])
    ap.add_argument("--K", type=int, default=4)
    args = ap.parse_args()

    for name in args.systems:
        rep = equivalence_harness(
            CORPUS[name](), args.T_grid, args.delta_grid, horizon_K=args.K
        )
        verdict = "AGREE" if rep.agreement else "DISAGREE"
        print(
            f"{name}: riccati={rep.riccati_solvable} feedback="
            f"{rep.feedback_stabilizable} observable={rep.weakly_observable} "
            f"null-controllable={rep.null_controllable_with_cost}  -> {verdict}"
            + (f"  (grid point {rep.grid_point})" if rep.grid_point else "")
        )


if __name__ == "__main__":
    main()
