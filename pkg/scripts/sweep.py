"""Success rate of the full pipeline per overlap bucket on generated pairs.

    python scripts/sweep.py --overlaps 0.15 0.3 0.7 --pairs 50
    python scripts/sweep.py --twin --pairs 10
"""

import argparse
import json

from gauss_align.benchmark import run_pairs, success_rate
from gauss_align.pipeline import RunConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--overlaps", type=float, nargs="+", default=[0.15, 0.3, 0.7])
    ap.add_argument("--pairs", type=int, default=50)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--points", type=int, default=5000)
    ap.add_argument("--twin", action="store_true", help="compare color on/off on the twin-room fixture")
    ap.add_argument("--json", action="store_true", help="print per-pair outcomes as JSON lines")
    args = ap.parse_args()
    seeds = range(args.first_seed, args.first_seed + args.pairs)
    runs = [(f"twin color={c}", 0.7, RunConfig(use_color=c), True) for c in (True, False)] if args.twin else \
        [(f"overlap {ov}", ov, RunConfig(), False) for ov in args.overlaps]
    for label, ov, cfg, twin in runs:
        out = run_pairs(ov, seeds, cfg, twin=twin, n_points=args.points)
        secs = sum(o.seconds for o in out) / len(out)
        print(f"{label:<22} success {success_rate(out):.2f}  ({secs:.2f} s/pair)")
        for o in out:
            if args.json:
                print(json.dumps({"bucket": label, "seed": o.seed, "rre_deg": o.rre_deg, "rte_m": o.rte_m,
                                  "success": o.success}))
            elif not o.success:
                print(f"    seed {o.seed}: RRE {o.rre_deg:.2f} deg, RTE {o.rte_m:.3f} m")


if __name__ == "__main__":
    main()
