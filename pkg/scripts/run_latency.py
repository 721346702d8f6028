"""Per-second processing time at the bottleneck against the feasible p*, for each strategy.

Output is plot-ready long-format CSV: t_s, strategy, p_ms, p_star_ms, shedding, in_band.
A rate step can be added with --step-at-ms / --step-scale.
"""
import argparse
import csv
import sys

from cepshed.harness import run_experiment, summarize
from cepshed.model import running_example
from cepshed.workload import preset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workload", default="balanced")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--duration-ms", type=float, default=60_000.0)
    ap.add_argument("--step-at-ms", type=float, default=None)
    ap.add_argument("--step-scale", type=float, default=0.5)
    ap.add_argument("--out", default="-")
    args = ap.parse_args()

    schedule = [] if args.step_at_ms is None else [{"start_ms": args.step_at_ms, "scale": args.step_scale}]
    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t_s", "strategy", "p_ms", "p_star_ms", "shedding", "in_band"])
    for strategy in ("none", "local", "global"):
        wl = preset(args.workload, seed=args.seed, schedule=schedule)
        rep = run_experiment(running_example(), wl, strategy, duration_ms=args.duration_ms)
        for win in rep.windows:
            w.writerow([win["t_ms"] / 1000.0, strategy, f"{win['p_ms']:.4f}", f"{win['p_star_ms']:.4f}",
                        int(win["shedding"]), int(win["in_band"])])
        print("#", summarize(rep), file=sys.stderr)
    if fh is not sys.stdout:
        fh.close()


if __name__ == "__main__":
    main()
