"""Solver wall time over types x queries x share; prints CSV (types, queries, share, ms, status)."""
import argparse
import sys

from cepshed.harness import bench_csv, scalability_bench


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--types", type=int, nargs="+", default=[10, 50, 100, 500, 1000])
    ap.add_argument("--queries", type=int, nargs="+", default=[2, 10, 50])
    ap.add_argument("--share", type=float, nargs="+", default=[0.1, 0.3, 0.5, 0.7, 1.0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--method", default="highs", choices=["highs", "simplex", "auto"])
    args = ap.parse_args()
    rows = []
    for t in args.types:
        for q in args.queries:
            for s in args.share:
                rows.append(scalability_bench(t, q, s, repeats=args.repeats, method=args.method))
                print(f"# {t} x {q} x {s}: {rows[-1]['ms']:.1f} ms", file=sys.stderr)
    sys.stdout.write(bench_csv(rows))


if __name__ == "__main__":
    main()
