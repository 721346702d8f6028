"""Generate the bundled synthetic trace: two CSV files with (timestamp, machine_id, value).

Timestamps are milliseconds with Poisson spacing; machine ids follow a skewed
popularity so the four derived types carry unequal load.
"""
import argparse
import csv
import random
from pathlib import Path

MACHINES = [f"m-{1000 + 37 * i}" for i in range(10)]
WEIGHTS = [8, 6, 5, 4, 4, 3, 3, 2, 2, 1]


def write_file(path: Path, rows: int, rate: float, rng: random.Random) -> None:
    t = 0.0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "machine_id", "value"])
        for _ in range(rows):
            t += rng.expovariate(rate / 1000.0)
            mid = rng.choices(MACHINES, WEIGHTS)[0]
            w.writerow([f"{t:.3f}", mid, f"{rng.gauss(0.5, 0.15):.4f}"])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "src" / "cepshed" / "data"))
    ap.add_argument("--rows", type=int, default=50_000, help="total rows over both files")
    ap.add_argument("--rate", type=float, default=400.0, help="events/s per file")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    out = Path(args.out)
    for name in ("trace_a.csv", "trace_b.csv"):
        write_file(out / name, args.rows // 2, args.rate, rng)
        print("wrote", out / name)


if __name__ == "__main__":
    main()
