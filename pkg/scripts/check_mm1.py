"""Simulated mean sojourn of a single exponential-service operator vs 1/(mu - lambda)."""
import argparse
import time

from cepshed.engine import run_simulation
from cepshed.model import Edge, EventType, OperatorSpec, PatternSpec, Sink, Source, Topology, parse_pattern
from cepshed.shedding import sojourn_time
from cepshed.workload import WorkloadSpec


def single_queue(mu):
    types = {0: EventType(0, "A"), 1: EventType(1, "B")}
    op = OperatorSpec("w", (PatternSpec("P", parse_pattern("(atom 0)"), 1000.0, 1, 1e6 / mu),), 1000.0)
    return Topology(types, [Source("s", (0,))], [op], [Sink("k")], [Edge("s", "w", (0,)), Edge("w", "k", (1,))])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--mu", type=float, default=1000.0, help="service rate, 1/s")
    ap.add_argument("--rho", type=float, nargs="+", default=[0.5, 0.7, 0.9])
    ap.add_argument("--events", type=int, default=300_000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()
    print("seed,rho,completed,sim_ms,theory_ms,rel_err,wall_s")
    for seed in args.seeds:
        for rho in args.rho:
            lam = rho * args.mu
            t0 = time.perf_counter()
            rep = run_simulation(single_queue(args.mu), WorkloadSpec(rates={"s": {0: lam}}), {},
                                 args.events / lam * 1000.0, seed=seed, service="exponential")
            d = rep.operators["w"]
            th = sojourn_time(lam, args.mu) * 1000.0
            print(f"{seed},{rho},{d['completed']},{d['mean_sojourn_ms']:.4f},{th:.4f},"
                  f"{d['mean_sojourn_ms'] / th - 1:+.4f},{time.perf_counter() - t0:.1f}")


if __name__ == "__main__":
    main()
