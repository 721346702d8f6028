"""Command line entry point: ``cepshed <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .engine import Simulator
from .harness import ExperimentSettings, bench_csv, run_experiment, scalability_bench, summarize
from .model import load_topology, running_example, validate
from .shedding import ShedderConfig
from .workload import WorkloadSpec, load_workload, preset

PRESETS = ("balanced", "unbalanced", "trace")


def _topology(args):
    return load_topology(args.topology) if args.topology else running_example()


def _workload(args) -> WorkloadSpec:
    w = args.workload or "balanced"
    if w in PRESETS:
        wl = preset(w, seed=args.seed)
    else:
        wl = load_workload(w)
    if args.duration_ms is not None:
        wl.duration_ms = float(args.duration_ms)
    return wl


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_mapping(out: Path, wl: WorkloadSpec) -> None:
    if wl.mode == "trace":
        (out / "mapping.json").write_text(wl.trace().mapping_json())


def cmd_validate(args) -> int:
    topo = _topology(args)
    problems = validate(topo)
    for v in problems:
        print(f"{v.code}: {v.message}")
    if not problems:
        print(f"ok: {len(topo.operators)} operators, {len(topo.all_patterns())} patterns, "
              f"order {' -> '.join(topo.operator_order())}")
    return 1 if problems else 0


def cmd_simulate(args) -> int:
    topo = _topology(args)
    wl = _workload(args)
    configs = {}
    if args.shedder:
        doc = json.loads(Path(args.shedder).read_text())
        configs = {op: ShedderConfig.from_json(json.dumps(rows)) for op, rows in doc.items()}
    sim = Simulator(topo, wl, configs, seed=args.seed, service=args.service,
                    channel_delay_ms=args.channel_delay_ms)
    report = sim.run(wl.duration_ms)
    out = _out(args)
    (out / "report.json").write_text(report.to_json())
    (out / "timeseries.csv").write_text(report.timeseries_csv(sorted(topo.types)))
    _write_mapping(out, wl)
    print(json.dumps(report.sink_counts, sort_keys=True))
    return 0


def cmd_experiment(args) -> int:
    topo = _topology(args)
    wl = _workload(args)
    settings = ExperimentSettings(ptime_band=args.ptime_band, update_threshold=args.update_threshold,
                                  monitor_window=args.monitor_window, service=args.service,
                                  bottleneck=args.bottleneck, controller_delay_ms=args.controller_delay_ms)
    report = run_experiment(topo, wl, args.strategy, settings=settings, seed=args.seed)
    out = _out(args)
    (out / "report.json").write_text(report.to_json())
    (out / "timeseries.csv").write_text(report.simulation.timeseries_csv(sorted(topo.types)))
    (out / "decisions.jsonl").write_text(report.decision_log)
    if args.lp_debug and report.lp_debug:
        (out / "lp_debug.lp").write_text(report.lp_debug)
    _write_mapping(out, wl)
    print(summarize(report))
    return 0


def cmd_bench_lp(args) -> int:
    rows = []
    for t in args.types:
        for q in args.queries:
            for s in args.share:
                rows.append(scalability_bench(t, q, s, repeats=args.repeats, seed=args.seed, method=args.method))
    text = bench_csv(rows)
    if args.out:
        out = _out(args)
        (out / "bench_lp.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_oracle_grid(args) -> int:
    from .optimizer import optimize
    from .oracle import evaluate_config, grid_search, random_instance

    print("instance,pairs,lp,grid,lp_at_oracle,ok")
    bad = 0
    for i in range(args.instances):
        inst = random_instance(args.seed + i)
        plan = optimize(inst.topology, inst.snapshot, inst.bottleneck, inst.p_star, args.objective, "simplex")
        g, _ = grid_search(inst, args.step, args.objective)
        at, feas = evaluate_config(inst, plan.config, args.objective)
        ok = feas and plan.predicted_output >= g - 1e-9 * max(1.0, abs(g)) and abs(at - plan.predicted_output) <= 1e-6
        bad += not ok
        print(f"{args.seed + i},{len(inst.pairs())},{plan.predicted_output:.9f},{g:.9f},{at:.9f},{ok}")
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cepshed", description="CEP operator-graph simulator with LP load shedding")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, workload=True):
        p.add_argument("--topology", help="topology TOML (default: bundled running example)")
        if workload:
            p.add_argument("--workload", help=f"workload TOML/JSON or preset ({', '.join(PRESETS)})")
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--duration-ms", type=float, default=None)
            p.add_argument("--out", default="out")
            p.add_argument("--service", choices=["deterministic", "exponential"], default="deterministic")

    p = sub.add_parser("validate", help="check a topology")
    common(p, workload=False)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="run the graph with fixed shedder configs")
    common(p)
    p.add_argument("--shedder", help='JSON {"op": [{"pattern", "type", "r"}, ...]}')
    p.add_argument("--channel-delay-ms", type=float, default=0.0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="monitor, re-plan and compare against an unshedded oracle")
    common(p)
    p.add_argument("--strategy", choices=["none", "local", "global"], default="global")
    p.add_argument("--ptime-band", type=float, default=0.10)
    p.add_argument("--update-threshold", type=float, default=0.05)
    p.add_argument("--monitor-window", type=int, default=1000)
    p.add_argument("--bottleneck", default=None)
    p.add_argument("--controller-delay-ms", type=float, default=0.0)
    p.add_argument("--lp-debug", action="store_true", help="also write the last LP as lp_debug.lp")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("bench-lp", help="solver wall time on synthetic bottleneck LPs")
    p.add_argument("--types", type=int, nargs="+", default=[10, 100])
    p.add_argument("--queries", type=int, nargs="+", default=[2, 10])
    p.add_argument("--share", type=float, nargs="+", default=[0.1, 0.5, 1.0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=["auto", "simplex", "highs"], default="highs")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench_lp)

    p = sub.add_parser("oracle-grid", help="compare LP optima with a grid search on random instances")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=0.02)
    p.add_argument("--objective", choices=["global", "local"], default="global")
    p.set_defaults(func=cmd_oracle_grid)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
