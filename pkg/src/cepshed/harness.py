"""Experiment orchestration: shedding runs against an unshedded oracle, latency
metrics on 1 s windows, and the solver scalability benchmark."""
from __future__ import annotations

import csv
import io
import json
import logging
import random
import statistics
import time
from dataclasses import asdict, dataclass, field

from .controller import ControllerState, Monitoring, decisions_jsonl, useful_pairs
from .engine import SimulationReport, Simulator
from .model import And, Atom, Edge, EventType, OperatorSpec, PatternSpec, Sink, Source, Topology
from .optimizer import optimize
from .selectivity import model_snapshot
from .shedding import NO_SHEDDING, ShedderConfig, Snapshot, avg_ptime, feasible_ptime
from .workload import WorkloadSpec

log = logging.getLogger(__name__)

STRATEGIES = ("none", "local", "global")


@dataclass
class ExperimentSettings:
    ptime_band: float = 0.10
    update_threshold: float = 0.05
    monitor_window: int = 1000
    rate_window_ms: float = 5000.0
    check_every: int = 50
    debounce_ms: float = 1000.0
    controller_delay_ms: float = 0.0
    service: str = "deterministic"
    method: str = "auto"
    bucket_ms: float = 1000.0
    bottleneck: str | None = None


@dataclass
class ExperimentReport:
    strategy: str
    seed: int
    duration_ms: float
    bottleneck: str
    bound_ms: float
    sink_counts: dict[str, int]
    oracle_sink_counts: dict[str, int]
    recall: float
    deviation_seconds: float
    in_band_fraction: float | None
    windows: list[dict]
    recomputes: int
    update_messages: int
    solver: dict
    decisions: list[dict]
    config_history: list[dict]
    settings: dict
    workload: dict
    operators: dict = field(default_factory=dict)
    # not serialized: raw simulation output and wall-clock solver timings
    simulation: SimulationReport | None = None
    decision_log: str = ""
    lp_debug: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("simulation", "decision_log", "lp_debug"):
            d.pop(k)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def compute_recall(shedded, oracle) -> float:
    """Sink output under shedding over oracle sink output."""
    def total(r):
        counts = r.sink_counts if hasattr(r, "sink_counts") else r
        return sum(counts.values())
    o = total(oracle)
    if o == 0:
        log.warning("oracle produced no sink output; recall taken as 1.0")
        return 1.0
    return total(shedded) / o


def pick_bottleneck(topology: Topology, workload: WorkloadSpec) -> str:
    """Operator with the highest predicted utilisation at the workload's initial rates."""
    rates = workload.rates_at(0.0)
    if rates is None:
        rates = {s.id: {t: 1.0 for t in s.types} for s in topology.sources}
    snap = model_snapshot(topology, rates)
    return max(topology.operator_order(), key=lambda o: (snap.rho(o), o))


def _reference_lambda(topology: Topology, workload: WorkloadSpec, bottleneck: str, windows: list[dict],
                      bucket_ms: float) -> list[float]:
    """Offered load at the bottleneck per window: nominal where known, else smoothed measurement."""
    out = []
    if workload.mode != "trace":
        for w in windows:
            rates = workload.rates_at(w["t_ms"] + bucket_ms / 2)
            out.append(model_snapshot(topology, rates).lam(bottleneck))
        return out
    measured = [sum(w["lambda"].values()) for w in windows]
    for i in range(len(measured)):
        part = measured[max(0, i - 2): i + 3]
        out.append(sum(part) / len(part))
    return out


def latency_windows(report: SimulationReport, topology: Topology, workload: WorkloadSpec, bottleneck: str,
                    band: float, bucket_ms: float = 1000.0) -> tuple[list[dict], float, float | None]:
    """Per-window measured vs required processing time, deviation-seconds and in-band share.

    A window deviates by ``n * |p - p*|`` where ``n`` is the number of events
    it processed. Running faster than required only counts while shedding is
    active, since it then means quality was given up for nothing.
    """
    bound_s = topology.operator(bottleneck).latency_bound_ms / 1000.0
    rows = [w for w in report.timeseries if w["operator"] == bottleneck]
    lams = _reference_lambda(topology, workload, bottleneck, rows, bucket_ms)
    pairs = useful_pairs(topology, bottleneck)
    history = sorted((h for h in report.config_history if h["operator"] == bottleneck),
                     key=lambda h: (h["t_ms"], h["version"]))
    windows = []
    total_dev = 0.0
    first_active = None
    for w, lam in zip(rows, lams):
        t0 = w["t_ms"]
        cfg = None
        for h in history:
            if h["t_ms"] <= t0 + bucket_ms:
                cfg = h
        active = False
        if cfg is not None:
            c = ShedderConfig({(r["pattern"], r["type"]): r["r"] for r in cfg["ratios"]})
            active = c.sheds_any(pairs)
        if active and first_active is None:
            first_active = len(windows)
        p_star = feasible_ptime(bound_s, lam)
        n = w["processed"]
        p = w["avg_ptime_us"] * 1e-6
        dev = 0.0
        if n and (p > p_star or active):
            dev = n * abs(p - p_star)
        total_dev += dev
        windows.append({"t_ms": t0, "processed": n, "p_ms": p * 1000.0, "p_star_ms": p_star * 1000.0,
                        "shedding": active, "in_band": bool(n) and abs(p - p_star) <= band * p_star,
                        "deviation_s": dev})
    judged = [w for i, w in enumerate(windows)
              if first_active is not None and i > first_active and w["shedding"] and w["processed"]]
    frac = sum(w["in_band"] for w in judged) / len(judged) if judged else None
    return windows, total_dev, frac


def run_experiment(topology: Topology, workload: WorkloadSpec, strategy: str = "global",
                   bounds: dict[str, float] | None = None, settings: ExperimentSettings | None = None,
                   seed: int | None = None, duration_ms: float | None = None) -> ExperimentReport:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    settings = settings or ExperimentSettings()
    seed = workload.seed if seed is None else seed
    duration = workload.duration_ms if duration_ms is None else duration_ms
    if bounds:
        ops = [OperatorSpec(o.id, o.patterns, bounds.get(o.id, o.latency_bound_ms), o.service_rate_hint)
               for o in topology.operators]
        topology = Topology(topology.types, topology.sources, ops, topology.sinks, topology.edges,
                            topology.virtual_types)
    bottleneck = settings.bottleneck or pick_bottleneck(topology, workload)
    bound_ms = topology.operator(bottleneck).latency_bound_ms
    if not bound_ms:
        raise ValueError(f"bottleneck {bottleneck} has no latency bound")

    state = None
    if strategy != "none":
        state = ControllerState(topology, bottleneck, {bottleneck: bound_ms}, strategy=strategy,
                                band=settings.ptime_band, debounce_ms=settings.debounce_ms,
                                method=settings.method)
    mon = Monitoring(topology, state, settings.monitor_window, settings.update_threshold,
                     settings.rate_window_ms, settings.check_every, delay_ms=settings.controller_delay_ms)
    sim = Simulator(topology, workload, None, seed=seed, service=settings.service, observer=mon,
                    bucket_ms=settings.bucket_ms)
    main = sim.run(duration)
    oracle = Simulator(topology, workload, None, seed=seed, capacity="infinite",
                       bucket_ms=settings.bucket_ms).run(duration)

    windows, dev, frac = latency_windows(main, topology, workload, bottleneck, settings.ptime_band,
                                         settings.bucket_ms)
    decisions = [] if state is None else [{k: v for k, v in d.items() if k != "solver_ms"}
                                          for d in state.decisions]
    return ExperimentReport(
        strategy=strategy, seed=seed, duration_ms=duration, bottleneck=bottleneck, bound_ms=bound_ms,
        sink_counts=main.sink_counts, oracle_sink_counts=oracle.sink_counts,
        recall=compute_recall(main, oracle), deviation_seconds=dev, in_band_fraction=frac,
        windows=windows, recomputes=state.recomputes if state else 0,
        update_messages=mon.message_count,
        solver={"recomputes": state.recomputes if state else 0,
                "iterations": state.solver_iterations if state else 0},
        decisions=decisions, config_history=main.config_history,
        settings=asdict(settings), workload=workload.to_dict(), operators=main.operators,
        simulation=main, decision_log=decisions_jsonl(state) if state else "",
        lp_debug=state.last_plan.problem.to_lp_text() if state and state.last_plan and state.last_plan.problem else "",
    )


# ---------------------------------------------------------------------------
# solver scalability


def bench_topology(types_n: int, queries_n: int, share: float, seed: int = 0) -> tuple[Topology, Snapshot]:
    """One source, one bottleneck with ``queries_n`` conjunctions; each type is
    used by about ``share * queries_n`` of them."""
    if types_n < 1 or queries_n < 1 or not 0 < share <= 1:
        raise ValueError("need types_n >= 1, queries_n >= 1 and share in (0, 1]")
    rng = random.Random(seed)
    per_type = max(1, round(share * queries_n))
    members: list[list[int]] = [[] for _ in range(queries_n)]
    for t in range(types_n):
        for q in rng.sample(range(queries_n), per_type):
            members[q].append(t)
    for q, m in enumerate(members):
        if not m:
            m.append(rng.randrange(types_n))
    types = {t: EventType(t, f"m{t}") for t in range(types_n + queries_n)}
    pats = []
    for q, m in enumerate(members):
        ast = And(tuple(Atom(t) for t in m)) if len(m) > 1 else Atom(m[0])
        pats.append(PatternSpec(f"Q{q}", ast, 10_000.0, types_n + q, rng.uniform(100, 3000)))
    used = sorted({t for m in members for t in m})
    op = OperatorSpec("b", tuple(pats), 20.0)
    topo = Topology(types, [Source("s", tuple(used))], [op], [Sink("k")],
                    [Edge("s", "b", tuple(used)), Edge("b", "k", tuple(types_n + q for q in range(queries_n)))])
    rates = {"s": {t: rng.uniform(10, 200) for t in used}}
    snap = Snapshot(topo, rates, {}, {p.id: p.ptime_us * 1e-6 for p in pats})
    return topo, snap


def scalability_bench(types_n: int, queries_n: int, share: float, repeats: int = 5, seed: int = 0,
                      method: str = "highs") -> dict:
    """Median wall time (ms) to build and solve the bottleneck LP."""
    topo, snap = bench_topology(types_n, queries_n, share, seed)
    p_star = 0.5 * avg_ptime(NO_SHEDDING, snap, "b")
    # untimed first solve pays for lazy imports inside the solver
    optimize(topo, snap, "b", p_star, "global", method)
    times = []
    status = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        plan = optimize(topo, snap, "b", p_star, "global", method)
        times.append((time.perf_counter() - t0) * 1000.0)
        status = plan.status
    return {"types": types_n, "queries": queries_n, "share": share, "ms": statistics.median(times),
            "status": status}


def bench_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["types", "queries", "share", "ms", "status"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "ms": f"{r['ms']:.3f}"})
    return buf.getvalue()


def summarize(report: ExperimentReport) -> str:
    frac = "n/a" if report.in_band_fraction is None else f"{report.in_band_fraction:.3f}"
    return (f"{report.strategy:>6}  recall={report.recall:.4f}  sinks={report.sink_counts}  "
            f"dev_s={report.deviation_seconds:.2f}  in_band={frac}  recomputes={report.recomputes}  "
            f"messages={report.update_messages}")

