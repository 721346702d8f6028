"""Runtime monitoring and re-planning.

Every node keeps running averages and reports to a central controller only
when some metric has moved by more than the update threshold. The controller
assembles a snapshot from the latest reports (operator arrival rates are the
summed upstream outputs), checks the bottleneck's processing time against the
feasible band and re-solves the LP when it leaves it.
"""
from __future__ import annotations

import json
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .model import Topology
from .optimizer import Plan, optimize
from .shedding import NO_SHEDDING, ShedderConfig, Snapshot, avg_ptime, feasible_ptime

log = logging.getLogger(__name__)

OVERLOAD = "OVERLOAD"
OVERSHED = "OVERSHED"
EPS = 1e-9


# ---------------------------------------------------------------------------
# running statistics


class RunningAverage:
    """Mean over the last ``window_n`` samples in O(1) per update."""

    def __init__(self, window_n: int):
        if window_n < 1:
            raise ValueError("window_n must be >= 1")
        self.window_n = window_n
        self._buf: deque = deque()
        self._sum = 0.0
        self._adds = 0

    def add(self, x: float) -> None:
        self._buf.append(x)
        self._sum += x
        if len(self._buf) > self.window_n:
            self._sum -= self._buf.popleft()
        self._adds += 1
        if self._adds % (16 * self.window_n) == 0:
            # resum now and then so float drift cannot accumulate
            self._sum = math.fsum(self._buf)

    @property
    def count(self) -> int:
        return len(self._buf)

    @property
    def value(self) -> float:
        if not self._buf:
            return math.nan
        return self._sum / len(self._buf)

    def reset(self) -> None:
        self._buf.clear()
        self._sum = 0.0


def running_average(samples: Iterable[float], window_n: int) -> float:
    avg = RunningAverage(window_n)
    for s in samples:
        avg.add(s)
    return avg.value


class RateWindow:
    """Per-key event rates (1/s) over a sliding window of virtual time."""

    def __init__(self, window_ms: float, start_ms: float = 0.0):
        self.window_ms = window_ms
        self.start = start_ms
        self._events: deque = deque()
        self.counts: dict = {}

    def add(self, t_ms: float, key) -> None:
        self._events.append((t_ms, key))
        self.counts[key] = self.counts.get(key, 0) + 1
        self._evict(t_ms)

    def _evict(self, now: float) -> None:
        ev = self._events
        lo = now - self.window_ms
        while ev and ev[0][0] < lo:
            _, k = ev.popleft()
            self.counts[k] -= 1

    def rates(self, now: float) -> dict:
        self._evict(now)
        span = min(self.window_ms, now - self.start) / 1000.0
        if span <= 0:
            return {k: 0.0 for k in self.counts}
        return {k: n / span for k, n in self.counts.items()}


def should_emit(update: Mapping[str, float], last_reported: Mapping[str, float] | None,
                threshold: float) -> bool:
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if last_reported is None:
        return True
    for k, v in update.items():
        if k not in last_reported:
            return True
        old = last_reported[k]
        if abs(v - old) / max(abs(old), EPS) >= threshold:
            return True
    return False


# ---------------------------------------------------------------------------
# monitoring


@dataclass
class MetricsUpdate:
    node_id: str
    t_ms: float
    # per pattern mean cost of one processed (event, pattern) pair, seconds
    ptime_s: dict[str, float] = field(default_factory=dict)
    # mean service time per dequeued event, seconds (operators only)
    op_ptime_s: float | None = None
    # sources: per type; operators: per pattern
    output_rates: dict = field(default_factory=dict)
    arrival_rates: dict[int, float] = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        out = {f"ptime:{k}": v for k, v in self.ptime_s.items()}
        if self.op_ptime_s is not None:
            out["ptime"] = self.op_ptime_s
        out.update({f"out:{k}": v for k, v in self.output_rates.items()})
        return out


class NodeMonitor:
    def __init__(self, node_id: str, kind: str, window_n: int = 1000, rate_window_ms: float = 5000.0,
                 min_samples: int | None = None, check_every: int = 50, threshold: float = 0.05,
                 keys: Iterable = ()):
        self.node_id = node_id
        self.kind = kind
        self.window_n = window_n
        self.min_samples = window_n // 2 if min_samples is None else min_samples
        self.check_every = check_every
        self.threshold = threshold
        self.ptime = RunningAverage(window_n)
        self.pattern_ptime: dict[str, RunningAverage] = {}
        self.out = RateWindow(rate_window_ms)
        self.arrivals = RateWindow(rate_window_ms)
        self.keys = list(keys)
        self.last_reported: dict[str, float] | None = None
        self.messages = 0
        self._n = 0

    def reset_ptime(self) -> None:
        self.ptime.reset()
        for a in self.pattern_ptime.values():
            a.reset()
        self._n = 0
        # the next check reports unconditionally, so the controller hears how the new config performs
        self.last_reported = None

    def on_source_emit(self, t: float, type_id: int) -> MetricsUpdate | None:
        self.out.add(t, type_id)
        self._n += 1
        return self._maybe(t)

    def on_processed(self, t: float, type_id: int, costs: Mapping[str, float], service_ms: float
                     ) -> MetricsUpdate | None:
        self.ptime.add(service_ms / 1000.0)
        self.arrivals.add(t, type_id)
        for pid, c in costs.items():
            avg = self.pattern_ptime.get(pid)
            if avg is None:
                avg = self.pattern_ptime[pid] = RunningAverage(self.window_n)
            avg.add(c / 1000.0)
        self._n += 1
        return self._maybe(t)

    def on_emit(self, t: float, pattern_id: str) -> None:
        self.out.add(t, pattern_id)

    def current(self, t: float) -> MetricsUpdate:
        rates = self.out.rates(t)
        for k in self.keys:
            rates.setdefault(k, 0.0)
        if self.kind == "source":
            return MetricsUpdate(self.node_id, t, output_rates=dict(sorted(rates.items())))
        return MetricsUpdate(
            self.node_id, t,
            ptime_s={k: a.value for k, a in sorted(self.pattern_ptime.items()) if a.count},
            op_ptime_s=self.ptime.value if self.ptime.count else None,
            output_rates=dict(sorted(rates.items())),
            arrival_rates=dict(sorted(self.arrivals.rates(t).items())),
        )

    def _maybe(self, t: float) -> MetricsUpdate | None:
        if self._n < self.min_samples or self._n % self.check_every:
            return None
        upd = self.current(t)
        m = upd.metrics()
        if not should_emit(m, self.last_reported, self.threshold):
            return None
        self.last_reported = m
        self.messages += 1
        return upd


# ---------------------------------------------------------------------------
# controller


@dataclass
class ControllerState:
    topology: Topology
    bottleneck: str
    bounds_ms: dict[str, float]
    config: ShedderConfig = NO_SHEDDING
    strategy: str = "global"
    band: float = 0.10
    debounce_ms: float = 1000.0
    method: str = "auto"
    reports: dict[str, MetricsUpdate] = field(default_factory=dict)
    last_plan: Plan | None = None
    plan_snapshot: Snapshot | None = None
    last_recompute_ms: float = -math.inf
    # a pushed config not yet applied, and when the last one took effect
    pending: bool = False
    config_applied_ms: float = -math.inf
    recomputes: int = 0
    updates_received: int = 0
    solver_iterations: int = 0
    decisions: list[dict] = field(default_factory=list)
    # wall-clock solver times are kept apart from the deterministic report
    solver_ms: list[float] = field(default_factory=list)

    @property
    def bound_s(self) -> float:
        return self.bounds_ms[self.bottleneck] / 1000.0


def build_snapshot(state: ControllerState, t_ms: float = 0.0) -> Snapshot | None:
    """Latest reported characteristics, or None until every needed node has reported."""
    topo = state.topology
    src_rates: dict[str, dict[int, float]] = {}
    out_rates: dict[str, float] = {}
    ptimes: dict[str, float] = {}
    op_ptime: dict[str, float] = {}
    for s in topo.sources:
        rep = state.reports.get(s.id)
        if rep is None:
            return None
        src_rates[s.id] = {int(k): v for k, v in rep.output_rates.items()}
    for op in topo.operators:
        rep = state.reports.get(op.id)
        if rep is None:
            continue
        out_rates.update({str(k): v for k, v in rep.output_rates.items()})
        ptimes.update(rep.ptime_s)
        if rep.op_ptime_s is not None:
            op_ptime[op.id] = rep.op_ptime_s
    # the bottleneck and what feeds it must have reported
    if state.bottleneck not in state.reports:
        return None
    for e in topo.in_edges(state.bottleneck):
        if topo.is_operator(e.producer) and e.producer not in state.reports:
            return None
    for op in topo.operators:
        for p in op.patterns:
            out_rates.setdefault(p.id, 0.0)
    return Snapshot(topo, src_rates, out_rates, ptimes, op_ptime, t_ms)


def _lp_inputs(snapshot: Snapshot, state: ControllerState) -> dict[str, float]:
    vals = {f"lam:{t}": r for t, r in snapshot.arrival_rates(state.bottleneck).items()}
    for p in state.topology.all_patterns():
        vals[f"y:{p.id}"] = snapshot.output_rates.get(p.id, 0.0)
    return vals


def _drifted(state: ControllerState, snapshot: Snapshot) -> bool:
    if state.plan_snapshot is None:
        return True
    old = _lp_inputs(state.plan_snapshot, state)
    new = _lp_inputs(snapshot, state)
    # only the rates the plan took as given
    keys = [k for k in new if k.startswith("lam:")]
    return should_emit({k: new[k] for k in keys}, {k: old.get(k, 0.0) for k in keys}, state.band)


def useful_pairs(topology: Topology, op_id: str) -> list[tuple[str, int]]:
    return [(p.id, t) for p in topology.operator(op_id).patterns for t in sorted(p.ast.atom_types())]


def needs_recompute(state: ControllerState, update: MetricsUpdate | None = None,
                    t_ms: float | None = None) -> tuple[bool, str | None]:
    if update is not None:
        state.reports[update.node_id] = update
    rep = state.reports.get(state.bottleneck)
    if rep is None or rep.op_ptime_s is None:
        return False, None
    # a report measured under an older config says nothing about the current one
    if state.pending or rep.t_ms <= state.config_applied_ms:
        return False, None
    t = update.t_ms if update is not None else (t_ms or 0.0)
    if t - state.last_recompute_ms < state.debounce_ms:
        return False, None
    snap = build_snapshot(state, t)
    if snap is None:
        return False, None
    p_star = feasible_ptime(state.bound_s, snap.lam(state.bottleneck))
    p = rep.op_ptime_s
    if p > p_star * (1 + state.band):
        return True, OVERLOAD
    if p < p_star * (1 - state.band) and state.config.sheds_any(useful_pairs(state.topology, state.bottleneck)):
        # a plan that was held back by something other than the time budget
        # cannot shed less until its inputs change
        plan = state.last_plan
        if plan is not None and plan.status == "optimal" and not plan.time_binding and not _drifted(state, snap):
            return False, None
        return True, OVERSHED
    return False, None


def uniform_fallback(config: ShedderConfig, snapshot: Snapshot, op_id: str, p_star: float) -> ShedderConfig:
    """Scale every ratio by p*/p so the mean processing time meets the bound."""
    op = snapshot.topology.operator(op_id)
    p = avg_ptime(config, snapshot, op_id)
    s = 1.0 if p <= 0 else min(1.0, p_star / p)
    return ShedderConfig({(pat.id, t): config.r(pat.id, t) * s for pat in op.patterns for t in op.input_types})


def recompute_and_apply(state: ControllerState, t_ms: float, reason: str = OVERLOAD,
                        push: Callable[[str, ShedderConfig], None] | None = None) -> ShedderConfig:
    snap = build_snapshot(state, t_ms)
    if snap is None:
        raise ValueError("no consistent snapshot available")
    lam = snap.lam(state.bottleneck)
    p_star = feasible_ptime(state.bound_s, lam)
    t0 = time.perf_counter()
    plan = optimize(state.topology, snap, state.bottleneck, p_star, state.strategy, state.method)
    solver_ms = (time.perf_counter() - t0) * 1000.0
    if plan.status == "optimal":
        config = plan.config
    else:
        log.warning("LP %s at t=%.0f ms; scaling ratios uniformly", plan.status, t_ms)
        config = uniform_fallback(state.config, snap, state.bottleneck, p_star)
    state.config = config
    state.last_plan = plan
    state.plan_snapshot = snap
    state.last_recompute_ms = t_ms
    state.recomputes += 1
    state.solver_iterations += plan.iterations
    state.solver_ms.append(solver_ms)
    rep = state.reports.get(state.bottleneck)
    state.decisions.append({
        "t": t_ms, "reason": reason, "bottleneck": state.bottleneck,
        "p_meas": rep.op_ptime_s if rep else None, "p_star": p_star,
        "solver_ms": solver_ms, "predicted_output": plan.predicted_output,
        "status": plan.status,
    })
    if push is not None:
        state.pending = True
        push(state.bottleneck, config)
    return config


def decisions_jsonl(state: ControllerState, with_wall_time: bool = True) -> str:
    lines = []
    for d in state.decisions:
        row = dict(d)
        if not with_wall_time:
            row.pop("solver_ms")
        lines.append(json.dumps(row, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


class Monitoring:
    """Simulation observer: feeds node monitors and forwards their updates."""

    def __init__(self, topology: Topology, state: ControllerState | None = None, window_n: int = 1000,
                 threshold: float = 0.05, rate_window_ms: float = 5000.0, check_every: int = 50,
                 min_samples: int | None = None, delay_ms: float = 0.0, mode: str = "event"):
        if mode != "event":
            # periodic reporting is not implemented; only deviation-triggered updates are
            raise NotImplementedError("only event-based metric emission is supported")
        self.topology = topology
        self.state = state
        self.delay_ms = delay_ms
        self.monitors: dict[str, NodeMonitor] = {}
        for s in topology.sources:
            self.monitors[s.id] = NodeMonitor(s.id, "source", window_n, rate_window_ms, min_samples,
                                              check_every, threshold, sorted(s.types))
        for op in topology.operators:
            self.monitors[op.id] = NodeMonitor(op.id, "operator", window_n, rate_window_ms, min_samples,
                                               check_every, threshold, [p.id for p in op.patterns])
        self.messages: list[tuple[float, str]] = []

    @property
    def message_count(self) -> int:
        return len(self.messages)

    def _forward(self, sim, upd: MetricsUpdate | None) -> None:
        if upd is None:
            return
        self.messages.append((upd.t_ms, upd.node_id))
        st = self.state
        if st is None:
            return
        st.updates_received += 1
        fire, reason = needs_recompute(st, upd)
        if fire:
            recompute_and_apply(st, upd.t_ms, reason,
                                lambda op, cfg: sim.push_config(op, cfg, self.delay_ms))

    # observer callbacks ---------------------------------------------------

    def on_source_emit(self, sim, src_id: str, type_id: int, t: float) -> None:
        self._forward(sim, self.monitors[src_id].on_source_emit(t, type_id))

    def on_processed(self, sim, op_id: str, t: float, type_id: int, costs, service_ms: float) -> None:
        self._forward(sim, self.monitors[op_id].on_processed(t, type_id, costs, service_ms))

    def on_emit(self, sim, op_id: str, pattern_id: str, t: float) -> None:
        self.monitors[op_id].on_emit(t, pattern_id)

    def on_config_applied(self, sim, op_id: str, config: ShedderConfig) -> None:
        self.monitors[op_id].reset_ptime()
        st = self.state
        if st is not None and op_id == st.bottleneck:
            st.pending = False
            st.config_applied_ms = sim.now
