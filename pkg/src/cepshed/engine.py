"""Discrete-event simulation of an operator graph.

Each operator is a single FIFO server. Dequeuing an event offers it to every
pattern in declared order; the shedder decides per (pattern, type) whether
the pattern sees it at all, and every pattern that does adds its processing
cost to the event's service time. Matching uses one state machine per
partial match, consume-once, with the oldest accepting machine served first.
Windows are in event time.
"""
from __future__ import annotations

import csv
import heapq
import io
import itertools
import json
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .model import And, Atom, Event, OperatorSpec, Or, PatternNode, PatternSpec, Seq, Topology
from .shedding import NO_SHEDDING, ShedderConfig, should_process


class RejectedEvent(ValueError):
    pass


# ---------------------------------------------------------------------------
# pattern state machines


class _Compiled:
    """Pattern tree with atoms numbered in preorder; transitions cached per progress mask."""

    def __init__(self, ast: PatternNode):
        self.atom_types: list[int] = []
        self.root = self._index(ast)
        self._cache: dict[int, tuple[dict[int, int], bool]] = {}

    def _index(self, node):
        if isinstance(node, Atom):
            self.atom_types.append(node.type_id)
            return ("atom", len(self.atom_types) - 1)
        if isinstance(node, (Seq, And, Or)):
            return (node.kind, [self._index(c) for c in node.children])
        raise TypeError(f"cannot match on {node!r}")

    def _sat(self, node, mask: int) -> bool:
        kind, body = node
        if kind == "atom":
            return bool(mask >> body & 1)
        if kind == "or":
            return any(self._sat(c, mask) for c in body)
        return all(self._sat(c, mask) for c in body)

    def _enabled(self, node, mask: int) -> list[int]:
        if self._sat(node, mask):
            return []
        kind, body = node
        if kind == "atom":
            return [body]
        if kind == "seq":
            for c in body:
                if not self._sat(c, mask):
                    return self._enabled(c, mask)
            return []
        out = []
        for c in body:
            out.extend(self._enabled(c, mask))
        return out

    def step(self, mask: int) -> tuple[dict[int, int], bool]:
        """(type -> atom index that an event of that type would fill, is_final)."""
        hit = self._cache.get(mask)
        if hit is None:
            trans: dict[int, int] = {}
            for a in self._enabled(self.root, mask):
                trans.setdefault(self.atom_types[a], a)
            hit = (trans, self._sat(self.root, mask))
            self._cache[mask] = hit
        return hit


class StateMachine:
    __slots__ = ("seq", "opened_at", "mask", "events", "min_ts", "max_ts", "alive", "registered")

    def __init__(self, seq: int, event: Event, mask: int):
        self.seq = seq
        self.opened_at = event.ts
        self.mask = mask
        self.events = [event]
        self.min_ts = self.max_ts = event.ts
        self.alive = True
        self.registered: set[int] = set()


class PatternMatcher:
    PURGE_EVERY = 2048

    def __init__(self, pattern: PatternSpec):
        self.pattern = pattern
        self.window = pattern.window_ms
        self.c = _Compiled(pattern.ast)
        self.heaps: dict[int, list] = {}
        self.open: dict[int, StateMachine] = {}
        self._seq = itertools.count()
        self.discarded = 0
        self._offers = 0

    def _register(self, m: StateMachine) -> None:
        trans, _ = self.c.step(m.mask)
        m.registered &= set(trans)
        for t in trans:
            if t not in m.registered:
                m.registered.add(t)
                heapq.heappush(self.heaps.setdefault(t, []), (m.opened_at, m.seq, m))

    def _expire(self, m: StateMachine) -> None:
        m.alive = False
        self.open.pop(m.seq, None)
        self.discarded += 1

    def offer(self, event: Event, watermark: float) -> list[Event] | None:
        """Feed one event; returns the contributing events when a match completes."""
        self._offers += 1
        if self._offers % self.PURGE_EVERY == 0:
            self.purge(watermark)
        t = event.event_type
        win = self.window
        heap = self.heaps.get(t)
        chosen = None
        if heap:
            skipped = []
            while heap:
                _, _, m = heap[0]
                if not m.alive:
                    heapq.heappop(heap)
                elif watermark - m.opened_at > win:
                    heapq.heappop(heap)
                    self._expire(m)
                elif t not in self.c.step(m.mask)[0]:
                    heapq.heappop(heap)
                    m.registered.discard(t)
                elif max(m.max_ts, event.ts) - min(m.min_ts, event.ts) > win:
                    skipped.append(heapq.heappop(heap))
                else:
                    chosen = m
                    break
            for s in skipped:
                heapq.heappush(heap, s)
        if chosen is None:
            trans, _ = self.c.step(0)
            atom = trans.get(t)
            if atom is None:
                return None
            m = StateMachine(next(self._seq), event, 1 << atom)
            if self.c.step(m.mask)[1]:
                return m.events
            self.open[m.seq] = m
            self._register(m)
            return None
        m = chosen
        atom = self.c.step(m.mask)[0][t]
        m.mask |= 1 << atom
        m.events.append(event)
        if event.ts < m.min_ts:
            m.min_ts = event.ts
        if event.ts > m.max_ts:
            m.max_ts = event.ts
        if self.c.step(m.mask)[1]:
            m.alive = False
            del self.open[m.seq]
            return m.events
        self._register(m)
        return None

    def purge(self, watermark: float) -> None:
        for m in list(self.open.values()):
            if watermark - m.opened_at > self.window:
                self._expire(m)
        for t, heap in self.heaps.items():
            live = [e for e in heap if e[2].alive]
            if len(live) != len(heap):
                heapq.heapify(live)
                self.heaps[t] = live


# ---------------------------------------------------------------------------
# operators


@dataclass
class OperatorCounters:
    arrivals: dict[int, int] = field(default_factory=dict)
    processed: int = 0
    processed_pairs: dict[str, int] = field(default_factory=dict)
    emissions: dict[str, int] = field(default_factory=dict)
    busy_ms: float = 0.0
    sojourn_sum_ms: float = 0.0
    sojourn_n: int = 0
    max_queue: int = 0


class OperatorRuntime:
    def __init__(self, spec: OperatorSpec, rng: random.Random | None = None,
                 config: ShedderConfig = NO_SHEDDING, service: str = "deterministic",
                 service_rng: random.Random | None = None, capacity: str = "finite",
                 record_matches: bool = False):
        self.spec = spec
        self.inputs = spec.input_types
        self.queue: deque = deque()
        self.matchers = [PatternMatcher(p) for p in spec.patterns]
        self.rng = rng or random.Random(0)
        self.service_rng = service_rng or random.Random(1)
        self.config = config
        self.config_version = 0
        self.service = service
        self.capacity = capacity
        self.watermark = float("-inf")
        self.clock = 0.0
        self.counters = OperatorCounters()
        self.match_log: list[tuple[str, tuple[int, ...], float, float]] | None = [] if record_matches else None
        self.version_log: list[tuple[int, int]] | None = [] if record_matches else None

    @property
    def queue_len(self) -> int:
        return len(self.queue)

    def ingest(self, event: Event, now: float = 0.0) -> None:
        if event.event_type not in self.inputs:
            raise RejectedEvent(f"{self.spec.id} does not consume type {event.event_type}")
        self.queue.append((now, event))
        c = self.counters
        c.arrivals[event.event_type] = c.arrivals.get(event.event_type, 0) + 1
        if len(self.queue) > c.max_queue:
            c.max_queue = len(self.queue)

    def set_config(self, config: ShedderConfig) -> None:
        self.config = config
        self.config_version += 1

    def process_next(self, now: float, make_event: Callable[..., Event] | None = None):
        """Dequeue and process the head event.

        Returns ``(outputs, service_ms, costs, arrived_at, event)`` where
        ``outputs`` is a list of ``(pattern, complex_event)`` and ``costs``
        maps each pattern that processed the event to its cost in ms.
        """
        arrived_at, e = self.queue.popleft()
        if e.ts > self.watermark:
            self.watermark = e.ts
        cfg = self.config  # read once: an event never sees two configurations
        if self.version_log is not None:
            self.version_log.append((e.id, self.config_version))
        outputs = []
        costs: dict[str, float] = {}
        nominal = 0.0
        c = self.counters
        for pat, matcher in zip(self.spec.patterns, self.matchers):
            if not should_process(cfg, pat.id, e.event_type, self.rng):
                continue
            cost = pat.ptime_us / 1000.0
            costs[pat.id] = cost
            nominal += cost
            c.processed_pairs[pat.id] = c.processed_pairs.get(pat.id, 0) + 1
            parts = matcher.offer(e, self.watermark)
            if parts is None:
                continue
            if self.match_log is not None:
                ts = [p.ts for p in parts]
                self.match_log.append((pat.id, tuple(p.id for p in parts), min(ts), max(ts)))
            for _ in range(pat.f):
                outputs.append((pat, self._complex_event(pat, parts, make_event)))
            c.emissions[pat.id] = c.emissions.get(pat.id, 0) + pat.f
        if self.capacity == "infinite":
            service = 0.0
        elif self.service == "exponential" and nominal > 0:
            service = self.service_rng.expovariate(1.0 / nominal)
            scale = service / nominal
            costs = {k: v * scale for k, v in costs.items()}
        else:
            service = nominal
        c.processed += 1
        c.busy_ms += service
        self.clock = now + service
        return outputs, service, costs, arrived_at, e

    def _complex_event(self, pat: PatternSpec, parts: list[Event], make_event) -> Event:
        attrs: dict = {}
        for p in parts:
            attrs.update(p.attributes)
        attrs["source"] = pat.id
        ids = tuple(p.id for p in parts)
        if make_event is not None:
            return make_event(pat.output_type, attrs, ids)
        return Event(pat.output_type, self.clock, attrs, -1, ids)


# ---------------------------------------------------------------------------
# simulation driver


@dataclass
class SimulationReport:
    seed: int
    horizon_ms: float
    sink_counts: dict[str, int]
    operators: dict[str, dict]
    timeseries: list[dict]
    predictions: dict[str, float] = field(default_factory=dict)
    config_history: list[dict] = field(default_factory=list)
    controller: dict = field(default_factory=dict)
    source_counts: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "horizon_ms": self.horizon_ms,
            "sink_counts": self.sink_counts,
            "source_counts": self.source_counts,
            "operators": self.operators,
            "predictions": self.predictions,
            "config_history": self.config_history,
            "controller": self.controller,
            "timeseries": self.timeseries,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def timeseries_csv(self, type_ids: list[int]) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_ms", "operator", "avg_ptime_us", "queue_len", "processed"] + [f"lambda_{t}" for t in type_ids])
        for row in self.timeseries:
            lam = row["lambda"]
            w.writerow([row["t_ms"], row["operator"], row["avg_ptime_us"], row["queue_len"], row["processed"]]
                       + [lam.get(str(t), 0.0) for t in type_ids])
        return buf.getvalue()


class Simulator:
    """Runs sources, operators and sinks in virtual time (milliseconds).

    ``observer`` receives monitoring callbacks (see ``controller.Monitoring``)
    and may ask for configuration pushes through :meth:`push_config`.
    """

    def __init__(self, topology: Topology, workload, configs: dict[str, ShedderConfig] | None = None,
                 seed: int = 0, service: str = "deterministic", capacity: str = "finite",
                 channel_delay_ms: float = 0.0, observer=None, record_matches: bool = False,
                 bucket_ms: float = 1000.0):
        self.topology = topology
        self.workload = workload
        self.seed = seed
        self.delay = channel_delay_ms
        self.observer = observer
        self.bucket_ms = bucket_ms
        configs = configs or {}
        self.ops: dict[str, OperatorRuntime] = {}
        for op in topology.operators:
            self.ops[op.id] = OperatorRuntime(
                op, random.Random(f"{seed}:shed:{op.id}"), configs.get(op.id, NO_SHEDDING), service,
                random.Random(f"{seed}:service:{op.id}"), capacity, record_matches)
        self.busy: dict[str, bool] = {o: False for o in self.ops}
        self.sink_counts = {s.id: 0 for s in topology.sinks}
        self.source_counts: dict[str, dict[int, int]] = {s.id: {} for s in topology.sources}
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self._ids = itertools.count()
        self._consumers: dict[tuple[str, int], list[str]] = {}
        self._refine: dict[tuple[str, int], list] = {}
        self._sojourns: dict[str, list[float]] = {o: [] for o in self.ops}
        self.config_history: list[dict] = [
            {"t_ms": 0.0, "operator": o, "version": 0, "ratios": self.ops[o].config.to_rows()}
            for o in sorted(configs)]
        # per operator, per bucket: [processed, service_ms, arrivals by type, queue_len]
        self._buckets: dict[str, dict[int, list]] = {o: {} for o in self.ops}

    # scheduling -----------------------------------------------------------

    def schedule(self, t: float, kind: str, payload) -> None:
        heapq.heappush(self._heap, (t, next(self._seq), kind, payload))

    def consumers(self, producer: str, type_id: int) -> list[str]:
        key = (producer, type_id)
        if key not in self._consumers:
            self._consumers[key] = self.topology.consumers(producer, type_id)
        return self._consumers[key]

    def new_event(self, type_id: int, ts: float, attrs: dict | None = None, parts: tuple = ()) -> Event:
        return Event(type_id, ts, attrs if attrs is not None else {}, next(self._ids), parts)

    def push_config(self, op_id: str, config: ShedderConfig, delay_ms: float = 0.0) -> None:
        self.schedule(self.now + delay_ms, "config", (op_id, config))

    # event handlers ------------------------------------------------------

    def _bucket(self, op_id: str, t: float) -> list:
        b = self._buckets[op_id]
        k = int(t // self.bucket_ms)
        row = b.get(k)
        if row is None:
            row = b[k] = [0, 0.0, {}, 0]
        return row

    def _refinements(self, op_id: str, type_id: int) -> list:
        key = (op_id, type_id)
        if key not in self._refine:
            wanted = self.ops[op_id].inputs
            self._refine[key] = [(v, attr, val) for v, (base, attr, val) in self.topology.virtual_types.items()
                                 if base == type_id and v in wanted]
        return self._refine[key]

    def _deliver(self, producer: str, event: Event, t: float) -> None:
        for c in self.consumers(producer, event.event_type):
            if c in self.sink_counts:
                self.sink_counts[c] += 1
            elif event.event_type in self.ops[c].inputs:
                self.schedule(t + self.delay, "arrive", (c, event))
            else:
                # base-type event headed for a property refinement
                for v, attr, val in self._refinements(c, event.event_type):
                    if str(event.attributes.get(attr)) == val:
                        ev = Event(v, event.ts, event.attributes, event.id, event.parts)
                        self.schedule(t + self.delay, "arrive", (c, ev))

    def _start(self, op_id: str) -> None:
        op = self.ops[op_id]
        now = self.now
        make = lambda ty, attrs, ids: self.new_event(ty, now, attrs, ids)  # noqa: E731
        outputs, service, costs, arrived_at, e = op.process_next(now, make)
        self.busy[op_id] = True
        row = self._bucket(op_id, now)
        row[0] += 1
        row[1] += service
        row[3] = op.queue_len
        self.schedule(now + service, "done", (op_id, outputs, arrived_at, service, costs, e.event_type))

    def _done(self, payload) -> None:
        op_id, outputs, arrived_at, service, costs, etype = payload
        op = self.ops[op_id]
        t = self.now
        op.counters.sojourn_sum_ms += t - arrived_at
        op.counters.sojourn_n += 1
        for pat, ce in outputs:
            ce.ts = t
            self._deliver(op_id, ce, t)
        if self.observer is not None:
            self.observer.on_processed(self, op_id, t, etype, costs, service)
            for pat, _ in outputs:
                self.observer.on_emit(self, op_id, pat.id, t)
        self.busy[op_id] = False
        if op.queue:
            self._start(op_id)

    def _arrive(self, payload) -> None:
        op_id, event = payload
        op = self.ops[op_id]
        op.ingest(event, self.now)
        row = self._bucket(op_id, self.now)
        row[2][event.event_type] = row[2].get(event.event_type, 0) + 1
        row[3] = op.queue_len
        if not self.busy[op_id]:
            self._start(op_id)

    def _source_emit(self, src_id: str, type_id: int, attrs: dict) -> None:
        e = self.new_event(type_id, self.now, dict(attrs))
        counts = self.source_counts[src_id]
        counts[type_id] = counts.get(type_id, 0) + 1
        if self.observer is not None:
            self.observer.on_source_emit(self, src_id, type_id, self.now)
        self._deliver(src_id, e, self.now)

    def _apply_config(self, payload) -> None:
        op_id, config = payload
        op = self.ops[op_id]
        op.set_config(config)
        self.config_history.append({"t_ms": self.now, "operator": op_id, "version": op.config_version,
                                    "ratios": config.to_rows()})
        if self.observer is not None:
            self.observer.on_config_applied(self, op_id, config)

    # main loop -----------------------------------------------------------

    def run(self, horizon_ms: float) -> SimulationReport:
        if not horizon_ms > 0:
            raise ValueError("horizon must be positive")
        arrivals = self.workload.arrivals(self.topology, horizon_ms, self.seed)
        pending = next(arrivals, None)
        handlers = {"done": self._done, "arrive": self._arrive, "config": self._apply_config}
        heap = self._heap
        while True:
            t_heap = heap[0][0] if heap else float("inf")
            if pending is not None and pending[0] <= t_heap:
                t, src_id, type_id, attrs = pending
                if t > horizon_ms:
                    pending = None
                    continue
                self.now = t
                self._source_emit(src_id, type_id, attrs)
                pending = next(arrivals, None)
                continue
            if not heap or t_heap > horizon_ms:
                break
            t, _, kind, payload = heapq.heappop(heap)
            self.now = t
            handlers[kind](payload)
        self.now = horizon_ms
        rep = self.report(horizon_ms)
        rep.predictions = self.predictions()
        return rep

    def predictions(self) -> dict[str, float]:
        """Model sink rates (1/s) at the workload's initial nominal rates and initial configs."""
        from .selectivity import predict_sinks

        rates_at = getattr(self.workload, "rates_at", None)
        rates = rates_at(0.0) if rates_at else None
        if rates is None:
            return {}
        merged = {}
        for h in self.config_history:
            if h["t_ms"] == 0.0:
                merged.update({(r["pattern"], r["type"]): r["r"] for r in h["ratios"]})
        return predict_sinks(self.topology, rates, ShedderConfig(merged))

    def report(self, horizon_ms: float) -> SimulationReport:
        ops = {}
        for op_id, op in self.ops.items():
            c = op.counters
            ops[op_id] = {
                "arrivals": {str(k): v for k, v in sorted(c.arrivals.items())},
                "processed": c.processed,
                "processed_pairs": dict(sorted(c.processed_pairs.items())),
                "emissions": dict(sorted(c.emissions.items())),
                "busy_ms": c.busy_ms,
                "mean_sojourn_ms": c.sojourn_sum_ms / c.sojourn_n if c.sojourn_n else 0.0,
                "completed": c.sojourn_n,
                "max_queue": c.max_queue,
                "queue_len_end": op.queue_len,
                "open_machines": {m.pattern.id: len(m.open) for m in op.matchers},
                "discarded_machines": {m.pattern.id: m.discarded for m in op.matchers},
            }
        series = []
        width_s = self.bucket_ms / 1000.0
        n_buckets = int(horizon_ms // self.bucket_ms)
        for op_id in sorted(self._buckets):
            b = self._buckets[op_id]
            qlen = 0
            for k in range(n_buckets):
                row = b.get(k)
                if row is None:
                    row = [0, 0.0, {}, qlen]
                qlen = row[3]
                series.append({
                    "t_ms": k * self.bucket_ms,
                    "operator": op_id,
                    "processed": row[0],
                    "avg_ptime_us": row[1] / row[0] * 1000.0 if row[0] else 0.0,
                    "queue_len": row[3],
                    "lambda": {str(t): n / width_s for t, n in sorted(row[2].items())},
                })
        return SimulationReport(
            seed=self.seed,
            horizon_ms=horizon_ms,
            sink_counts=dict(self.sink_counts),
            operators=ops,
            timeseries=series,
            config_history=self.config_history,
            source_counts={s: {str(t): n for t, n in sorted(c.items())} for s, c in self.source_counts.items()},
        )


def run_simulation(topology: Topology, workload, shedder_configs: dict[str, ShedderConfig] | None = None,
                   horizon_ms: float = 60_000.0, seed: int = 0, **kwargs) -> SimulationReport:
    sim = Simulator(topology, workload, shedder_configs, seed=seed, **kwargs)
    return sim.run(horizon_ms)
