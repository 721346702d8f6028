"""Workload generation: synthetic presets, rate schedules and CSV trace replay."""
from __future__ import annotations

import csv
import heapq
import json
import logging
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .model import Topology

log = logging.getLogger(__name__)

MODES = ("balanced_synthetic", "unbalanced_synthetic", "trace")
PROCESSES = ("poisson", "constant")

# src2 feeds the bottleneck; src1 feeds the upstream operator whose outputs
# compete at the downstream AND operators
BALANCED = {"src1": {0: 300.0, 1: 150.0, 2: 150.0, 3: 150.0},
            "src2": {0: 200.0, 1: 100.0, 2: 100.0, 3: 100.0}}
# Q11 output (type 0 pairs) at 1/10 of Q12 output
UNBALANCED = {"src1": {0: 30.0, 1: 150.0, 2: 150.0, 3: 150.0},
              "src2": {0: 200.0, 1: 100.0, 2: 100.0, 3: 100.0}}


def _clean_rates(rates) -> dict[str, dict[int, float]]:
    out = {}
    for s, per in rates.items():
        out[str(s)] = {}
        for t, r in per.items():
            r = float(r)
            if r < 0:
                raise ValueError(f"negative rate for type {t} at {s}")
            out[str(s)][int(t)] = r
    return out


@dataclass
class TraceStream:
    events: list[tuple[float, str, int, dict]]
    mapping: dict[str, int]
    skipped: int = 0
    accepted: int = 0

    def mapping_json(self) -> str:
        return json.dumps({"mapping": self.mapping, "accepted": self.accepted, "skipped": self.skipped},
                          sort_keys=True, indent=1)


def default_trace_paths() -> list[Path]:
    data = resources.files("cepshed") / "data"
    return [Path(str(data / "trace_a.csv")), Path(str(data / "trace_b.csv"))]


def ingest_trace(paths, mapping: dict[str, int] | None = None, sources: list[str] | None = None,
                 n_types: int = 4) -> TraceStream:
    """Read (timestamp, machine_id, value) CSVs into a time-sorted event list.

    Machine ids map to types in order of first appearance modulo ``n_types``
    unless a mapping is given. Files are dealt to sources round-robin.
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise ValueError("empty trace file set")
    sources = sources or ["src1", "src2"]
    mapping = dict(mapping or {})
    next_type = len(mapping)
    events = []
    skipped = 0
    for i, path in enumerate(paths):
        src = sources[i % len(sources)]
        per_source = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                continue
            cols = {name.strip(): j for j, name in enumerate(header)}
            try:
                ts_col, id_col, val_col = cols["timestamp"], cols["machine_id"], cols["value"]
            except KeyError:
                raise ValueError(f"{path}: header must contain timestamp, machine_id, value") from None
            for row in reader:
                try:
                    ts = float(row[ts_col])
                    mid = row[id_col].strip()
                    val = float(row[val_col])
                except (IndexError, ValueError):
                    skipped += 1
                    continue
                if not mid or ts != ts:
                    skipped += 1
                    continue
                if mid not in mapping:
                    mapping[mid] = next_type % n_types
                    next_type += 1
                per_source.append((ts, src, mapping[mid], {"machine": mid, "value": val}))
        per_source.sort(key=lambda e: e[0])
        events.extend(per_source)
    if not events:
        raise ValueError("trace contained no usable rows")
    if skipped:
        log.warning("skipped %d malformed trace rows", skipped)
    events.sort(key=lambda e: (e[0], e[1]))
    t0 = events[0][0]
    events = [(ts - t0, s, t, a) for ts, s, t, a in events]
    return TraceStream(events, mapping, skipped, len(events))


@dataclass
class WorkloadSpec:
    mode: str = "balanced_synthetic"
    rates: dict[str, dict[int, float]] = field(default_factory=dict)
    process: str = "poisson"
    duration_ms: float = 60_000.0
    seed: int = 0
    # phases after t=0: {"start_ms": t, "scale": s} or {"start_ms": t, "rates": {...}}
    schedule: list[dict] = field(default_factory=list)
    trace_paths: list[str] = field(default_factory=list)
    trace_mapping: dict[str, int] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown workload mode {self.mode!r}")
        if self.process not in PROCESSES:
            raise ValueError(f"unknown arrival process {self.process!r}")
        if not self.rates and self.mode == "balanced_synthetic":
            self.rates = {s: dict(r) for s, r in BALANCED.items()}
        if not self.rates and self.mode == "unbalanced_synthetic":
            self.rates = {s: dict(r) for s, r in UNBALANCED.items()}
        self.rates = _clean_rates(self.rates)
        if self.mode == "trace":
            if not self.trace_paths:
                self.trace_paths = [str(p) for p in default_trace_paths()]
            for p in self.trace_paths:
                if not Path(p).is_file():
                    raise FileNotFoundError(p)
        self._trace: TraceStream | None = None

    # rate schedule --------------------------------------------------------

    def phases(self) -> list[tuple[float, dict[str, dict[int, float]]]]:
        out = [(0.0, self.rates)]
        current = self.rates
        for ph in sorted(self.schedule, key=lambda p: p["start_ms"]):
            if "rates" in ph:
                current = _clean_rates(ph["rates"])
            else:
                s = float(ph["scale"])
                if s < 0:
                    raise ValueError("negative rate scale")
                current = {src: {t: r * s for t, r in per.items()} for src, per in self.rates.items()}
            out.append((float(ph["start_ms"]), current))
        return out

    def rates_at(self, t_ms: float) -> dict[str, dict[int, float]] | None:
        """Nominal source rates in effect at ``t_ms`` (None for traces)."""
        if self.mode == "trace":
            return None
        current = self.rates
        for start, rates in self.phases():
            if start <= t_ms:
                current = rates
        return current

    # event generation -----------------------------------------------------

    def trace(self) -> TraceStream:
        if self._trace is None:
            self._trace = ingest_trace(self.trace_paths, self.trace_mapping)
        return self._trace

    def arrivals(self, topology: Topology, horizon_ms: float, seed: int | None = None
                 ) -> Iterator[tuple[float, str, int, dict]]:
        """Time-ordered (t_ms, source, type, attributes) tuples up to the horizon."""
        seed = self.seed if seed is None else seed
        if self.mode == "trace":
            return (e for e in self.trace().events if e[0] <= horizon_ms)
        streams = []
        phases = self.phases()
        for src in topology.sources:
            for t in sorted(src.types):
                spans = []
                for i, (start, rates) in enumerate(phases):
                    end = phases[i + 1][0] if i + 1 < len(phases) else horizon_ms
                    spans.append((start, min(end, horizon_ms), rates.get(src.id, {}).get(t, 0.0)))
                rng = random.Random(f"{seed}:arrivals:{src.id}:{t}")
                streams.append(self._stream(src.id, t, spans, rng))
        return heapq.merge(*streams, key=lambda e: (e[0], e[1], e[2]))

    def _stream(self, src: str, type_id: int, spans, rng: random.Random):
        for start, end, rate in spans:
            if rate <= 0 or end <= start:
                continue
            gap = 1000.0 / rate
            if self.process == "constant":
                t = start + rng.random() * gap
                while t <= end:
                    yield (t, src, type_id, {})
                    t += gap
            else:
                t = start + rng.expovariate(1.0) * gap
                while t <= end:
                    yield (t, src, type_id, {})
                    t += rng.expovariate(1.0) * gap

    def to_dict(self) -> dict:
        return {"mode": self.mode, "process": self.process, "duration_ms": self.duration_ms, "seed": self.seed,
                "rates": {s: {str(t): r for t, r in per.items()} for s, per in self.rates.items()},
                "schedule": self.schedule, "trace_paths": [Path(p).name for p in self.trace_paths]}


def preset(name: str, **kw) -> WorkloadSpec:
    aliases = {"balanced": "balanced_synthetic", "unbalanced": "unbalanced_synthetic"}
    return WorkloadSpec(mode=aliases.get(name, name), **kw)


def load_workload(path) -> WorkloadSpec:
    """Workload from TOML or JSON; keys mirror WorkloadSpec fields."""
    path = Path(path)
    text = path.read_text()
    doc = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    doc = dict(doc)
    if "trace_paths" in doc:
        doc["trace_paths"] = [str((path.parent / p).resolve()) if not Path(p).is_absolute() else p
                              for p in doc["trace_paths"]]
    return WorkloadSpec(**doc)
