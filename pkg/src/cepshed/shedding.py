"""Probabilistic per-(pattern, type) shedder and the queueing math behind feasibility.

Ratios are *processing* shares: ``r = 1`` keeps every event of a type at a
pattern, ``r = 0`` sheds all of them. The LP's shedding variables use the
same convention.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .model import Topology


class OverloadError(ArithmeticError):
    """Arrival rate at or above the service rate: the queue grows without bound."""


@dataclass(frozen=True)
class ShedderConfig:
    ratios: Mapping[tuple[str, int], float] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for (pid, t), r in self.ratios.items():
            r = float(r)
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"ratio for ({pid}, {t}) outside [0, 1]: {r}")
            clean[(str(pid), int(t))] = r
        object.__setattr__(self, "ratios", clean)

    def r(self, pattern_id: str, type_id: int) -> float:
        return self.ratios.get((pattern_id, type_id), 1.0)

    def sheds_any(self, pairs: Iterable[tuple[str, int]] | None = None) -> bool:
        keys = self.ratios if pairs is None else pairs
        return any(self.r(p, t) < 1.0 for p, t in keys)

    def to_json(self) -> str:
        rows = [{"pattern": p, "type": t, "r": r} for (p, t), r in sorted(self.ratios.items())]
        return json.dumps(rows)

    @classmethod
    def from_json(cls, text: str) -> "ShedderConfig":
        return cls({(row["pattern"], int(row["type"])): float(row["r"]) for row in json.loads(text)})

    def to_rows(self) -> list[dict]:
        return json.loads(self.to_json())


NO_SHEDDING = ShedderConfig()


def should_process(config: ShedderConfig, pattern_id: str, type_id: int, rng: random.Random) -> bool:
    # one draw per call regardless of r, so runs that differ only in ratios
    # consume identical random streams
    u = rng.random()
    return u < config.r(pattern_id, type_id)


# ---------------------------------------------------------------------------
# M/M/1 relations


def sojourn_time(lam: float, mu: float) -> float:
    """Mean time in system, ``1 / (mu - lam)`` seconds."""
    if lam < 0 or mu <= 0:
        raise ValueError("rates must be non-negative and mu positive")
    if lam >= mu:
        raise OverloadError(f"lambda={lam} >= mu={mu}: infinite queueing")
    return 1.0 / (mu - lam)


def feasible_ptime(bound_s: float, lam: float) -> float:
    """Largest mean processing time keeping the sojourn at ``bound_s``."""
    if not bound_s > 0:
        raise ValueError("latency bound must be positive")
    if lam < 0:
        raise ValueError("arrival rate must be non-negative")
    return 1.0 / (1.0 / bound_s + lam)


# ---------------------------------------------------------------------------
# snapshots of stream characteristics


@dataclass
class Snapshot:
    """Measured rates and costs the planner works from.

    Operator arrival rates are never counted locally; they are the summed
    output rates of whatever feeds the operator, so an overloaded operator
    still sees its true offered load.
    """

    topology: Topology
    source_rates: dict[str, dict[int, float]]
    output_rates: dict[str, float]
    ptime_s: dict[str, float]
    # measured mean processing time per operator; absent -> derived from ptime_s
    op_ptime_s: dict[str, float] = field(default_factory=dict)
    t_ms: float = 0.0

    def arrival_rates(self, op_id: str) -> dict[int, float]:
        topo = self.topology
        wanted = topo.operator(op_id).input_types
        rates: dict[int, float] = {t: 0.0 for t in sorted(wanted)}
        for e in topo.in_edges(op_id):
            for t in e.types:
                if t not in wanted:
                    continue
                if topo.is_source(e.producer):
                    rates[t] += self.source_rates.get(e.producer, {}).get(t, 0.0)
                else:
                    for p in topo.operator(e.producer).patterns:
                        if p.output_type == t:
                            rates[t] += self.output_rates.get(p.id, 0.0)
        return rates

    def lam(self, op_id: str) -> float:
        return sum(self.arrival_rates(op_id).values())

    def mu(self, op_id: str) -> float:
        op = self.topology.operator(op_id)
        if op.service_rate_hint:
            return op.service_rate_hint
        p = self.op_ptime_s.get(op_id)
        if p is None:
            p = avg_ptime(NO_SHEDDING, self, op_id)
        return float("inf") if p <= 0 else 1.0 / p

    def rho(self, op_id: str) -> float:
        mu = self.mu(op_id)
        return 0.0 if mu == float("inf") else self.lam(op_id) / mu

    def pattern_ptime(self, pattern_id: str) -> float:
        if pattern_id in self.ptime_s:
            return self.ptime_s[pattern_id]
        return self.topology.pattern(pattern_id)[1].ptime_us * 1e-6

    def to_dict(self) -> dict:
        return {
            "t_ms": self.t_ms,
            "source_rates": {s: {str(t): r for t, r in sorted(v.items())} for s, v in sorted(self.source_rates.items())},
            "output_rates": dict(sorted(self.output_rates.items())),
            "ptime_s": dict(sorted(self.ptime_s.items())),
            "op_ptime_s": dict(sorted(self.op_ptime_s.items())),
        }


def avg_ptime(config: ShedderConfig, snapshot: Snapshot, operator_id: str) -> float:
    """Mean per-event processing time at an operator under ``config`` (seconds)."""
    rates = snapshot.arrival_rates(operator_id)
    lam = sum(rates.values())
    if lam <= 0:
        return 0.0
    op = snapshot.topology.operator(operator_id)
    total = 0.0
    for t, lam_t in rates.items():
        inner = sum(config.r(p.id, t) * snapshot.pattern_ptime(p.id) for p in op.patterns)
        total += lam_t / lam * inner
    return total


def is_feasible(config: ShedderConfig, snapshot: Snapshot, operator_id: str, bound_s: float,
                rtol: float = 1e-9) -> bool:
    p = avg_ptime(config, snapshot, operator_id)
    lam = snapshot.lam(operator_id)
    p_star = feasible_ptime(bound_s, lam)
    return p <= p_star * (1.0 + rtol) and lam * p < 1.0
