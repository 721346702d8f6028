"""Conditional selectivity functions and their composition over the graph.

A pattern's output rate is the rate at which complete matches can be formed
from its inputs. Sequences and conjunctions are limited by their scarcest
input (per required copy); disjunctions follow their richest input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from .model import And, Atom, Or, PatternNode, PatternSpec, Seq, Topology, sink_feeding_patterns
from .shedding import NO_SHEDDING, ShedderConfig, Snapshot, avg_ptime


@dataclass(frozen=True)
class Term:
    type_id: int
    k: int

    def eval(self, rates: Mapping[int, float]) -> float:
        return rates.get(self.type_id, 0.0) / self.k


@dataclass(frozen=True)
class Combine:
    op: str  # "min" | "max"
    parts: tuple

    def eval(self, rates: Mapping[int, float]) -> float:
        vals = [p.eval(rates) for p in self.parts]
        return min(vals) if self.op == "min" else max(vals)


@dataclass(frozen=True)
class SelectivityFn:
    pattern_id: str
    expr: Term | Combine
    f: int = 1

    @property
    def combinator(self) -> str:
        return self.expr.op if isinstance(self.expr, Combine) else "min"

    @property
    def multiplicities(self) -> dict[int, int]:
        """type -> required copies, for the top-level terms."""
        parts = self.expr.parts if isinstance(self.expr, Combine) else (self.expr,)
        return {p.type_id: p.k for p in parts if isinstance(p, Term)}

    @property
    def types(self) -> set[int]:
        out: set[int] = set()
        stack = [self.expr]
        while stack:
            e = stack.pop()
            if isinstance(e, Term):
                out.add(e.type_id)
            else:
                stack.extend(e.parts)
        return out

    def or_nodes(self) -> list[Combine]:
        found, stack = [], [self.expr]
        while stack:
            e = stack.pop()
            if isinstance(e, Combine):
                if e.op == "max":
                    found.append(e)
                stack.extend(e.parts)
        return found


def _compile(node: PatternNode) -> Term | Combine:
    if isinstance(node, Atom):
        return Term(node.type_id, 1)
    if isinstance(node, (Seq, And)):
        counts: dict[int, int] = {}
        nested: list = []
        # seq behaves like and: no global order is assumed across streams
        stack = list(node.children)
        while stack:
            c = stack.pop(0)
            if isinstance(c, Atom):
                counts[c.type_id] = counts.get(c.type_id, 0) + 1
            elif isinstance(c, (Seq, And)):
                stack[:0] = list(c.children)
            elif isinstance(c, Or):
                nested.append(_compile(c))
            else:
                raise TypeError(f"unsupported pattern node {c!r}")
        parts = tuple(Term(t, k) for t, k in counts.items()) + tuple(nested)
        return parts[0] if len(parts) == 1 else Combine("min", parts)
    if isinstance(node, Or):
        parts: list = []
        for c in node.children:
            sub = _compile(c)
            if isinstance(sub, Combine) and sub.op == "max":
                parts.extend(sub.parts)
            else:
                parts.append(sub)
        return parts[0] if len(parts) == 1 else Combine("max", tuple(parts))
    raise TypeError(f"unsupported pattern node {node!r}")


def build_selectivity(pattern: PatternSpec) -> SelectivityFn:
    return SelectivityFn(pattern.id, _compile(pattern.ast), pattern.f)


def predict_output(selfn: SelectivityFn, input_rates: Mapping[int, float]) -> float:
    if any(r < 0 for r in input_rates.values()):
        raise ValueError("negative input rate")
    return selfn.f * selfn.expr.eval(input_rates)


def propagate(topology: Topology, source_rates: Mapping[str, Mapping[int, float]],
              config: ShedderConfig = NO_SHEDDING,
              ptime_s: Mapping[str, float] | None = None) -> dict[str, float]:
    """Predicted output rate of every pattern, in topological order."""
    outputs: dict[str, float] = {}
    snap = Snapshot(topology, {s: dict(r) for s, r in source_rates.items()}, outputs, dict(ptime_s or {}))
    for op_id in topology.operator_order():
        op = topology.operator(op_id)
        lam = snap.arrival_rates(op_id)
        raw = {}
        for p in op.patterns:
            shed = {t: lam_t * config.r(p.id, t) for t, lam_t in lam.items()}
            raw[p.id] = predict_output(build_selectivity(p), shed)
        p_avg = avg_ptime(config, snap, op_id)
        mu = op.service_rate_hint or (math.inf if p_avg <= 0 else 1.0 / p_avg)
        demand = sum(raw[p.id] / p.f for p in op.patterns)
        scale = mu / demand if demand > mu else 1.0
        for p in op.patterns:
            outputs[p.id] = raw[p.id] * scale
    return outputs


def predict_sinks(topology: Topology, source_rates: Mapping[str, Mapping[int, float]],
                  config: ShedderConfig = NO_SHEDDING,
                  ptime_s: Mapping[str, float] | None = None) -> dict[str, float]:
    for rates in source_rates.values():
        if any(r < 0 for r in rates.values()):
            raise ValueError("negative source rate")
    outputs = propagate(topology, source_rates, config, ptime_s)
    sinks = {s.id: 0.0 for s in topology.sinks}
    for p, sink in sink_feeding_patterns(topology):
        sinks[sink] += outputs[p.id]
    return sinks


def weighted_output(topology: Topology, sink_rates: Mapping[str, float]) -> float:
    return sum(topology.sink(s).weight * r for s, r in sink_rates.items())


def model_snapshot(topology: Topology, source_rates: Mapping[str, Mapping[int, float]],
                   config: ShedderConfig = NO_SHEDDING, t_ms: float = 0.0) -> Snapshot:
    """Snapshot filled from the rate model and nominal pattern costs instead of measurements."""
    outputs = propagate(topology, source_rates, config)
    ptimes = {p.id: p.ptime_us * 1e-6 for p in topology.all_patterns()}
    snap = Snapshot(topology, {s: dict(r) for s, r in source_rates.items()}, outputs, ptimes, t_ms=t_ms)
    snap.op_ptime_s = {o.id: avg_ptime(config, snap, o.id) for o in topology.operators}
    return snap
