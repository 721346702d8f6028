"""Brute-force reference for the shedding LP on small instances.

The evaluator below walks pattern trees directly and never touches the LP
builder, so agreement between the two is meaningful.
"""
from __future__ import annotations

import itertools
import random
from dataclasses import dataclass

import numpy as np

from .model import And, Atom, Edge, EventType, OperatorSpec, Or, PatternSpec, Seq, Sink, Source, Topology
from .shedding import ShedderConfig, Snapshot


def _rate_of(node, rates):
    """Expected match rate of a tree given per-type (already shed) input rates."""
    if isinstance(node, Atom):
        return rates[node.type_id]
    if isinstance(node, Or):
        vals = [_rate_of(c, rates) for c in node.children]
        out = vals[0]
        for v in vals[1:]:
            out = np.maximum(out, v)
        return out
    # seq / and: every copy of a type needs its own event
    counts: dict[int, int] = {}
    others = []
    stack = list(node.children)
    while stack:
        c = stack.pop()
        if isinstance(c, Atom):
            counts[c.type_id] = counts.get(c.type_id, 0) + 1
        elif isinstance(c, (Seq, And)):
            stack.extend(c.children)
        else:
            others.append(c)
    vals = [rates[t] / k for t, k in counts.items()] + [_rate_of(c, rates) for c in others]
    out = vals[0]
    for v in vals[1:]:
        out = np.minimum(out, v)
    return out


@dataclass
class Instance:
    topology: Topology
    snapshot: Snapshot
    bottleneck: str
    p_star: float

    def pairs(self) -> list[tuple[str, int]]:
        """(pattern, type) pairs at the bottleneck whose type the pattern uses."""
        op = self.topology.operator(self.bottleneck)
        return [(p.id, t) for p in op.patterns for t in sorted(p.ast.atom_types())]


def _arrivals(inst: Instance, op_id: str, outputs: dict) -> dict:
    topo, snap = inst.topology, inst.snapshot
    rates: dict = {}
    for e in topo.in_edges(op_id):
        for t in e.types:
            if topo.is_source(e.producer):
                v = snap.source_rates[e.producer].get(t, 0.0)
            else:
                v = sum(outputs[p.id] for p in topo.operator(e.producer).patterns if p.output_type == t)
            rates[t] = rates.get(t, 0.0) + v
    return rates


def evaluate(inst: Instance, ratios: dict, objective: str = "global"):
    """Objective value and time-feasibility for ratios given as scalars or arrays.

    ``ratios`` maps (pattern, type) at the bottleneck to r; missing pairs are 0.
    """
    topo = inst.topology
    lam_b = _arrivals(inst, inst.bottleneck, {})
    lam_tot = sum(lam_b.values())
    bott = topo.operator(inst.bottleneck)
    time = 0.0
    for p in bott.patterns:
        for t, lt in lam_b.items():
            time = time + lt / lam_tot * inst.snapshot.pattern_ptime(p.id) * ratios.get((p.id, t), 0.0)
    feasible = time <= inst.p_star * (1 + 1e-9)
    outputs: dict = {}
    for op_id in topo.operator_order():
        op = topo.operator(op_id)
        if op_id != inst.bottleneck and op_id not in _downstream(topo, inst.bottleneck):
            for p in op.patterns:
                outputs[p.id] = inst.snapshot.output_rates.get(p.id, 0.0)
            continue
        lam = _arrivals(inst, op_id, outputs)
        mu = inst.snapshot.mu(op_id)
        for p in op.patterns:
            if op_id == inst.bottleneck:
                rates = {t: lam[t] * ratios.get((p.id, t), 0.0) for t in lam}
            else:
                rates = lam
            y = p.f * _rate_of(p.ast, rates)
            if np.isfinite(mu):
                y = np.minimum(y, p.f * mu)
            outputs[p.id] = y
    if objective == "local":
        value = sum(outputs[p.id] for p in bott.patterns)
    else:
        value = 0.0
        for op in topo.operators:
            for p in op.patterns:
                for e in topo.out_edges(op.id):
                    if topo.is_sink(e.consumer) and p.output_type in e.types:
                        value = value + topo.sink(e.consumer).weight * outputs[p.id]
    return value, feasible


def _downstream(topo: Topology, op_id: str) -> set[str]:
    seen, stack = set(), [op_id]
    while stack:
        n = stack.pop()
        for e in topo.out_edges(n):
            if topo.is_operator(e.consumer) and e.consumer not in seen:
                seen.add(e.consumer)
                stack.append(e.consumer)
    return seen


def grid_search(inst: Instance, step: float = 0.02, objective: str = "global", chunk: int = 200_000):
    """Best (value, ratios) over the grid; unused pairs stay at 0 since they only cost time."""
    pairs = inst.pairs()
    levels = np.round(np.arange(0.0, 1.0 + step / 2, step), 12)
    best_val, best_r = -np.inf, None
    total = len(levels) ** len(pairs)
    grids = np.array(list(itertools.product(range(len(levels)), repeat=len(pairs))), dtype=np.int32) \
        if len(pairs) <= 3 else None
    for start in range(0, total, chunk):
        if grids is not None:
            idx = grids[start:start + chunk]
        else:
            flat = np.arange(start, min(start + chunk, total))
            idx = np.stack(np.unravel_index(flat, (len(levels),) * len(pairs)), axis=1)
        ratios = {pr: levels[idx[:, i]] for i, pr in enumerate(pairs)}
        val, feas = evaluate(inst, ratios, objective)
        val = np.where(feas, val, -np.inf)
        k = int(np.argmax(val))
        if val[k] > best_val:
            best_val = float(val[k])
            best_r = {pr: float(ratios[pr][k]) for pr in pairs}
    return best_val, best_r


def evaluate_config(inst: Instance, config: ShedderConfig, objective: str = "global") -> tuple[float, bool]:
    ratios = {(p, t): r for (p, t), r in config.ratios.items()}
    val, feas = evaluate(inst, ratios, objective)
    return float(val), bool(feas)


def _random_ast(rng: random.Random, types: list[int], budget: int):
    n = rng.randint(1, min(3, max(1, budget + 1)))
    atoms = []
    for _ in range(n):
        used = sorted({a.type_id for a in atoms})
        pool = types if len(used) < budget else used
        atoms.append(Atom(rng.choice(pool)))
    if len(atoms) == 1:
        return atoms[0]
    kind = rng.choice([Seq, And, Or])
    return kind(tuple(atoms))


def random_instance(seed: int, max_pairs: int = 4) -> Instance:
    """Small instance: one bottleneck with up to two patterns over up to three types,
    optionally followed by a conjunction with a side stream."""
    rng = random.Random(seed)
    n_types = rng.randint(1, 3)
    src_types = list(range(n_types))
    side = n_types
    patterns = []
    budget = max_pairs
    for i in range(rng.randint(1, 2)):
        ast = _random_ast(rng, src_types, min(budget, 3))
        budget -= len(ast.atom_types())
        patterns.append(PatternSpec(f"B{i}", ast, 10_000.0, side + 1 + i, rng.uniform(200, 3000),
                                    rng.choice([1, 1, 2])))
        if budget <= 0:
            break
    src_types = sorted(set().union(*(p.ast.atom_types() for p in patterns)))
    out_d = side + 1 + len(patterns)
    bott = OperatorSpec("b", tuple(patterns), 20.0)
    ops = [bott]
    sinks = [Sink("k0", round(rng.uniform(0.5, 2.0), 3)), Sink("k1", round(rng.uniform(0.5, 2.0), 3))]
    edges = [Edge("s", "b", tuple(src_types))]
    sources = [Source("s", tuple(src_types))]
    feed = rng.randrange(len(patterns))
    if rng.random() < 0.6:
        fed = patterns[feed]
        down = PatternSpec("D0", And((Atom(fed.output_type), Atom(side))), 10_000.0, out_d, rng.uniform(50, 500))
        ops.append(OperatorSpec("d", (down,), 1000.0))
        sources.append(Source("side", (side,)))
        edges += [Edge("side", "d", (side,)), Edge("b", "d", (fed.output_type,)), Edge("d", "k0", (out_d,))]
        rest = [p.output_type for i, p in enumerate(patterns) if i != feed]
        if rest:
            edges.append(Edge("b", "k1", tuple(rest)))
        else:
            sinks = sinks[:1]
    else:
        edges.append(Edge("b", "k0", tuple(p.output_type for p in patterns)))
        sinks = sinks[:1]
    used = set(src_types) | {p.output_type for p in patterns}
    if len(ops) > 1:
        used |= {side, out_d}
    types = {t: EventType(t, f"t{t}") for t in sorted(used)}
    topo = Topology(types, sources, ops, sinks, edges)
    src_rates = {"s": {t: rng.uniform(20, 300) for t in src_types}}
    if any(s.id == "side" for s in sources):
        src_rates["side"] = {side: rng.uniform(5, 150)}
    snap = Snapshot(topo, src_rates, {}, {p.id: p.ptime_us * 1e-6 for o in ops for p in o.patterns})
    lam = snap.lam("b")
    p_full = sum(lam_t / lam * sum(p.ptime_us * 1e-6 for p in patterns) for lam_t in snap.arrival_rates("b").values())
    p_star = p_full * rng.uniform(0.2, 0.9)
    return Instance(topo, snap, "b", p_star)
