import dataclasses
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cepshed.model import (And, Atom, Edge, Or, PropAtom, Seq, TopologyError, loads_topology, parse_pattern,
                           running_example, successors, transitive_successors, type_multiplicities, validate)

from reference import sx


def codes(topo):
    return {v.code for v in validate(topo)}


def test_running_example_is_valid(topo):
    assert validate(topo) == []
    assert len(topo.operators) == 4 and len(topo.sources) == 2 and len(topo.sinks) == 2


def test_cycle_detected(topo):
    topo.edges.append(Edge("w3", "w2", (8,)))
    assert "CYCLE" in codes(topo)


def test_unknown_type_in_atom(topo):
    op = topo.operators[0]
    pat = dataclasses.replace(op.patterns[0], ast=parse_pattern("(and (atom 0) (atom 77))"))
    topo.operators[0] = dataclasses.replace(op, patterns=(pat,) + op.patterns[1:])
    topo.__post_init__()
    assert "UNKNOWN_TYPE" in codes(topo)


def test_self_loop_and_bad_values(topo):
    op = topo.operators[0]
    pat = dataclasses.replace(op.patterns[0], output_type=0, window_ms=0.0, f=0, ptime_us=-1.0)
    topo.operators[0] = dataclasses.replace(op, patterns=(pat,) + op.patterns[1:])
    topo.__post_init__()
    assert {"SELF_LOOP", "BAD_WINDOW", "BAD_MULTIPLIER", "BAD_PTIME"} <= codes(topo)


def test_sink_without_input_and_bad_weight(topo):
    from cepshed.model import Sink
    topo.sinks.append(Sink("lonely", 0.0))
    topo.__post_init__()
    assert {"SINK_NO_INPUT", "BAD_SINK_WEIGHT"} <= codes(topo)


def test_edge_type_must_be_produced(topo):
    topo.edges.append(Edge("w1", "w3", (6,)))
    assert "EDGE_TYPE_NOT_PRODUCED" in codes(topo)


def test_parse_forms():
    assert parse_pattern("(seq (atom 0) (atom 0) (atom 1))") == Seq((Atom(0), Atom(0), Atom(1)))
    assert parse_pattern("(or 1 (and 2 3))") == Or((Atom(1), And((Atom(2), Atom(3)))))
    assert parse_pattern('(prop 0 region "eu")') == PropAtom(0, "region", "eu")
    for bad in ["", "(seq (atom 0)", "(xor 1 2)", "(atom 1 2)", "(seq 0 1) extra"]:
        with pytest.raises(TopologyError):
            parse_pattern(bad)


def test_multiplicities():
    assert type_multiplicities(parse_pattern(sx("seq(0,0,1)"))) == {0: 2, 1: 1}


def test_successors(topo):
    assert successors(topo, "Q21") == {"w3"}
    assert successors(topo, "Q31") == {"sink1"}
    with pytest.raises(KeyError):
        successors(topo, "nope")


def test_transitive_successors(topo):
    assert transitive_successors(topo, "w2") == {"w3", "w4"}
    assert transitive_successors(topo, "w1") == {"w3", "w4"}
    assert transitive_successors(topo, "w3") == set()
    with pytest.raises(KeyError):
        transitive_successors(topo, "w9")


def _dfs(topo, start):
    seen, stack = set(), [start]
    while stack:
        n = stack.pop()
        for e in topo.edges:
            if e.producer == n and e.consumer not in seen:
                seen.add(e.consumer)
                stack.append(e.consumer)
    return {n for n in seen if topo.is_operator(n)}


@given(st.integers(0, 10_000))
def test_successor_queries_match_reachability(seed):
    from cepshed.oracle import random_instance
    topo = random_instance(seed).topology
    assert validate(topo) == []
    order = topo.topological_order()
    for e in topo.edges:
        assert order.index(e.producer) < order.index(e.consumer)
    for op in topo.operators:
        assert transitive_successors(topo, op.id) == _dfs(topo, op.id)
    referenced = {t for p in topo.all_patterns() for t in p.ast.atom_types()}
    produced = {t for s in topo.sources for t in s.types} | {p.output_type for p in topo.all_patterns()}
    assert referenced <= produced


PROP_TOPOLOGY = """
[types]
0 = "m0"
1 = "m1"
2 = "out"

[sources.s]
types = [0, 1]
rates = { 0 = 10.0, 1 = 5.0 }

[operators.w]
latency_bound_ms = 50.0

[operators.w.patterns.P]
ast = '(and (prop 0 region "eu") (atom 1))'
window_ms = 1000.0
output_type = 2
ptime_us = 100.0

[sinks.k]

[[edges]]
from = "s"
to = "w"
types = [0, 1]

[[edges]]
from = "w"
to = "k"
types = [2]
"""


def test_property_atoms_become_virtual_types():
    topo = loads_topology(PROP_TOPOLOGY)
    assert validate(topo) == []
    (vid,) = topo.virtual_types
    assert vid == 3 and topo.virtual_types[vid] == (0, "region", "eu")
    assert topo.operator("w").input_types == {vid, 1}
    assert vid in topo.source("s").types
    assert vid in topo.in_edges("w")[0].types
    assert topo.sink("k").weight == 1.0


def test_loader_rejects_missing_fields():
    with pytest.raises((TopologyError, KeyError, ValueError)):
        loads_topology(PROP_TOPOLOGY.replace("output_type = 2\n", ""))


def test_property_events_are_retyped_in_simulation():
    from cepshed.engine import Simulator
    from cepshed.workload import WorkloadSpec

    class Replay(WorkloadSpec):
        def arrivals(self, topology, horizon_ms, seed=None):
            rows = [(1.0, "s", 0, {"region": "eu"}), (2.0, "s", 0, {"region": "us"}), (3.0, "s", 1, {}),
                    (4.0, "s", 1, {})]
            return iter(rows)

    topo = loads_topology(PROP_TOPOLOGY)
    rep = Simulator(topo, Replay(rates={"s": {0: 1.0, 1: 1.0}})).run(100.0)
    assert rep.sink_counts == {"k": 1}
    assert rep.operators["w"]["arrivals"] == {"1": 2, "3": 1}


def test_negation_is_rejected():
    with pytest.raises(TopologyError):
        parse_pattern("(not 0)")
