import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cepshed.engine import OperatorRuntime, PatternMatcher, RejectedEvent, Simulator, run_simulation
from cepshed.model import (Edge, Event, EventType, OperatorSpec, PatternSpec, Sink, Source, Topology,
                           parse_pattern)
from cepshed.shedding import ShedderConfig
from cepshed.workload import WorkloadSpec

from reference import NaiveMatcher, sx


def pattern(text, window=10_000.0, ptime_us=100.0, f=1, pid="P", out=9):
    return PatternSpec(pid, parse_pattern(sx(text)), window, out, ptime_us, f)


def feed(matcher, stream):
    """stream: (ts, type) pairs; returns list of matched event-id tuples."""
    out = []
    wm = float("-inf")
    for i, (ts, t) in enumerate(stream):
        wm = max(wm, ts)
        parts = matcher.offer(Event(t, ts, {}, i), wm)
        if parts:
            out.append(tuple(p.id for p in parts))
    return out


def test_seq_two_zeros_then_one():
    m = PatternMatcher(pattern("seq(0,0,1)"))
    assert feed(m, [(0, 0), (1, 0), (2, 1)]) == [(0, 1, 2)]


def test_seq_cannot_start_with_last_element():
    m = PatternMatcher(pattern("seq(0,0,1)"))
    assert feed(m, [(0, 1)]) == []
    assert not m.open


def test_third_zero_stays_open():
    m = PatternMatcher(pattern("seq(0,0,1)"))
    assert feed(m, [(0, 0), (1, 0), (2, 0), (3, 1)]) == [(0, 1, 3)]
    (left,) = m.open.values()
    assert [e.id for e in left.events] == [2]


def test_and_any_order():
    m = PatternMatcher(pattern("and(0,1)"))
    assert feed(m, [(0, 1), (1, 1), (2, 0), (3, 0)]) == [(0, 2), (1, 3)]


def test_or_completes_on_either():
    m = PatternMatcher(pattern("or(0,1)"))
    assert feed(m, [(0, 1), (1, 0), (2, 2)]) == [(0,), (1,)]


def test_window_expiry_discards_machine():
    m = PatternMatcher(pattern("and(0,1)", window=5))
    assert feed(m, [(0, 0), (6, 1)]) == []
    assert m.discarded == 1


def test_expired_machine_not_extended():
    m = PatternMatcher(pattern("seq(0,1)", window=10))
    assert feed(m, [(0, 0), (9, 0), (12, 1)]) == [(1, 2)]
    assert m.discarded == 1


def test_late_event_outside_span_is_not_joined():
    m = PatternMatcher(pattern("seq(0,1)", window=10))
    assert feed(m, [(20, 0), (9, 1)]) == []
    assert len(m.open) == 1


EVENT_STREAM = st.lists(st.tuples(st.integers(0, 40), st.integers(0, 2)), min_size=0, max_size=10)
PATTERNS = st.sampled_from(["seq(0,0,1)", "and(0,1)", "and(0,1,2)", "seq(0,1,0)", "or(0,1)",
                            "seq(0,and(1,2))", "and(or(0,1),2)", "seq(or(0,2),1)", "and(0,0)"])


@given(PATTERNS, EVENT_STREAM, st.sampled_from([5.0, 15.0, 1000.0]))
@settings(max_examples=300)
def test_matcher_agrees_with_reference(text, stream, window):
    stream = sorted(stream, key=lambda e: e[0]) if random.Random(len(stream)).random() < 0.5 else stream
    spec = pattern(text, window)
    fast = feed(PatternMatcher(spec), stream)
    slow = NaiveMatcher(spec.ast, window).run([(ts, t, i) for i, (ts, t) in enumerate(stream)])
    assert fast == slow


@given(PATTERNS, EVENT_STREAM, st.sampled_from([5.0, 15.0]))
def test_consume_once_and_window_soundness(text, stream, window):
    spec = pattern(text, window)
    matches = feed(PatternMatcher(spec), stream)
    used = [i for m in matches for i in m]
    assert len(used) == len(set(used))
    for m in matches:
        ts = [stream[i][0] for i in m]
        assert max(ts) - min(ts) <= window


def small_operator(texts, ptimes=None):
    pats = tuple(pattern(t, pid=f"P{i}", out=10 + i, ptime_us=(ptimes or [100.0] * len(texts))[i])
                 for i, t in enumerate(texts))
    return OperatorSpec("op", pats, 20.0)


def test_ingest_grows_queue_and_rejects_unknown():
    op = OperatorRuntime(small_operator(["and(0,1)"]))
    assert op.queue_len == 0
    op.ingest(Event(0, 0.0))
    assert op.queue_len == 1
    for i in range(5):
        op.ingest(Event(1, float(i)))
    assert op.queue_len == 6
    with pytest.raises(RejectedEvent):
        op.ingest(Event(3, 0.0))


def test_complex_event_attributes_and_copies():
    spec = OperatorSpec("op", (pattern("and(0,1)", pid="Q", f=3),), 20.0)
    op = OperatorRuntime(spec)
    op.ingest(Event(0, 0.0, {"a": 1}, 0))
    op.ingest(Event(1, 1.0, {"b": 2}, 1))
    assert op.process_next(0.0)[0] == []
    outs = op.process_next(1.0)[0]
    assert len(outs) == 3
    ce = outs[0][1]
    assert ce.event_type == 9 and ce.parts == (0, 1)
    assert ce.attributes == {"a": 1, "b": 2, "source": "Q"}


def run_operator(spec, stream, config, seed=0):
    op = OperatorRuntime(spec, random.Random(seed), config, record_matches=True)
    total = 0.0
    for i, (ts, t) in enumerate(stream):
        op.ingest(Event(t, float(ts), {}, i), float(ts))
        total += op.process_next(float(ts))[1]
    return op, total


STREAM_NO_EXPIRY = st.lists(st.tuples(st.integers(0, 100), st.integers(0, 2)), max_size=60).map(sorted)


@given(STREAM_NO_EXPIRY, st.integers(0, 1000), st.floats(0, 1), st.floats(0, 1),
       st.sampled_from([("P0", 0), ("P0", 1), ("P1", 1), ("P1", 2)]))
def test_clock_accounting(stream, seed, r1, r2, pair):
    spec = small_operator(["seq(0,0,1)", "and(1,2)"], [150.0, 275.0])
    cfg = ShedderConfig({pair: r1, ("P1", 0): r2})
    op, total = run_operator(spec, stream, cfg, seed)
    pairs = op.counters.processed_pairs
    expected = pairs.get("P0", 0) * 0.150 + pairs.get("P1", 0) * 0.275
    assert total == pytest.approx(expected)
    assert op.counters.busy_ms == pytest.approx(expected)


@given(STREAM_NO_EXPIRY, st.integers(0, 1000), st.floats(0, 1), st.floats(0, 1),
       st.sampled_from([("P0", 0), ("P0", 1), ("P1", 1), ("P1", 2), ("P2", 0)]))
def test_lower_ratio_never_adds_emissions(stream, seed, r, r_low_frac, pair):
    # windows far exceed the stream's span, so nothing expires
    spec = small_operator(["seq(0,0,1)", "and(1,2)", "seq(0,and(1,2))"])
    hi = ShedderConfig({pair: r})
    lo = ShedderConfig({pair: r * r_low_frac})
    a, _ = run_operator(spec, stream, hi, seed)
    b, _ = run_operator(spec, stream, lo, seed)
    for pid in ("P0", "P1", "P2"):
        assert b.counters.emissions.get(pid, 0) <= a.counters.emissions.get(pid, 0)


def test_windows_break_monotonicity():
    # dropping the first 0 lets the later pair of 0s complete within the window
    spec = OperatorSpec("op", (pattern("seq(0,0,1)", window=10),), 20.0)
    stream = [(0, 0), (6, 0), (7, 0), (12, 1)]
    full, _ = run_operator(spec, stream, ShedderConfig())
    m = PatternMatcher(spec.patterns[0])
    assert full.counters.emissions.get("P", 0) == 0
    assert feed(m, stream[1:]) == [(0, 1, 2)]


def tiny_topology(rate_a, rate_b, text="and(0,1)"):
    types = {0: EventType(0, "A"), 1: EventType(1, "B"), 2: EventType(2, "C")}
    op = OperatorSpec("w", (PatternSpec("Q", parse_pattern(sx(text)), 10_000.0, 2, 10.0),), 1000.0)
    topo = Topology(types, [Source("s", (0, 1))], [op], [Sink("k")],
                    [Edge("s", "w", (0, 1)), Edge("w", "k", (2,))])
    wl = WorkloadSpec(mode="balanced_synthetic", rates={"s": {0: rate_a, 1: rate_b}})
    return topo, wl


def test_zero_rates_give_no_output():
    topo, wl = tiny_topology(0.0, 0.0)
    rep = run_simulation(topo, wl, {}, 5000.0, seed=3)
    assert rep.sink_counts == {"k": 0}


def test_and_rate_follows_scarcer_input():
    topo, wl = tiny_topology(100.0, 50.0)
    rep = run_simulation(topo, wl, {}, 60_000.0, seed=11)
    assert rep.sink_counts["k"] == pytest.approx(3000, rel=0.10)


def test_same_seed_same_report(topo):
    from cepshed.workload import preset
    a = run_simulation(topo, preset("balanced"), {}, 5000.0, seed=5).to_json()
    b = run_simulation(topo, preset("balanced"), {}, 5000.0, seed=5).to_json()
    c = run_simulation(topo, preset("balanced"), {}, 5000.0, seed=6).to_json()
    assert a == b
    assert a != c


def test_horizon_must_be_positive(topo):
    from cepshed.workload import preset
    with pytest.raises(ValueError):
        run_simulation(topo, preset("balanced"), {}, 0.0)


def test_busy_time_bounded_and_csv(topo):
    from cepshed.workload import preset
    rep = run_simulation(topo, preset("balanced"), {}, 5000.0, seed=2)
    for d in rep.operators.values():
        assert 0 <= d["busy_ms"] <= 5000.0 + 10.0
        assert d["queue_len_end"] >= 0
    text = rep.timeseries_csv(sorted(topo.types))
    header = text.splitlines()[0].split(",")
    assert header[:4] == ["t_ms", "operator", "avg_ptime_us", "queue_len"]
    assert "lambda_0" in header
    assert len(text.splitlines()) == 1 + 5 * len(topo.operators)


class _Flipper:
    """Observer that pushes a new configuration every few processed events."""

    def __init__(self):
        self.n = 0

    def on_source_emit(self, sim, *a):
        pass

    def on_emit(self, sim, *a):
        pass

    def on_config_applied(self, sim, *a):
        pass

    def on_processed(self, sim, op_id, t, *a):
        self.n += 1
        if op_id == "w2" and self.n % 7 == 0:
            r = (self.n % 10) / 10
            sim.push_config("w2", ShedderConfig({("Q21", 0): r, ("Q22", 1): 1 - r}))


def test_config_switch_is_atomic_per_event(topo):
    from cepshed.workload import preset
    sim = Simulator(topo, preset("balanced"), {}, seed=1, observer=_Flipper(), record_matches=True)
    sim.run(3000.0)
    op = sim.ops["w2"]
    assert op.config_version > 10
    versions = [v for _, v in op.version_log]
    # each event is tagged with exactly one version, and versions never go backwards
    assert len(versions) == op.counters.processed
    assert versions == sorted(versions)
