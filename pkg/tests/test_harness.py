import json

import pytest

from cepshed.cli import main
from cepshed.engine import run_simulation
from cepshed.harness import (ExperimentSettings, bench_csv, bench_topology, compute_recall, pick_bottleneck,
                             run_experiment, scalability_bench)
from cepshed.model import Edge, EventType, OperatorSpec, PatternSpec, Sink, Source, Topology, parse_pattern
from cepshed.shedding import ShedderConfig
from cepshed.workload import WorkloadSpec, preset

from reference import sx


def test_recall_examples():
    assert compute_recall({"a": 50, "b": 25}, {"a": 100, "b": 50}) == 0.5
    assert compute_recall({"a": 0}, {"a": 0}) == 1.0
    assert compute_recall({"a": 10}, {"a": 10}) == 1.0


def test_pick_bottleneck(topo):
    assert pick_bottleneck(topo, preset("balanced")) == "w2"


def test_unknown_strategy(topo):
    with pytest.raises(ValueError):
        run_experiment(topo, preset("balanced"), "random", duration_ms=1000)


def test_underloaded_no_shedding(topo):
    wl = preset("balanced", seed=2, schedule=[{"start_ms": 0, "scale": 0.1}])
    rep = run_experiment(topo, wl, "none", duration_ms=30_000)
    assert rep.recall == pytest.approx(1.0, abs=0.02)
    assert rep.deviation_seconds == 0.0
    assert rep.in_band_fraction is None


def test_half_of_scarce_type_halves_recall():
    types = {0: EventType(0, "A"), 1: EventType(1, "B"), 2: EventType(2, "C")}
    op = OperatorSpec("w", (PatternSpec("Q", parse_pattern(sx("and(0,1)")), 10_000.0, 2, 10.0),), 1000.0)
    topo = Topology(types, [Source("s", (0, 1))], [op], [Sink("k")],
                    [Edge("s", "w", (0, 1)), Edge("w", "k", (2,))])
    wl = WorkloadSpec(rates={"s": {0: 100.0, 1: 50.0}})
    full = run_simulation(topo, wl, {}, 60_000.0, seed=1, capacity="infinite")
    half = run_simulation(topo, wl, {"w": ShedderConfig({("Q", 1): 0.5})}, 60_000.0, seed=1, capacity="infinite")
    assert compute_recall(half, full) == pytest.approx(0.5, abs=0.05)


def test_bench_topology_and_csv():
    topo, snap = bench_topology(20, 5, 0.4, seed=1)
    (op,) = topo.operators
    assert len(op.patterns) == 5
    uses = {t: sum(t in p.ast.atom_types() for p in op.patterns) for t in range(20)}
    assert all(u == 2 for u in uses.values())
    row = scalability_bench(20, 5, 0.4, repeats=2)
    assert row["status"] == "optimal" and row["ms"] > 0
    assert bench_csv([row]).splitlines()[0] == "types,queries,share,ms,status"
    with pytest.raises(ValueError):
        bench_topology(10, 2, 0.0)


def test_cli_validate(capsys):
    assert main(["validate"]) == 0
    assert "ok:" in capsys.readouterr().out


def test_cli_simulate_and_experiment(tmp_path, capsys):
    shed = tmp_path / "shed.json"
    shed.write_text(json.dumps({"w2": [{"pattern": "Q22", "type": 1, "r": 0.0}]}))
    assert main(["simulate", "--duration-ms", "2000", "--out", str(tmp_path / "s"), "--shedder", str(shed)]) == 0
    rep = json.loads((tmp_path / "s" / "report.json").read_text())
    assert rep["seed"] == 0 and set(rep["sink_counts"]) == {"sink1", "sink2"}
    assert main(["experiment", "--duration-ms", "3000", "--out", str(tmp_path / "e"), "--lp-debug"]) == 0
    for f in ("report.json", "timeseries.csv", "decisions.jsonl"):
        assert (tmp_path / "e" / f).exists()
    assert "recall=" in capsys.readouterr().out


def test_cli_trace_writes_mapping(tmp_path):
    assert main(["simulate", "--workload", "trace", "--duration-ms", "1000", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "mapping.json").read_text())
    assert len(set(doc["mapping"].values())) == 4


def test_cli_bench_and_oracle(tmp_path, capsys):
    assert main(["bench-lp", "--types", "10", "--queries", "2", "--share", "0.5", "--repeats", "1",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "bench_lp.csv").read_text().startswith("types,")
    assert main(["oracle-grid", "--instances", "3", "--step", "0.1"]) == 0
    assert capsys.readouterr().out.count("True") == 3


def test_tiny_bench_is_fast():
    assert scalability_bench(10, 2, 1.0, repeats=5)["ms"] < 50.0
