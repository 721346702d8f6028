"""Events, pattern ASTs, operators and the operator-graph topology.

A topology is a DAG of sources, operators and sinks. Every operator holds an
ordered list of patterns; each pattern turns a combination of input types
into one output type. Types are small integers declared up front.
"""
from __future__ import annotations

import graphlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class EventType:
    id: int
    name: str


@dataclass(slots=True)
class Event:
    event_type: int
    ts: float
    attributes: dict = field(default_factory=dict)
    id: int = -1
    # ids of the events a complex event was built from; empty for primitives
    parts: tuple = ()


# ---------------------------------------------------------------------------
# pattern ASTs


class PatternNode:
    kind = ""

    def atoms(self) -> Iterator["Atom"]:
        raise NotImplementedError

    def atom_types(self) -> set[int]:
        return {a.type_id for a in self.atoms()}

    def to_sexpr(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class Atom(PatternNode):
    type_id: int
    kind = "atom"

    def atoms(self):
        yield self

    def to_sexpr(self):
        return f"(atom {self.type_id})"


@dataclass(frozen=True)
class PropAtom(PatternNode):
    """Closed-set property predicate, ``type == base and attr == value``.

    Only exists between parsing and topology construction; the loader swaps
    it for an :class:`Atom` over a virtual type.
    """

    base_type: int
    attr: str
    value: str
    kind = "prop"

    def atoms(self):
        raise TopologyError("property atom was not expanded to a virtual type")

    def to_sexpr(self):
        return f"(prop {self.base_type} {self.attr} {self.value})"


@dataclass(frozen=True)
class _Composite(PatternNode):
    children: tuple

    def atoms(self):
        for c in self.children:
            yield from c.atoms()

    def to_sexpr(self):
        return "(" + self.kind + " " + " ".join(c.to_sexpr() for c in self.children) + ")"


class Seq(_Composite):
    kind = "seq"


class And(_Composite):
    kind = "and"


class Or(_Composite):
    kind = "or"


_COMPOSITES = {"seq": Seq, "and": And, "or": Or}


def _tokenize(text: str) -> list[str]:
    return text.replace("(", " ( ").replace(")", " ) ").split()


def parse_pattern(text: str) -> PatternNode:
    """Parse an s-expression such as ``(seq (atom 0) (atom 0) (atom 1))`` or ``(seq 0 0 1)``."""
    tokens = _tokenize(text)
    if not tokens:
        raise TopologyError("empty pattern expression")
    pos = 0

    def parse() -> PatternNode:
        nonlocal pos
        if tokens[pos] != "(":
            raise TopologyError(f"expected '(' at token {pos} in {text!r}")
        head = tokens[pos + 1].lower()
        pos += 2
        args: list = []
        while pos < len(tokens) and tokens[pos] != ")":
            if tokens[pos] == "(":
                args.append(parse())
            else:
                args.append(tokens[pos])
                pos += 1
        if pos >= len(tokens):
            raise TopologyError(f"unbalanced parentheses in {text!r}")
        pos += 1
        if head == "atom":
            if len(args) != 1 or not isinstance(args[0], str):
                raise TopologyError(f"atom takes one type id: {text!r}")
            return Atom(int(args[0]))
        if head == "prop":
            if len(args) != 3 or not all(isinstance(a, str) for a in args):
                raise TopologyError(f"prop takes (prop TYPE ATTR VALUE): {text!r}")
            return PropAtom(int(args[0]), args[1], args[2].strip('"'))
        if head in _COMPOSITES:
            # bare integers are shorthand for atoms: (seq 0 0 1)
            args = [Atom(int(a)) if isinstance(a, str) and a.isdigit() else a for a in args]
            if not all(isinstance(a, PatternNode) for a in args):
                raise TopologyError(f"{head} takes sub-patterns only: {text!r}")
            return _COMPOSITES[head](tuple(args))
        raise TopologyError(f"unknown pattern node {head!r}")

    node = parse()
    if pos != len(tokens):
        raise TopologyError(f"trailing tokens in {text!r}")
    return node


def type_multiplicities(node: PatternNode) -> dict[int, int]:
    counts: dict[int, int] = {}
    for a in node.atoms():
        counts[a.type_id] = counts.get(a.type_id, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# graph elements


@dataclass(frozen=True)
class PatternSpec:
    id: str
    ast: PatternNode
    window_ms: float
    output_type: int
    ptime_us: float
    f: int = 1

    @property
    def input_types(self) -> set[int]:
        return self.ast.atom_types()


@dataclass(frozen=True)
class OperatorSpec:
    id: str
    patterns: tuple[PatternSpec, ...]
    latency_bound_ms: float | None = None
    service_rate_hint: float | None = None

    @property
    def input_types(self) -> set[int]:
        out: set[int] = set()
        for p in self.patterns:
            out |= p.input_types
        return out

    @property
    def output_types(self) -> set[int]:
        return {p.output_type for p in self.patterns}


@dataclass(frozen=True)
class Source:
    id: str
    types: tuple[int, ...]
    # default per-type rates in events/s; workloads may override
    rates: dict = field(default_factory=dict, hash=False)


@dataclass(frozen=True)
class Sink:
    id: str
    weight: float = 1.0


@dataclass(frozen=True)
class Edge:
    producer: str
    consumer: str
    types: tuple[int, ...]


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


@dataclass
class Topology:
    types: dict[int, EventType]
    sources: list[Source]
    operators: list[OperatorSpec]
    sinks: list[Sink]
    edges: list[Edge]
    # virtual type id -> (base type, attribute, value)
    virtual_types: dict[int, tuple[int, str, str]] = field(default_factory=dict)

    def __post_init__(self):
        self._ops = {o.id: o for o in self.operators}
        self._srcs = {s.id: s for s in self.sources}
        self._sinks = {s.id: s for s in self.sinks}
        self._patterns = {}
        for o in self.operators:
            for p in o.patterns:
                self._patterns.setdefault(p.id, (o, p))

    # lookups
    def operator(self, op_id: str) -> OperatorSpec:
        try:
            return self._ops[op_id]
        except KeyError:
            raise KeyError(f"unknown operator {op_id!r}") from None

    def source(self, src_id: str) -> Source:
        return self._srcs[src_id]

    def sink(self, sink_id: str) -> Sink:
        return self._sinks[sink_id]

    def pattern(self, pattern_id: str) -> tuple[OperatorSpec, PatternSpec]:
        try:
            return self._patterns[pattern_id]
        except KeyError:
            raise KeyError(f"unknown pattern {pattern_id!r}") from None

    def is_operator(self, node: str) -> bool:
        return node in self._ops

    def is_source(self, node: str) -> bool:
        return node in self._srcs

    def is_sink(self, node: str) -> bool:
        return node in self._sinks

    def node_ids(self) -> list[str]:
        return [s.id for s in self.sources] + [o.id for o in self.operators] + [s.id for s in self.sinks]

    def produced_types(self, node: str) -> set[int]:
        if node in self._srcs:
            return set(self._srcs[node].types)
        if node in self._ops:
            return self._ops[node].output_types
        return set()

    def consumers(self, producer: str, type_id: int) -> list[str]:
        return [e.consumer for e in self.edges if e.producer == producer and type_id in e.types]

    def in_edges(self, node: str) -> list[Edge]:
        return [e for e in self.edges if e.consumer == node]

    def out_edges(self, node: str) -> list[Edge]:
        return [e for e in self.edges if e.producer == node]

    def topological_order(self) -> list[str]:
        """All node ids, producers before consumers. Raises graphlib.CycleError."""
        ts = graphlib.TopologicalSorter({n: set() for n in self.node_ids()})
        for e in self.edges:
            ts.add(e.consumer, e.producer)
        return list(ts.static_order())

    def operator_order(self) -> list[str]:
        return [n for n in self.topological_order() if n in self._ops]

    def all_patterns(self) -> list[PatternSpec]:
        return [p for o in self.operators for p in o.patterns]

    def type_name(self, type_id: int) -> str:
        t = self.types.get(type_id)
        return t.name if t else str(type_id)


# ---------------------------------------------------------------------------
# validation and successor queries


def validate(topology: Topology) -> list[Violation]:
    """Check the structural invariants; returns one Violation per problem."""
    out: list[Violation] = []
    bad = lambda code, msg: out.append(Violation(code, msg))  # noqa: E731
    declared = set(topology.types)

    ids = [s.id for s in topology.sources] + [o.id for o in topology.operators] + [s.id for s in topology.sinks]
    for dup in sorted({i for i in ids if ids.count(i) > 1}):
        bad("DUPLICATE_NODE", f"node id {dup!r} used more than once")
    for tid, t in topology.types.items():
        if t.id != tid:
            bad("TYPE_ID_MISMATCH", f"type key {tid} holds id {t.id}")

    for s in topology.sources:
        for t in s.types:
            if t not in declared:
                bad("UNKNOWN_TYPE", f"source {s.id} emits undeclared type {t}")
        for t, r in s.rates.items():
            if r < 0:
                bad("NEGATIVE_RATE", f"source {s.id} has negative rate for type {t}")

    seen_patterns: set[str] = set()
    for o in topology.operators:
        if not o.patterns:
            bad("EMPTY_OPERATOR", f"operator {o.id} has no patterns")
        for p in o.patterns:
            if p.id in seen_patterns:
                bad("DUPLICATE_PATTERN", f"pattern id {p.id!r} is not unique")
            seen_patterns.add(p.id)
            for node in _walk(p.ast):
                if isinstance(node, _Composite) and len(node.children) < 2:
                    bad("ARITY", f"pattern {p.id}: {node.kind} needs at least two children")
                if isinstance(node, PropAtom):
                    bad("UNEXPANDED_PROPERTY", f"pattern {p.id} holds an unexpanded property atom")
            try:
                types = p.input_types
            except TopologyError:
                types = set()
            for t in sorted(types - declared):
                bad("UNKNOWN_TYPE", f"pattern {p.id} references undeclared type {t}")
            if p.output_type not in declared:
                bad("UNKNOWN_TYPE", f"pattern {p.id} outputs undeclared type {p.output_type}")
            if p.output_type in types:
                bad("SELF_LOOP", f"pattern {p.id} outputs one of its own input types")
            if not p.window_ms > 0:
                bad("BAD_WINDOW", f"pattern {p.id} window must be positive")
            if not (isinstance(p.f, int) and p.f >= 1):
                bad("BAD_MULTIPLIER", f"pattern {p.id} f must be an integer >= 1")
            if not p.ptime_us > 0:
                bad("BAD_PTIME", f"pattern {p.id} ptime must be positive")
            delivered = {t for e in topology.in_edges(o.id) for t in e.types}
            for t in sorted((types & declared) - delivered):
                bad("UNDELIVERED_TYPE", f"pattern {p.id} needs type {t} but no edge delivers it to {o.id}")

    producible = {t for s in topology.sources for t in s.types} | {
        p.output_type for p in topology.all_patterns()}
    for t in sorted(declared - producible):
        bad("ORPHAN_TYPE", f"type {t} is neither emitted by a source nor output by a pattern")

    nodes = set(ids)
    for e in topology.edges:
        if e.producer not in nodes or e.consumer not in nodes:
            bad("UNKNOWN_NODE", f"edge {e.producer}->{e.consumer} references an unknown node")
            continue
        if topology.is_sink(e.producer) or topology.is_source(e.consumer):
            bad("EDGE_DIRECTION", f"edge {e.producer}->{e.consumer} leaves a sink or enters a source")
            continue
        made = topology.produced_types(e.producer)
        for t in e.types:
            if t not in made:
                bad("EDGE_TYPE_NOT_PRODUCED", f"{e.producer} cannot produce type {t} for {e.consumer}")
            refined = {v for v, (base, _, _) in topology.virtual_types.items() if base == t}
            wanted = topology.operator(e.consumer).input_types if topology.is_operator(e.consumer) else None
            # a base type may travel only to feed its property refinements
            if wanted is not None and t not in wanted and not refined & wanted:
                bad("EDGE_TYPE_NOT_CONSUMED", f"{e.consumer} does not consume type {t}")

    for s in topology.sinks:
        if not topology.in_edges(s.id):
            bad("SINK_NO_INPUT", f"sink {s.id} has no incoming edge")
        if not s.weight > 0:
            bad("BAD_SINK_WEIGHT", f"sink {s.id} weight must be positive")

    try:
        topology.topological_order()
    except graphlib.CycleError as exc:
        bad("CYCLE", f"operator graph has a cycle through {exc.args[1]}")
    return out


def _walk(node: PatternNode) -> Iterator[PatternNode]:
    yield node
    if isinstance(node, _Composite):
        for c in node.children:
            yield from _walk(c)


def successors(topology: Topology, pattern_id: str) -> set[str]:
    """Nodes directly consuming a pattern's output (operators and sinks)."""
    op, pat = topology.pattern(pattern_id)
    return set(topology.consumers(op.id, pat.output_type))


def transitive_successors(topology: Topology, operator_id: str) -> set[str]:
    topology.operator(operator_id)
    found: set[str] = set()
    stack = [operator_id]
    while stack:
        node = stack.pop()
        for e in topology.out_edges(node):
            if topology.is_operator(e.consumer) and e.consumer not in found:
                found.add(e.consumer)
                stack.append(e.consumer)
    found.discard(operator_id)
    return found


def sink_feeding_patterns(topology: Topology) -> list[tuple[PatternSpec, str]]:
    """(pattern, sink id) for every pattern whose output reaches a sink."""
    out = []
    for o in topology.operators:
        for p in o.patterns:
            for c in topology.consumers(o.id, p.output_type):
                if topology.is_sink(c):
                    out.append((p, c))
    return out


# ---------------------------------------------------------------------------
# loading


def load_topology(path: str | Path) -> Topology:
    with open(path, "rb") as fh:
        return topology_from_dict(tomllib.load(fh))


def loads_topology(text: str) -> Topology:
    return topology_from_dict(tomllib.loads(text))


def topology_from_dict(doc: dict[str, Any]) -> Topology:
    types = {int(k): EventType(int(k), str(v)) for k, v in doc.get("types", {}).items()}
    by_name = {t.name: t.id for t in types.values()}
    virtual: dict[int, tuple[int, str, str]] = {}
    next_id = max(types, default=-1) + 1

    def expand(node: PatternNode) -> PatternNode:
        nonlocal next_id
        if isinstance(node, PropAtom):
            key = (node.base_type, node.attr, node.value)
            for vid, spec in virtual.items():
                if spec == key:
                    return Atom(vid)
            vid = next_id
            next_id += 1
            virtual[vid] = key
            name = f"{types[node.base_type].name if node.base_type in types else node.base_type}[{node.attr}={node.value}]"
            types[vid] = EventType(vid, name)
            by_name[name] = vid
            return Atom(vid)
        if isinstance(node, _Composite):
            return type(node)(tuple(expand(c) for c in node.children))
        return node

    operators = []
    for op_id, body in doc.get("operators", {}).items():
        pats = []
        for pid, p in body.get("patterns", {}).items():
            pats.append(PatternSpec(
                id=str(pid),
                ast=expand(parse_pattern(p["ast"])),
                window_ms=float(p["window_ms"]),
                output_type=int(p["output_type"]),
                ptime_us=float(p.get("ptime_us", p.get("ptime_model", 0.0))),
                f=int(p.get("f", 1)),
            ))
        operators.append(OperatorSpec(
            id=str(op_id),
            patterns=tuple(pats),
            latency_bound_ms=_opt_float(body.get("latency_bound_ms")),
            service_rate_hint=_opt_float(body.get("service_rate_hint")),
        ))

    def widen(ts: Iterable[int]) -> tuple[int, ...]:
        # a stream carrying a base type also carries its virtual refinements
        ts = list(ts)
        extra = [vid for vid, (base, _, _) in virtual.items() if base in ts and vid not in ts]
        return tuple(ts + extra)

    def type_key(k) -> int:
        k = str(k)
        return by_name[k] if k in by_name else int(k)

    sources = []
    for sid, body in doc.get("sources", {}).items():
        rates = {type_key(k): float(v) for k, v in body.get("rates", {}).items()}
        sources.append(Source(str(sid), widen(int(t) for t in body.get("types", [])), rates))

    sinks = []
    for sid, body in doc.get("sinks", {}).items():
        weight = body.get("weight", 1.0) if isinstance(body, dict) else body
        sinks.append(Sink(str(sid), float(weight)))

    edges = [Edge(str(e["from"]), str(e["to"]), widen(int(t) for t in e.get("types", [])))
             for e in doc.get("edges", [])]
    return Topology(types, sources, operators, sinks, edges, virtual)


def _opt_float(v) -> float | None:
    return None if v is None else float(v)


def running_example_path() -> Path:
    return Path(__file__).parent / "data" / "running_example.toml"


def running_example() -> Topology:
    """Four-operator, two-source, two-sink application (ω2 is the usual bottleneck)."""
    return load_topology(running_example_path())
