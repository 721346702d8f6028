"""Quality-optimal shedding plans for one bottleneck operator.

Shedding variables exist only at the bottleneck; every other operator keeps
processing everything, which keeps the program linear. Output variables are
free for the bottleneck and its transitive successors and pinned to measured
rates elsewhere.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

from .lp import INF, LpProblem, LpSolution, solve
from .model import Topology, sink_feeding_patterns, transitive_successors
from .selectivity import Combine, Term, build_selectivity
from .shedding import ShedderConfig, Snapshot

log = logging.getLogger(__name__)

MAX_OR_BRANCHES = 8


def x_name(pattern_id: str, type_id: int) -> str:
    return f"x_{pattern_id}_{type_id}"


def y_name(pattern_id: str) -> str:
    return f"y_{pattern_id}"


def _arrival_expr(topology: Topology, snapshot: Snapshot, op_id: str, type_id: int,
                  free_ops: set[str]) -> tuple[dict[str, float], float]:
    """Arrival rate of a type at an operator as (linear part over y, constant)."""
    coeffs: dict[str, float] = {}
    const = 0.0
    for e in topology.in_edges(op_id):
        if type_id not in e.types:
            continue
        if topology.is_source(e.producer):
            rates = snapshot.source_rates.get(e.producer, {})
            if type_id not in rates:
                raise KeyError(f"snapshot lacks rate of type {type_id} at source {e.producer}")
            const += rates[type_id]
            continue
        for p in topology.operator(e.producer).patterns:
            if p.output_type != type_id:
                continue
            if e.producer in free_ops:
                coeffs[y_name(p.id)] = coeffs.get(y_name(p.id), 0.0) + 1.0
            else:
                if p.id not in snapshot.output_rates:
                    raise KeyError(f"snapshot lacks output rate of pattern {p.id}")
                const += snapshot.output_rates[p.id]
    return coeffs, const


def build_lp(topology: Topology, snapshot: Snapshot, bottleneck: str, p_star: float,
             objective: str = "global") -> list[LpProblem]:
    """One LP per combination of disjunction branches (usually exactly one)."""
    if objective not in ("global", "local"):
        raise ValueError(f"unknown objective {objective!r}")
    bott = topology.operator(bottleneck)
    free_ops = {bottleneck} | transitive_successors(topology, bottleneck)
    order = [o for o in topology.operator_order() if o in free_ops]

    selfns = {p.id: build_selectivity(p) for o in order for p in topology.operator(o).patterns}
    or_nodes = []
    for o in order:
        for p in topology.operator(o).patterns:
            or_nodes.extend((p.id, n) for n in selfns[p.id].or_nodes())
    choices = [range(len(n.parts)) for _, n in or_nodes]
    n_branches = math.prod(len(c) for c in choices) if choices else 1
    sum_mode = n_branches > MAX_OR_BRANCHES
    if sum_mode:
        log.warning("%d disjunction branches exceed the cap of %d; over-approximating max by sum",
                    n_branches, MAX_OR_BRANCHES)
        combos = [()]
    else:
        combos = list(itertools.product(*choices)) if choices else [()]

    problems = []
    for branch, combo in enumerate(combos):
        pick = {id(n): k for (_, n), k in zip(or_nodes, combo)}
        problems.append(_build_one(topology, snapshot, bott.id, p_star, objective, order, free_ops,
                                   selfns, pick, sum_mode, branch))
    return problems


def _build_one(topology, snapshot, bottleneck, p_star, objective, order, free_ops, selfns, pick,
               sum_mode, branch) -> LpProblem:
    lp = LpProblem(meta={"bottleneck": bottleneck, "p_star": p_star, "objective": objective,
                         "branch": branch, "x": {}, "y": {}, "x_cost": {}})
    bott = topology.operator(bottleneck)
    in_types = sorted(bott.input_types)
    for o in order:
        for p in topology.operator(o).patterns:
            lp.add_var(y_name(p.id))
            lp.meta["y"][y_name(p.id)] = p.id
    for p in bott.patterns:
        for t in in_types:
            lp.add_var(x_name(p.id, t), 0.0, 1.0)
            lp.meta["x"][x_name(p.id, t)] = (p.id, t)
    aux = itertools.count()

    def encode(expr, target: dict[str, float], scale: float, op_id: str, pattern_id: str) -> None:
        # adds rows enforcing  target <= scale * expr
        if isinstance(expr, Term):
            coeffs, const = _arrival_expr(topology, snapshot, op_id, expr.type_id, free_ops)
            row = dict(target)
            if op_id == bottleneck:
                if coeffs:
                    raise AssertionError("bottleneck input depends on a free variable; LP would be bilinear")
                xv = x_name(pattern_id, expr.type_id)
                row[xv] = row.get(xv, 0.0) - scale * const / expr.k
                lp.add_constraint(row, "<=", 0.0, f"sel_{pattern_id}_{expr.type_id}_{len(lp.constraints)}")
            else:
                for v, c in coeffs.items():
                    row[v] = row.get(v, 0.0) - scale * c / expr.k
                lp.add_constraint(row, "<=", scale * const / expr.k,
                                  f"sel_{pattern_id}_{expr.type_id}_{len(lp.constraints)}")
            return
        if expr.op == "min":
            for part in expr.parts:
                encode(part, target, scale, op_id, pattern_id)
            return
        if not sum_mode:
            encode(expr.parts[pick[id(expr)]], target, scale, op_id, pattern_id)
            return
        zs = []
        for part in expr.parts:
            z = lp.add_var(f"z_{pattern_id}_{next(aux)}")
            encode(part, {z: 1.0}, 1.0, op_id, pattern_id)
            zs.append(z)
        row = dict(target)
        for z in zs:
            row[z] = row.get(z, 0.0) - scale
        lp.add_constraint(row, "<=", 0.0, f"or_{pattern_id}_{len(lp.constraints)}")

    for o in order:
        op = topology.operator(o)
        mu = snapshot.mu(o)
        for p in op.patterns:
            y = y_name(p.id)
            fn = selfns[p.id]
            encode(fn.expr, {y: 1.0}, float(fn.f), o, p.id)
            if mu < INF:
                lp.add_constraint({y: 1.0}, "<=", p.f * mu, f"cap_{p.id}")

    # mean processing time at the bottleneck must not exceed p_star
    lam_t = snapshot.arrival_rates(bottleneck)
    lam = sum(lam_t.values())
    row = {}
    for p in bott.patterns:
        pt = snapshot.pattern_ptime(p.id)
        for t in in_types:
            share = lam_t.get(t, 0.0) / lam if lam > 0 else 0.0
            row[x_name(p.id, t)] = share * pt
            lp.meta["x_cost"][x_name(p.id, t)] = share * pt
    lp.add_constraint(row, "<=", p_star, "ptime")

    if objective == "global":
        for p, sink in sink_feeding_patterns(topology):
            w = topology.sink(sink).weight
            if y_name(p.id) in lp.variables:
                lp.objective[y_name(p.id)] = lp.objective.get(y_name(p.id), 0.0) + w
            else:
                lp.objective_constant += w * snapshot.output_rates.get(p.id, 0.0)
    else:
        for p in bott.patterns:
            lp.objective[y_name(p.id)] = 1.0
    return lp


def local_objective_variant(topology: Topology, snapshot: Snapshot, bottleneck: str,
                            p_star: float) -> list[LpProblem]:
    return build_lp(topology, snapshot, bottleneck, p_star, objective="local")


def extract_config(solution: LpSolution, problem: LpProblem) -> tuple[ShedderConfig, float]:
    if not solution.ok:
        raise ValueError(f"cannot extract a configuration from a {solution.status} solution")
    ratios = {}
    for name, (pid, t) in problem.meta["x"].items():
        ratios[(pid, t)] = min(1.0, max(0.0, solution.values[name]))
    return ShedderConfig(ratios), solution.objective


@dataclass
class Plan:
    config: ShedderConfig
    predicted_output: float
    status: str
    problem: LpProblem | None = None
    solution: LpSolution | None = None
    branch: int = 0
    iterations: int = 0
    # mean processing time the config induces, per the LP's own cost model
    planned_ptime: float = 0.0
    p_star: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def time_binding(self) -> bool:
        return self.planned_ptime >= self.p_star * (1 - 1e-6)


def _min_time_pass(problem: LpProblem, primal: LpSolution, method: str) -> LpSolution:
    """Among output-optimal points, shed as much as possible."""
    tied = LpProblem(dict(problem.variables), {}, 0.0, list(problem.constraints), problem.meta)
    target = primal.objective - problem.objective_constant
    tol = 0.0
    tied.add_constraint(dict(problem.objective), ">=", target - tol, "keep_output")
    tied.objective = {v: -c for v, c in problem.meta["x_cost"].items() if c}
    second = solve(tied, method)
    if not second.ok:
        return primal
    second.objective = problem.evaluate(second.values)
    return second


def optimize(topology: Topology, snapshot: Snapshot, bottleneck: str, p_star: float,
             objective: str = "global", method: str = "auto", tie_break: bool = True) -> Plan:
    """Build, solve and pick the best branch; returns the plan with c* and predicted output."""
    problems = build_lp(topology, snapshot, bottleneck, p_star, objective)
    best: tuple[LpProblem, LpSolution, int] | None = None
    iters = 0
    statuses = []
    for i, prob in enumerate(problems):
        sol = solve(prob, method)
        iters += sol.iterations
        statuses.append(sol.status)
        if sol.ok and (best is None or sol.objective > best[1].objective + 1e-12):
            best = (prob, sol, i)
    if best is None:
        status = "unbounded" if "unbounded" in statuses else (
            "infeasible" if "infeasible" in statuses else "numerical_failure")
        return Plan(ShedderConfig(), math.nan, status, problems[0], None, iterations=iters, p_star=p_star)
    prob, sol, branch = best
    if tie_break:
        sol = _min_time_pass(prob, sol, method)
    config, value = extract_config(sol, prob)
    planned = sum(c * sol.values[v] for v, c in prob.meta["x_cost"].items())
    return Plan(config, value, "optimal", prob, sol, branch, iters + sol.iterations, planned, p_star)
