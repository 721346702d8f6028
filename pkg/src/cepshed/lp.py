"""Linear programs: a small symbolic container and solvers for it.

``solve`` runs a dense two-phase tableau simplex with Bland's rule. Large
problems (the scalability benchmark) go to HiGHS through scipy instead;
``method`` picks explicitly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

INF = math.inf
FEAS_TOL = 1e-9
OPT_TOL = 1e-9

# problems with more tableau cells than this go to HiGHS under method="auto"
AUTO_DENSE_LIMIT = 60_000


@dataclass
class Constraint:
    coeffs: dict[str, float]
    sense: str  # "<=", ">=", "="
    rhs: float
    name: str = ""

    def activity(self, values: dict[str, float]) -> float:
        return sum(c * values[v] for v, c in self.coeffs.items())


@dataclass
class LpProblem:
    """Maximize ``objective . x + objective_constant`` subject to linear rows."""

    variables: dict[str, tuple[float, float]] = field(default_factory=dict)
    objective: dict[str, float] = field(default_factory=dict)
    objective_constant: float = 0.0
    constraints: list[Constraint] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add_var(self, name: str, lower: float = 0.0, upper: float = INF) -> str:
        if name in self.variables:
            raise ValueError(f"duplicate variable {name}")
        self.variables[name] = (lower, upper)
        return name

    def add_constraint(self, coeffs: dict[str, float], sense: str, rhs: float, name: str = "") -> None:
        if sense not in ("<=", ">=", "="):
            raise ValueError(f"bad relation {sense!r}")
        coeffs = {v: c for v, c in coeffs.items() if c != 0.0}
        self.constraints.append(Constraint(coeffs, sense, float(rhs), name or f"c{len(self.constraints)}"))

    def check(self) -> None:
        for c in self.constraints:
            for v in c.coeffs:
                if v not in self.variables:
                    raise ValueError(f"constraint {c.name} uses undeclared variable {v}")
        for v in self.objective:
            if v not in self.variables:
                raise ValueError(f"objective uses undeclared variable {v}")

    def evaluate(self, values: dict[str, float]) -> float:
        return self.objective_constant + sum(c * values[v] for v, c in self.objective.items())

    def violations(self, values: dict[str, float], tol: float = FEAS_TOL) -> list[str]:
        bad = []
        for v, (lo, hi) in self.variables.items():
            x = values[v]
            if x < lo - tol * (1 + abs(lo)) or x > hi + tol * (1 + abs(hi if hi < INF else 0)):
                bad.append(f"{v}={x} outside [{lo}, {hi}]")
        for c in self.constraints:
            act = c.activity(values)
            scale = 1.0 + abs(c.rhs) + sum(abs(a * values[v]) for v, a in c.coeffs.items())
            slack = tol * scale
            ok = {"<=": act <= c.rhs + slack, ">=": act >= c.rhs - slack, "=": abs(act - c.rhs) <= slack}[c.sense]
            if not ok:
                bad.append(f"{c.name}: {act} {c.sense} {c.rhs}")
        return bad

    def to_lp_text(self) -> str:
        """CPLEX LP format, readable by most external solvers."""

        def expr(coeffs: dict[str, float]) -> str:
            if not coeffs:
                return "0"
            parts = []
            for i, (v, c) in enumerate(coeffs.items()):
                sign = "-" if c < 0 else ("+" if i else "")
                parts.append(f"{sign} {abs(c):.12g} {v}".strip())
            return " ".join(parts)

        lines = ["\\ constant term of objective: %.12g" % self.objective_constant, "Maximize", " obj: " + expr(self.objective),
                 "Subject To"]
        for c in self.constraints:
            lines.append(f" {c.name}: {expr(c.coeffs)} {c.sense} {c.rhs:.12g}")
        lines.append("Bounds")
        for v, (lo, hi) in self.variables.items():
            hi_s = "+inf" if hi == INF else f"{hi:.12g}"
            lines.append(f" {lo:.12g} <= {v} <= {hi_s}")
        lines.append("End")
        return "\n".join(lines) + "\n"


@dataclass
class LpSolution:
    status: str  # optimal | infeasible | unbounded | numerical_failure
    values: dict[str, float] = field(default_factory=dict)
    objective: float = math.nan
    iterations: int = 0
    method: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def solve(problem: LpProblem, method: str = "auto", max_iter: int = 50_000) -> LpSolution:
    problem.check()
    names = list(problem.variables)
    if method == "auto":
        rows = len(problem.constraints) + sum(1 for lo, hi in problem.variables.values() if hi < INF)
        method = "simplex" if (rows + 1) * (2 * len(names) + rows + 1) <= AUTO_DENSE_LIMIT else "highs"
    if method == "simplex":
        sol = _solve_simplex(problem, names, max_iter)
    elif method == "highs":
        sol = _solve_highs(problem, names)
    else:
        raise ValueError(f"unknown method {method!r}")
    sol.method = method
    if sol.ok:
        problem_bad = problem.violations(sol.values)
        if problem_bad:
            return LpSolution("numerical_failure", sol.values, math.nan, sol.iterations, method)
        sol.objective = problem.evaluate(sol.values)
    return sol


# ---------------------------------------------------------------------------
# dense two-phase simplex


def _standard_rows(problem: LpProblem, names: list[str]):
    """Rows (a, sense, b) over nonnegative columns z with x = offset + M @ z.

    Finite lower bound: x = lo + z. Only an upper bound: x = hi - z.
    Free: x = z+ - z-. Two-sided bounds add an explicit row.
    """
    n = len(names)
    idx = {v: i for i, v in enumerate(names)}
    offset = np.zeros(n)
    cols = []  # (variable index, sign)
    for i, v in enumerate(names):
        lo, hi = problem.variables[v]
        if lo > -INF:
            offset[i] = lo
            cols.append((i, 1.0))
        elif hi < INF:
            offset[i] = hi
            cols.append((i, -1.0))
        else:
            cols += [(i, 1.0), (i, -1.0)]
    M = np.zeros((n, len(cols)))
    for j, (i, sign) in enumerate(cols):
        M[i, j] = sign
    rows = []
    for c in problem.constraints:
        a = np.zeros(n)
        for v, coef in c.coeffs.items():
            a[idx[v]] += coef
        rows.append((a @ M, c.sense, c.rhs - float(a @ offset)))
    for j, (i, sign) in enumerate(cols):
        lo, hi = problem.variables[names[i]]
        if lo > -INF and hi < INF:
            a = np.zeros(len(cols))
            a[j] = 1.0
            rows.append((a, "<=", hi - lo))
    return rows, offset, M


def _pivot(T: np.ndarray, r: int, c: int) -> None:
    T[r] /= T[r, c]
    col = T[:, c].copy()
    col[r] = 0.0
    T -= np.outer(col, T[r])
    T[:, c] = 0.0
    T[r, c] = 1.0


def _run(T: np.ndarray, basis: list[int], cost: np.ndarray, allowed: int, max_iter: int):
    """Maximize cost over the tableau T (last column = rhs). Returns (status, iters)."""
    m = T.shape[0]
    iters = 0
    while True:
        cb = cost[basis]
        reduced = cb @ T[:, :allowed] - cost[:allowed]
        entering = next((j for j in range(allowed) if reduced[j] < -OPT_TOL), None)
        if entering is None:
            return "optimal", iters
        col = T[:, entering]
        best, leave = INF, None
        for i in range(m):
            if col[i] > FEAS_TOL:
                ratio = T[i, -1] / col[i]
                if ratio < best - 1e-12 or (abs(ratio - best) <= 1e-12 and basis[i] < basis[leave]):
                    best, leave = ratio, i
        if leave is None:
            return "unbounded", iters
        _pivot(T, leave, entering)
        basis[leave] = entering
        iters += 1
        if iters >= max_iter:
            return "numerical_failure", iters


def _solve_simplex(problem: LpProblem, names: list[str], max_iter: int) -> LpSolution:
    rows, offset, M = _standard_rows(problem, names)
    n = M.shape[1]
    c = np.array([problem.objective.get(v, 0.0) for v in names]) @ M
    norm = []
    for a, sense, b in rows:
        if b < 0:
            a, b = -a, -b
            sense = {"<=": ">=", ">=": "<=", "=": "="}[sense]
        norm.append((a, sense, b))
    m = len(norm)
    n_slack = sum(1 for _, s, _ in norm if s != "=")
    n_art = sum(1 for _, s, _ in norm if s != "<=")
    width = n + n_slack + n_art
    T = np.zeros((m, width + 1))
    basis = []
    s_col, a_col = n, n + n_slack
    art_cols = []
    for i, (a, sense, b) in enumerate(norm):
        T[i, :n] = a
        T[i, -1] = b
        if sense == "<=":
            T[i, s_col] = 1.0
            basis.append(s_col)
            s_col += 1
        elif sense == ">=":
            T[i, s_col] = -1.0
            s_col += 1
            T[i, a_col] = 1.0
            basis.append(a_col)
            art_cols.append(a_col)
            a_col += 1
        else:
            T[i, a_col] = 1.0
            basis.append(a_col)
            art_cols.append(a_col)
            a_col += 1

    iters = 0
    if n_art:
        phase1 = np.zeros(width)
        phase1[n + n_slack:] = -1.0
        status, it = _run(T, basis, phase1, width, max_iter)
        iters += it
        if status != "optimal":
            return LpSolution("numerical_failure", iterations=iters)
        if -phase1[basis] @ T[:, -1] > FEAS_TOL * (1 + np.abs(T[:, -1]).sum()):
            return LpSolution("infeasible", iterations=iters)
        # drive remaining zero-level artificials out of the basis
        keep = []
        for i in range(T.shape[0]):
            if basis[i] >= n + n_slack:
                j = next((j for j in range(n + n_slack) if abs(T[i, j]) > 1e-9), None)
                if j is None:
                    continue  # redundant row
                _pivot(T, i, j)
                basis[i] = j
            keep.append(i)
        T = T[keep]
        basis = [basis[i] for i in keep]
    T = np.delete(T, np.s_[n + n_slack:width], axis=1)
    cost = np.concatenate([c, np.zeros(n_slack)])
    status, it = _run(T, basis, cost, n + n_slack, max_iter - iters)
    iters += it
    if status != "optimal":
        return LpSolution(status, iterations=iters)
    x = np.zeros(n + n_slack)
    x[basis] = T[:, -1]
    full = offset + M @ x[:n]
    values = {}
    for j, v in enumerate(names):
        lo, hi = problem.variables[v]
        values[v] = float(min(max(full[j], lo), hi))
    return LpSolution("optimal", values, iterations=iters)


# ---------------------------------------------------------------------------
# HiGHS through scipy


def _solve_highs(problem: LpProblem, names: list[str]) -> LpSolution:
    from scipy.optimize import linprog
    from scipy.sparse import coo_matrix

    idx = {v: i for i, v in enumerate(names)}
    ub_r, ub_c, ub_v, b_ub = [], [], [], []
    eq_r, eq_c, eq_v, b_eq = [], [], [], []
    for c in problem.constraints:
        if c.sense == "=":
            k = len(b_eq)
            for v, a in c.coeffs.items():
                eq_r.append(k), eq_c.append(idx[v]), eq_v.append(a)
            b_eq.append(c.rhs)
        else:
            sign = 1.0 if c.sense == "<=" else -1.0
            k = len(b_ub)
            for v, a in c.coeffs.items():
                ub_r.append(k), ub_c.append(idx[v]), ub_v.append(sign * a)
            b_ub.append(sign * c.rhs)
    n = len(names)
    A_ub = coo_matrix((ub_v, (ub_r, ub_c)), shape=(len(b_ub), n)).tocsr() if b_ub else None
    A_eq = coo_matrix((eq_v, (eq_r, eq_c)), shape=(len(b_eq), n)).tocsr() if b_eq else None
    cost = np.array([-problem.objective.get(v, 0.0) for v in names])
    bounds = [(lo, None if hi == INF else hi) for lo, hi in problem.variables.values()]
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub or None, A_eq=A_eq, b_eq=b_eq or None, bounds=bounds,
                  method="highs-ds", options={"primal_feasibility_tolerance": FEAS_TOL,
                                              "dual_feasibility_tolerance": OPT_TOL})
    status = {0: "optimal", 2: "infeasible", 3: "unbounded"}.get(res.status, "numerical_failure")
    if status != "optimal":
        return LpSolution(status, iterations=int(getattr(res, "nit", 0) or 0))
    values = {}
    for v, x in zip(names, res.x):
        lo, hi = problem.variables[v]
        values[v] = float(min(max(x, lo), hi))
    return LpSolution("optimal", values, iterations=int(res.nit))
