"""Mixed-integer linear programs: a small builder, branch-and-bound, LP-file export.

LP relaxations are solved with the HiGHS dual simplex; each child node is warm
started from its parent's basis. Node selection is best-bound (ties broken by
creation order) and branching picks the most fractional binary (ties broken by
the lowest variable index), so solves are deterministic.
"""

from __future__ import annotations

import heapq
import math
import re
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import highspy
import numpy as np

INT_TOL = 1e-6
SENSES = ("<=", ">=", "=")


class MilpError(ValueError):
    pass


@dataclass
class Row:
    idx: np.ndarray
    val: np.ndarray
    sense: str
    rhs: float
    name: str


@dataclass
class MilpProblem:
    """Minimize ``c x`` over declared variables subject to linear rows."""

    name: str = "problem"
    names: list[str] = field(default_factory=list)
    lb: list[float] = field(default_factory=list)
    ub: list[float] = field(default_factory=list)
    binary: list[bool] = field(default_factory=list)
    obj: list[float] = field(default_factory=list)
    rows: list[Row] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def num_vars(self) -> int:
        return len(self.names)

    @property
    def num_binaries(self) -> int:
        return sum(self.binary)

    def add_var(self, name: str, lb: float = 0.0, ub: float = math.inf,
                binary: bool = False, obj: float = 0.0) -> int:
        if binary:
            lb, ub = 0.0, 1.0
        if lb > ub:
            raise MilpError(f"variable {name}: lower bound {lb} exceeds upper bound {ub}")
        self.names.append(name)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.binary.append(bool(binary))
        self.obj.append(float(obj))
        return len(self.names) - 1

    def add_constr(self, coeffs: Mapping[int, float] | Iterable[tuple[int, float]],
                   sense: str, rhs: float, name: str | None = None) -> int:
        if sense not in SENSES:
            raise MilpError(f"unknown sense {sense!r}")
        items = coeffs.items() if isinstance(coeffs, Mapping) else coeffs
        merged: dict[int, float] = {}
        for i, v in items:
            if not 0 <= i < self.num_vars:
                raise MilpError(f"row references undeclared variable {i}")
            merged[i] = merged.get(i, 0.0) + float(v)
        idx = np.array(sorted(merged), dtype=int)
        val = np.array([merged[i] for i in idx], dtype=float)
        self.rows.append(Row(idx, val, sense, float(rhs), name or f"c{len(self.rows)}"))
        return len(self.rows) - 1

    def set_obj(self, i: int, coef: float) -> None:
        self.obj[i] = float(coef)

    def objective_value(self, x) -> float:
        return float(np.dot(self.obj, x))

    def max_violation(self, x) -> float:
        """Largest row or bound violation of the point ``x``."""
        x = np.asarray(x, float)
        worst = float(np.max(np.maximum(np.asarray(self.lb) - x, x - np.asarray(self.ub)), initial=0.0))
        for r in self.rows:
            a = float(r.val @ x[r.idx])
            v = {"<=": a - r.rhs, ">=": r.rhs - a, "=": abs(a - r.rhs)}[r.sense]
            worst = max(worst, v)
        return worst

    def arrays(self):
        """Column-wise sparse matrix and row bounds for a solver."""
        n, m = self.num_vars, len(self.rows)
        cols: list[list[tuple[int, float]]] = [[] for _ in range(n)]
        lo = np.full(m, -np.inf)
        hi = np.full(m, np.inf)
        for j, r in enumerate(self.rows):
            for i, v in zip(r.idx, r.val):
                if v != 0.0:
                    cols[i].append((j, v))
            if r.sense in ("<=", "="):
                hi[j] = r.rhs
            if r.sense in (">=", "="):
                lo[j] = r.rhs
        start = np.zeros(n + 1, dtype=np.int32)
        index, value = [], []
        for i, c in enumerate(cols):
            index += [j for j, _ in c]
            value += [v for _, v in c]
            start[i + 1] = len(index)
        return start, np.array(index, dtype=np.int32), np.array(value), lo, hi


@dataclass
class MilpSolution:
    status: str  # optimal | infeasible | unbounded | time_limit
    x: np.ndarray | None
    objective: float
    bound: float
    nodes: int

    @property
    def ok(self) -> bool:
        return self.x is not None


class _Relaxation:
    """One HiGHS instance reused across nodes by changing column bounds."""

    def __init__(self, p: MilpProblem):
        h = highspy.Highs()
        h.setOptionValue("output_flag", False)
        h.setOptionValue("presolve", "off")
        h.setOptionValue("solver", "simplex")
        h.setOptionValue("simplex_strategy", 1)
        h.setOptionValue("threads", 1)
        lp = highspy.HighsLp()
        n = p.num_vars
        start, index, value, lo, hi = p.arrays()
        lp.num_col_ = n
        lp.num_row_ = len(p.rows)
        lp.col_cost_ = np.asarray(p.obj, float)
        lp.col_lower_ = np.asarray(p.lb, float)
        lp.col_upper_ = np.asarray(p.ub, float)
        lp.row_lower_ = lo
        lp.row_upper_ = hi
        lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
        lp.a_matrix_.start_ = start
        lp.a_matrix_.index_ = index
        lp.a_matrix_.value_ = value
        h.passModel(lp)
        self.h = h
        self.n = n
        self.cols = np.arange(n, dtype=np.int32)

    def solve(self, lb, ub, basis=None):
        h = self.h
        h.changeColsBounds(self.n, self.cols, lb, ub)
        if basis is not None:
            h.setBasis(basis)
        h.run()
        st = h.getModelStatus()
        if st == highspy.HighsModelStatus.kUnboundedOrInfeasible:
            h.clearSolver()
            h.run()
            st = h.getModelStatus()
        if st == highspy.HighsModelStatus.kOptimal:
            x = np.array(h.getSolution().col_value)
            return "optimal", x, h.getInfo().objective_function_value, h.getBasis()
        if st == highspy.HighsModelStatus.kInfeasible:
            return "infeasible", None, math.inf, None
        if st in (highspy.HighsModelStatus.kUnbounded, highspy.HighsModelStatus.kUnboundedOrInfeasible):
            return "unbounded", None, -math.inf, None
        raise MilpError(f"LP relaxation ended with status {h.modelStatusToString(st)}")


def _most_fractional(x, bin_idx) -> int | None:
    frac = np.abs(x[bin_idx] - np.round(x[bin_idx]))
    k = int(np.argmax(frac))  # first maximum, i.e. the lowest index
    return int(bin_idx[k]) if frac[k] > INT_TOL else None


def solve(p: MilpProblem, gap: float = 1e-6, time_limit: float | None = None) -> MilpSolution:
    """Branch-and-bound to relative ``gap``.

    On timeout the best incumbent (if any) and the proven bound are returned
    with status ``time_limit``.
    """
    t0 = time.monotonic()
    n = p.num_vars
    if n == 0:
        feasible = all({"<=": 0 <= r.rhs, ">=": 0 >= r.rhs, "=": r.rhs == 0}[r.sense] for r in p.rows)
        return MilpSolution("optimal" if feasible else "infeasible", np.zeros(0) if feasible else None,
                            0.0 if feasible else math.inf, 0.0 if feasible else math.inf, 0)
    relax = _Relaxation(p)
    bin_idx = np.flatnonzero(p.binary)
    lb0, ub0 = np.asarray(p.lb, float), np.asarray(p.ub, float)

    best_x, best_obj = None, math.inf
    heap: list = []
    seq = 0
    nodes = 0

    st, x, obj, basis = relax.solve(lb0, ub0)
    nodes += 1
    if st == "unbounded":
        return MilpSolution("unbounded", None, -math.inf, -math.inf, nodes)
    if st == "infeasible":
        return MilpSolution("infeasible", None, math.inf, math.inf, nodes)
    heapq.heappush(heap, (obj, seq, lb0, ub0, x, basis))

    def cutoff():
        return best_obj - gap * max(1.0, abs(best_obj))

    timed_out = False
    while heap:
        bound, _, lb, ub, x, basis = heap[0]
        if bound >= cutoff():
            break
        if time_limit is not None and time.monotonic() - t0 > time_limit:
            timed_out = True
            break
        heapq.heappop(heap)
        j = _most_fractional(x, bin_idx) if bin_idx.size else None
        if j is None:
            if bound < best_obj:
                best_obj, best_x = bound, x
            continue
        for side in (0, 1):
            clb, cub = lb.copy(), ub.copy()
            clb[j] = cub[j] = float(side)
            st, cx, cobj, cbasis = relax.solve(clb, cub, basis)
            nodes += 1
            if st != "optimal" or cobj >= cutoff():
                continue
            if _most_fractional(cx, bin_idx) is None:
                if cobj < best_obj:
                    best_obj, best_x = cobj, cx
                continue
            seq += 1
            heapq.heappush(heap, (cobj, seq, clb, cub, cx, cbasis))

    bound = heap[0][0] if heap else best_obj
    bound = min(bound, best_obj)
    if best_x is not None:
        best_x = best_x.copy()
        best_x[bin_idx] = np.round(best_x[bin_idx])
    if timed_out:
        return MilpSolution("time_limit", best_x, best_obj, bound, nodes)
    if best_x is None:
        return MilpSolution("infeasible", None, math.inf, math.inf, nodes)
    return MilpSolution("optimal", best_x, best_obj, bound, nodes)


# ---------------------------------------------------------------------------
# LP file export

_NAME_OK = re.compile(r"[^A-Za-z0-9_.]")


def _lp_names(names: list[str], prefix: str) -> list[str]:
    out, seen = [], set()
    for i, nm in enumerate(names):
        s = _NAME_OK.sub("_", nm) or f"{prefix}{i}"
        if s[0].isdigit() or s[0] in "eE.":
            s = f"{prefix}_{s}"
        base, k = s, 1
        while s in seen:
            s = f"{base}_{k}"
            k += 1
        seen.add(s)
        out.append(s)
    return out


def _num(v: float) -> str:
    if math.isinf(v):
        return "+inf" if v > 0 else "-inf"
    return repr(float(v))


def _terms(pairs: Iterable[tuple[float, str]]) -> list[str]:
    out = []
    for v, nm in pairs:
        if v == 0.0:
            continue
        sign = "-" if v < 0 else "+"
        out.append(f"{sign} {_num(abs(v))} {nm}")
    return out


def _wrap(head: str, terms: list[str], tail: str = "") -> str:
    lines, cur = [], head
    for t in terms:
        if len(cur) + len(t) > 200:
            lines.append(cur)
            cur = "   "
        cur += " " + t
    cur += tail
    lines.append(cur)
    return "\n".join(lines)


def export_lp(p: MilpProblem) -> str:
    """The problem in CPLEX LP text format."""
    vn = _lp_names(p.names, "x")
    rn = _lp_names([r.name for r in p.rows], "c")
    out = [f"\\ Problem: {_NAME_OK.sub('_', p.name)}", "Minimize"]
    obj_terms = _terms(zip(p.obj, vn))
    out.append(_wrap(" obj:", obj_terms or ["0 " + vn[0]] if vn else []))
    out.append("Subject To")
    for r, name in zip(p.rows, rn):
        sense = {"<=": "<=", ">=": ">=", "=": "="}[r.sense]
        terms = _terms((v, vn[i]) for i, v in zip(r.idx, r.val))
        if not terms:
            if not vn:
                continue
            terms = ["0 " + vn[0]]
        out.append(_wrap(f" {name}:", terms, f" {sense} {_num(r.rhs)}"))
    bounds = []
    for nm, lo, hi, b in zip(vn, p.lb, p.ub, p.binary):
        if b:
            continue
        if math.isinf(lo) and lo < 0 and math.isinf(hi):
            bounds.append(f" {nm} free")
        elif lo == 0.0 and math.isinf(hi):
            continue
        else:
            bounds.append(f" {_num(lo)} <= {nm} <= {_num(hi)}")
    if bounds:
        out.append("Bounds")
        out += bounds
    bins = [nm for nm, b in zip(vn, p.binary) if b]
    if bins:
        out.append("Binaries")
        out.append(_wrap("", bins))
    out.append("End")
    return "\n".join(out) + "\n"
