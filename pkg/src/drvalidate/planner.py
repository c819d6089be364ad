"""Disturbance-robust STL planning over decoupled double integrators.

The planner state holds one configuration coordinate per planning dimension
(positions in the inertial frame, Euler angles) and its rate. Inputs are
generalized forces per dimension, discretized with an exact zero-order hold.

The optimization maximizes the disturbance-robustness degree ``alpha`` and the
spatial robustness ``rho`` of the specification at time 0, with a small fuel
penalty: minimize ``-alpha - c1 rho + c2 sum|u|`` subject to
``H u_k <= b - alpha t`` where ``t`` are the tightening coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import milp, stl
from .dynamics import euler_to_quat
from .polytope import (Polytope, alpha_max_for_zero_input, check_assumption2,
                       tightening_coefficients)
from .stl import (Always, And, Eventually, Formula, Not, Or, Pred, Signal, TrueF, Until,
                  canonical_dim)

BIG_M_MARGIN = 0.1
ALPHA_CAP = 1e3
ANGLE_DIMS = ("roll", "pitch", "yaw")


class PlanningError(RuntimeError):
    pass


class InfeasibleError(PlanningError):
    pass


@dataclass(frozen=True, eq=False)
class PlanningProblem:
    spec: Formula
    dims: tuple[str, ...]
    inertia: np.ndarray  # mass or moment of inertia per dimension
    U: Polytope
    K: np.ndarray | None
    dbar: np.ndarray
    dt: float
    N: int
    x0: np.ndarray  # configuration then rates, length 2 * len(dims)
    workspace_lo: np.ndarray
    workspace_hi: np.ndarray
    final_lo: np.ndarray | None = None
    final_hi: np.ndarray | None = None
    final_rest: bool = False
    c1: float = 1e3
    c2: float = 1e-3
    rho_min: float = 0.0

    def __post_init__(self):
        dims = tuple(canonical_dim(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        n = len(dims)
        arr = lambda a: None if a is None else np.asarray(a, float).reshape(-1)
        for name in ("inertia", "dbar", "x0", "workspace_lo", "workspace_hi", "final_lo", "final_hi"):
            object.__setattr__(self, name, arr(getattr(self, name)))
        if self.U.dim != n or self.inertia.size != n or self.dbar.size != n:
            raise PlanningError("input set, inertia and disturbance bound must match the planning dims")
        if self.x0.size != 2 * n:
            raise PlanningError(f"x0 must have {2 * n} entries")
        if np.any(self.inertia <= 0):
            raise PlanningError("inertia must be positive")
        if not (np.all(np.isfinite(self.workspace_lo)) and np.all(np.isfinite(self.workspace_hi))):
            raise PlanningError("workspace bounds must be finite for the big-M encoding")
        if not self.dt > 0 or self.N < 1:
            raise PlanningError("need dt > 0 and N >= 1")

    @property
    def ndim(self) -> int:
        return len(self.dims)


@dataclass
class Plan:
    dt: float
    dims: tuple[str, ...]
    states: np.ndarray  # (N+1, 2n): configuration then rates
    inputs: np.ndarray  # (N, n) generalized forces in the planner frame
    alpha: float
    rho: float
    fuel: float
    inertia: np.ndarray
    objective: float = math.nan
    wrenches: np.ndarray | None = None  # (N+1, 6) body wrenches, set after transfer
    info: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return len(self.inputs)

    @property
    def configs(self) -> np.ndarray:
        return self.states[:, : len(self.dims)]

    @property
    def rates(self) -> np.ndarray:
        return self.states[:, len(self.dims):]

    @property
    def accelerations(self) -> np.ndarray:
        return self.inputs / self.inertia

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.states)) * self.dt

    def signal(self) -> Signal:
        return Signal.uniform(self.configs, self.dt)

    def poses(self) -> tuple[np.ndarray, np.ndarray]:
        return poses_from_configs(self.dims, self.configs)

    def to_dict(self) -> dict:
        out = {
            "dt": self.dt, "dims": list(self.dims), "alpha": self.alpha, "rho": self.rho,
            "fuel": self.fuel, "inertia": self.inertia.tolist(),
            "states": self.states.tolist(), "inputs": self.inputs.tolist(),
        }
        if self.wrenches is not None:
            out["wrenches"] = self.wrenches.tolist()
        return out


def poses_from_configs(dims, configs) -> tuple[np.ndarray, np.ndarray]:
    """Positions (n, 3) and quaternions (n, 4) from planner configurations."""
    configs = np.atleast_2d(np.asarray(configs, float))
    full = {d: np.zeros(len(configs)) for d in ("x", "y", "z") + ANGLE_DIMS}
    for i, d in enumerate(dims):
        full[canonical_dim(d)] = configs[:, i]
    pos = np.column_stack([full["x"], full["y"], full["z"]])
    quats = np.array([euler_to_quat(r, p, y) for r, p, y in zip(full["roll"], full["pitch"], full["yaw"])])
    return pos, quats


def zoh_matrices(inertia: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact discretization of ``q'' = u / inertia`` over one step."""
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([0.5 * dt * dt, dt]) / inertia
    return A, B


# ---------------------------------------------------------------------------
# Robustness encoding


@dataclass
class _Term:
    """Affine expression ``sum coef * var + const`` with interval bounds, or a constant."""

    coefs: dict
    const: float
    lo: float
    hi: float

    @property
    def is_const(self) -> bool:
        return not self.coefs


def _const(v: float) -> _Term:
    return _Term({}, v, v, v)


class _Encoder:
    def __init__(self, p: milp.MilpProblem, pos_vars, lo, hi, N, dt):
        self.p = p
        self.pos = pos_vars
        self.lo, self.hi = lo, hi
        self.N = N
        self.dt = dt
        self.memo: dict = {}
        self.n_bin = 0

    def leaf(self, pred: Pred, k: int, neg: bool) -> _Term:
        a = -np.asarray(pred.a) if neg else np.asarray(pred.a)
        c = -pred.c if neg else pred.c
        coefs = {self.pos[k][i]: float(ai) for i, ai in enumerate(a) if ai != 0.0}
        lo = c + float(np.sum(np.minimum(a * self.lo, a * self.hi)))
        hi = c + float(np.sum(np.maximum(a * self.lo, a * self.hi)))
        return _Term(coefs, float(c), lo, hi)

    def combine(self, kind: str, terms: list[_Term], tag: str) -> _Term:
        """Lower-bounding encoding of ``min`` (kind 'and') or ``max`` (kind 'or')."""
        absorbing = -math.inf if kind == "and" else math.inf
        neutral = -absorbing
        kept = []
        for t in terms:
            if t.is_const and t.const == absorbing:
                return _const(absorbing)
            if t.is_const and t.const == neutral:
                continue
            kept.append(t)
        if not kept:
            return _const(neutral)
        consts = [t.const for t in kept if t.is_const]
        affine = [t for t in kept if not t.is_const]
        red = min if kind == "and" else max
        if consts:
            c = red(consts)
            if not affine:
                return _const(c)
            affine.append(_const(c))
        if len(affine) == 1:
            return affine[0]
        lo = red(t.lo for t in affine)
        hi = red(t.hi for t in affine)
        p = self.p
        r = p.add_var(f"r_{tag}_{p.num_vars}", lo, hi)
        if kind == "and":
            for t in affine:
                row = {r: 1.0}
                for v, c in t.coefs.items():
                    row[v] = row.get(v, 0.0) - c
                p.add_constr(row, "<=", t.const)
        else:
            zs = []
            for t in affine:
                z = p.add_var(f"z_{tag}_{p.num_vars}", binary=True)
                self.n_bin += 1
                zs.append(z)
                big_m = (hi - t.lo) * (1.0 + BIG_M_MARGIN) + 1e-6
                row = {r: 1.0, z: big_m}
                for v, c in t.coefs.items():
                    row[v] = row.get(v, 0.0) - c
                p.add_constr(row, "<=", t.const + big_m)
            p.add_constr({z: 1.0 for z in zs}, "=", 1.0)
        return _Term({r: 1.0}, 0.0, lo, hi)

    def at(self, k: int):
        if k > self.N:
            raise PlanningError(f"specification needs sample {k} but the horizon has {self.N} steps")

    def enc(self, f: Formula, k: int, neg: bool) -> _Term:
        key = (id(f), k, neg)
        if key in self.memo:
            return self.memo[key]
        self.at(k)
        out = self._enc(f, k, neg)
        self.memo[key] = out
        return out

    def _enc(self, f: Formula, k: int, neg: bool) -> _Term:
        conj_kind, disj_kind = ("or", "and") if neg else ("and", "or")
        if isinstance(f, TrueF):
            return _const(-math.inf if neg else math.inf)
        if isinstance(f, Pred):
            return self.leaf(f, k, neg)
        if isinstance(f, Not):
            return self.enc(f.child, k, not neg)
        if isinstance(f, And):
            return self.combine(conj_kind, [self.enc(c, k, neg) for c in f.args], f"and{k}")
        if isinstance(f, Or):
            return self.combine(disj_kind, [self.enc(c, k, neg) for c in f.args], f"or{k}")
        if isinstance(f, Eventually):
            a, b = stl.window(f.interval, self.dt, "eventually")
            if a > b:
                raise stl.EmptyWindowError(f"interval {f.interval} contains no sample at dt={self.dt}")
            return self.combine(disj_kind, [self.enc(f.child, k + j, neg) for j in range(a, b + 1)],
                                f"ev{k}")
        if isinstance(f, Always):
            a, b = stl.window(f.interval, self.dt, "always")
            if a > b:
                return _const(-math.inf if neg else math.inf)
            return self.combine(conj_kind, [self.enc(f.child, k + j, neg) for j in range(a, b + 1)],
                                f"al{k}")
        if isinstance(f, Until):
            a, b = stl.window(f.interval, self.dt, "eventually")
            if a > b:
                raise stl.EmptyWindowError(f"interval {f.interval} contains no sample at dt={self.dt}")
            branches = []
            for j in range(a, b + 1):
                parts = [self.enc(f.right, k + j, neg)] + [self.enc(f.left, k + s, neg) for s in range(j + 1)]
                branches.append(self.combine(conj_kind, parts, f"un{k}_{j}"))
            return self.combine(disj_kind, branches, f"un{k}")
        raise TypeError(f"unknown formula node {type(f).__name__}")


# ---------------------------------------------------------------------------
# Problem assembly


def alpha_upper(prob: PlanningProblem) -> float:
    return min(alpha_max_for_zero_input(prob.U, prob.K, prob.dbar), ALPHA_CAP)


def encode(prob: PlanningProblem, alpha_fixed: float | None = None) -> milp.MilpProblem:
    """Build the MILP. ``alpha_fixed`` pins alpha (used by oracles and audits)."""
    if stl.horizon(prob.spec) > prob.N * prob.dt + 1e-9:
        raise PlanningError(f"specification horizon {stl.horizon(prob.spec)} exceeds "
                            f"the planning horizon {prob.N * prob.dt}")
    if not check_assumption2(prob.U, prob.K, prob.dbar):
        raise PlanningError("the disturbance set is not cancellable inside the input set")
    n, N, dt = prob.ndim, prob.N, prob.dt
    p = milp.MilpProblem("stl_plan")
    pos = [[p.add_var(f"p_{k}_{prob.dims[i]}", prob.workspace_lo[i], prob.workspace_hi[i])
            for i in range(n)] for k in range(N + 1)]
    vel = [[p.add_var(f"v_{k}_{prob.dims[i]}", -math.inf, math.inf) for i in range(n)]
           for k in range(N + 1)]
    u = [[p.add_var(f"u_{k}_{prob.dims[i]}", -math.inf, math.inf) for i in range(n)] for k in range(N)]
    s = [[p.add_var(f"s_{k}_{prob.dims[i]}", 0.0, math.inf, obj=prob.c2) for i in range(n)]
         for k in range(N)]
    a_hi = alpha_upper(prob)
    if alpha_fixed is not None:
        if alpha_fixed > a_hi + 1e-12:
            raise PlanningError(f"alpha {alpha_fixed} exceeds the zero-input cap {a_hi}")
        alpha = p.add_var("alpha", alpha_fixed, alpha_fixed, obj=-1.0)
    else:
        alpha = p.add_var("alpha", 0.0, a_hi, obj=-1.0)

    for i in range(n):
        for var, val in ((pos[0][i], prob.x0[i]), (vel[0][i], prob.x0[n + i])):
            if var == pos[0][i] and not prob.workspace_lo[i] - 1e-9 <= val <= prob.workspace_hi[i] + 1e-9:
                raise PlanningError("initial state lies outside the workspace")
            p.lb[var] = p.ub[var] = float(val)
    if prob.final_lo is not None:
        for i in range(n):
            p.lb[pos[N][i]] = max(p.lb[pos[N][i]], prob.final_lo[i])
            p.ub[pos[N][i]] = min(p.ub[pos[N][i]], prob.final_hi[i])
            if p.lb[pos[N][i]] > p.ub[pos[N][i]]:
                raise InfeasibleError("final box does not meet the workspace")
    if prob.final_rest:
        for i in range(n):
            p.lb[vel[N][i]] = p.ub[vel[N][i]] = 0.0

    for k in range(N):
        for i in range(n):
            A, B = zoh_matrices(prob.inertia[i], dt)
            p.add_constr({pos[k + 1][i]: 1.0, pos[k][i]: -A[0, 0], vel[k][i]: -A[0, 1], u[k][i]: -B[0]},
                         "=", 0.0, f"dyn_p_{k}_{i}")
            p.add_constr({vel[k + 1][i]: 1.0, vel[k][i]: -A[1, 1], u[k][i]: -B[1]},
                         "=", 0.0, f"dyn_v_{k}_{i}")
            p.add_constr({s[k][i]: 1.0, u[k][i]: -1.0}, ">=", 0.0)
            p.add_constr({s[k][i]: 1.0, u[k][i]: 1.0}, ">=", 0.0)

    t = tightening_coefficients(prob.U, prob.K, prob.dbar)
    for k in range(N):
        for r in range(len(prob.U.b)):
            row = {u[k][i]: float(prob.U.H[r, i]) for i in range(n) if prob.U.H[r, i] != 0.0}
            if t[r] != 0.0:
                row[alpha] = float(t[r])
            p.add_constr(row, "<=", float(prob.U.b[r]), f"tight_{k}_{r}")

    enc = _Encoder(p, pos, prob.workspace_lo, prob.workspace_hi, N, dt)
    root = enc.enc(prob.spec, 0, False)
    if root.is_const and root.const == -math.inf:
        raise InfeasibleError("specification is unsatisfiable")
    if root.is_const and root.const == math.inf:
        rho = p.add_var("rho", prob.rho_min, max(prob.rho_min, 0.0), obj=-prob.c1)
    else:
        if root.hi < prob.rho_min:
            raise InfeasibleError("specification cannot reach the required robustness in the workspace")
        rho = p.add_var("rho", prob.rho_min, root.hi, obj=-prob.c1)
        row = {rho: 1.0}
        for v, c in root.coefs.items():
            row[v] = row.get(v, 0.0) - c
        p.add_constr(row, "<=", root.const, "rho_root")
    p.meta.update(pos=pos, vel=vel, u=u, s=s, alpha=alpha, rho=rho, tightening=t,
                  n_spec_binaries=enc.n_bin)
    return p


def decode(prob: PlanningProblem, p: milp.MilpProblem, x: np.ndarray) -> Plan:
    m = p.meta
    n = prob.ndim
    states = np.array([[x[m["pos"][k][i]] for i in range(n)] + [x[m["vel"][k][i]] for i in range(n)]
                       for k in range(prob.N + 1)])
    inputs = np.array([[x[m["u"][k][i]] for i in range(n)] for k in range(prob.N)])
    return Plan(prob.dt, prob.dims, states, inputs, float(x[m["alpha"]]), float(x[m["rho"]]),
                float(np.sum(np.abs(inputs))), prob.inertia.copy(), p.objective_value(x))


def dynamics_residual(plan: Plan) -> float:
    n = len(plan.dims)
    worst = 0.0
    for i in range(n):
        A, B = zoh_matrices(plan.inertia[i], plan.dt)
        xi = plan.states[:, [i, n + i]]
        pred = xi[:-1] @ A.T + np.outer(plan.inputs[:, i], B)
        worst = max(worst, float(np.max(np.abs(pred - xi[1:]))))
    return worst


def tightened_violation(plan: Plan, U: Polytope, K, dbar) -> float:
    t = tightening_coefficients(U, K, dbar)
    return float(np.max(plan.inputs @ U.H.T - (U.b - plan.alpha * t)))


def validate_plan(prob: PlanningProblem, plan: Plan, tol: float = 1e-6) -> dict:
    res = dynamics_residual(plan)
    viol = tightened_violation(plan, prob.U, prob.K, prob.dbar)
    rob = stl.robustness(prob.spec, plan.signal(), 0.0)
    out = {"dynamics_residual": res, "input_violation": viol, "robustness": rob}
    problems = []
    if res > tol:
        problems.append(f"dynamics residual {res:.3g}")
    if viol > tol:
        problems.append(f"tightened input violation {viol:.3g}")
    if rob < plan.rho - tol or rob < min(0.0, prob.rho_min) - tol:
        problems.append(f"independent robustness {rob:.10g} below encoded {plan.rho:.10g}")
    if problems:
        raise PlanningError("plan failed post-validation: " + "; ".join(problems))
    return out


def plan(prob: PlanningProblem, gap: float = 1e-6, time_limit: float | None = None) -> Plan:
    p = encode(prob)
    sol = milp.solve(p, gap=gap, time_limit=time_limit)
    if sol.status == "infeasible":
        raise InfeasibleError("no plan satisfies the specification with nonnegative robustness")
    if sol.x is None:
        raise PlanningError(f"solver ended with status {sol.status} and no incumbent")
    out = decode(prob, p, sol.x)
    out.info.update(status=sol.status, bound=sol.bound, nodes=sol.nodes, binaries=p.num_binaries,
                    variables=p.num_vars, constraints=len(p.rows))
    out.info.update(validate_plan(prob, out))
    return out
