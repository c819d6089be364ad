"""Plan tracking MPC as one linear time-varying QP per tick.

The error state holds, for each active degree of freedom, the configuration
error (position offset, or small-angle body rotation for attitude) and the
body-velocity error. RK4 dynamics are linearized by central differences along
the reference and condensed into a dense QP over the input sequence.

In ``underwater_equivalent`` mode the controller still predicts with the space
model, but additionally constrains the transformed wrench
``feedback_equivalence_input(x, u)`` to the underwater input set, and the
applied wrench is that transformed input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import quadprog

from .dynamics import (P, Q, V, W, RigidBodyModel, attitude_error, cross, disturbance_frame,
                       feedback_equivalence_input, make_state, quat_exp, quat_mul, quat_to_rot,
                       rk4_step)
from .planner import Plan, poses_from_configs
from .polytope import Polytope

MODES = ("space", "underwater_equivalent")
FD_STEP = 1e-6
SLACK_QUAD = 1e-6
FALLBACK_PENALTY = 1e6


class MpcError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MpcConfig:
    N: int
    dt: float
    Q: np.ndarray  # error-state weight, 2 * n_active
    R: np.ndarray  # input weight, n_active
    P: np.ndarray | None  # terminal weight (defaults to Q)
    U: Polytope | None  # over active wrench components; None only in underwater mode
    mode: str = "space"
    U_uw: Polytope | None = None
    workspace: Polytope | None = None  # over the active translational coordinates
    slack_penalty: float = 1e6
    sqp_iters: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise MpcError(f"unknown mode {self.mode!r}")
        if self.N < 1 or not self.dt > 0:
            raise MpcError("need N >= 1 and dt > 0")
        as_mat = lambda a: np.diag(a) if np.ndim(a) == 1 else np.asarray(a, float)
        Qm, Rm = as_mat(np.asarray(self.Q, float)), as_mat(np.asarray(self.R, float))
        Pm = Qm if self.P is None else as_mat(np.asarray(self.P, float))
        for name, M, floor in (("Q", Qm, -1e-10), ("P", Pm, -1e-10), ("R", Rm, 1e-8)):
            if not np.allclose(M, M.T) or np.min(np.linalg.eigvalsh(M)) < floor:
                raise MpcError(f"weight {name} fails its definiteness requirement")
        object.__setattr__(self, "Q", Qm)
        object.__setattr__(self, "R", Rm)
        object.__setattr__(self, "P", Pm)
        if self.mode == "underwater_equivalent" and self.U_uw is None:
            raise MpcError("underwater mode needs U_uw")
        if self.mode == "space" and self.U is None:
            raise MpcError("space mode needs an input set")


@dataclass
class MpcSolution:
    u0: np.ndarray  # space-model body wrench (6)
    predicted: np.ndarray  # predicted error states (N+1, 2 n_active)
    cost: float
    ok: bool = True
    slack: float = 0.0
    relaxed: bool = False
    active: int = 0
    u_uw: np.ndarray | None = None
    scaled: bool = False
    kkt_residual: float = 0.0
    inputs: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Reference trajectory from a plan


def euler_rates_to_body(euler, rates) -> np.ndarray:
    """Body angular velocity from ZYX Euler angles and their rates."""
    phi, theta, _ = euler
    dphi, dtheta, dpsi = rates
    return np.array([
        dphi - np.sin(theta) * dpsi,
        np.cos(phi) * dtheta + np.sin(phi) * np.cos(theta) * dpsi,
        -np.sin(phi) * dtheta + np.cos(phi) * np.cos(theta) * dpsi,
    ])


class Reference:
    """Continuous-time reference from a zero-order-hold plan.

    Past the final sample the last configuration is held at rest.
    """

    def __init__(self, plan: Plan, model: RigidBodyModel):
        self.plan = plan
        self.model = model
        self.T = plan.N * plan.dt
        self._cache: dict = {}

    def _segment(self, t: float) -> int | None:
        if t >= self.T:
            return None
        return min(int(np.floor(max(t, 0.0) / self.plan.dt + 1e-12)), self.plan.N - 1)

    def _config(self, t: float, seg: int | None = -1):
        """Configuration, rate and acceleration; ``seg`` pins the ZOH segment used."""
        pl = self.plan
        n = len(pl.dims)
        if seg == -1:
            seg = self._segment(t)
        if seg is None:
            return pl.configs[-1], np.zeros(n), np.zeros(n)
        tau = t - seg * pl.dt
        a = pl.accelerations[seg]
        c = pl.configs[seg] + pl.rates[seg] * tau + 0.5 * a * tau * tau
        return c, pl.rates[seg] + a * tau, a

    def _full(self, c, cd, cdd):
        dims = self.plan.dims
        vals = {d: np.zeros(3) for d in ("x", "y", "z", "roll", "pitch", "yaw")}
        for i, d in enumerate(dims):
            vals[d] = np.array([c[i], cd[i], cdd[i]])
        pos = np.array([vals[d] for d in ("x", "y", "z")])  # rows: coordinate; cols: value, rate, accel
        ang = np.array([vals[d] for d in ("roll", "pitch", "yaw")])
        return pos, ang

    def state(self, t: float) -> np.ndarray:
        c, cd, cdd = self._config(t)
        pos, ang = self._full(c, cd, cdd)
        q = poses_from_configs(("roll", "pitch", "yaw"), ang[:, 0][None, :])[1][0]
        R = quat_to_rot(q)
        return make_state(pos[:, 0], q, R.T @ pos[:, 1], euler_rates_to_body(ang[:, 0], ang[:, 1]))

    def wrench(self, t: float, h: float = 1e-5) -> np.ndarray:
        """Body wrench the model needs to follow the reference at ``t`` (zero disturbance)."""
        seg = self._segment(t)
        c, cd, cdd = self._config(t, seg)
        pos, ang = self._full(c, cd, cdd)
        x = self.state(t)
        R = quat_to_rot(x[Q])
        if seg is not None and np.any(ang[:, 1:]):
            # angular acceleration by central differences of the segment's polynomial
            wdot = (self._omega(t + h, seg) - self._omega(t - h, seg)) / (2 * h)
        else:
            wdot = np.zeros(3)
        vdot = R.T @ pos[:, 2] - cross(x[W], x[V])
        nud = np.concatenate([vdot, wdot])
        return (self.model.M @ nud + self.model.passive(x)) * self.model.mask

    def config(self, t: float) -> np.ndarray:
        """Planned configuration at time ``t``."""
        return self._config(t)[0]

    def _omega(self, t: float, seg: int) -> np.ndarray:
        _, ang = self._full(*self._config(t, seg))
        return euler_rates_to_body(ang[:, 0], ang[:, 1])

    def at_tick(self, k: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
        key = (k, dt)
        if key not in self._cache:
            t = k * dt
            self._cache[key] = (self.state(t), self.wrench(t))
        return self._cache[key]


# ---------------------------------------------------------------------------
# Error coordinates


class ErrorCoords:
    def __init__(self, dofs):
        self.dofs = tuple(dofs)
        self.n = len(self.dofs)
        self.S = np.zeros((6, self.n))
        self.S[list(self.dofs), range(self.n)] = 1.0

    def error(self, x, xref) -> np.ndarray:
        full = np.concatenate([x[P] - xref[P], attitude_error(xref[Q], x[Q])])
        nu = np.concatenate([x[V] - xref[V], x[W] - xref[W]])
        return np.concatenate([full[list(self.dofs)], nu[list(self.dofs)]])

    def retract(self, xref, e) -> np.ndarray:
        n = self.n
        cfg = self.S @ e[:n]
        nu = self.S @ e[n:]
        x = xref.copy()
        x[P] = xref[P] + cfg[:3]
        x[Q] = quat_mul(xref[Q], quat_exp(cfg[3:]))
        x[V] = xref[V] + nu[:3]
        x[W] = xref[W] + nu[3:]
        return x

    def embed(self, u) -> np.ndarray:
        return self.S @ u

    def select(self, w) -> np.ndarray:
        return np.asarray(w)[list(self.dofs)]


# ---------------------------------------------------------------------------
# QP


def solve_qp(H, g, A=None, b=None) -> tuple[np.ndarray, np.ndarray, float]:
    """Minimize ``0.5 x'Hx + g'x`` subject to ``A x <= b``; returns (x, multipliers, KKT residual)."""
    H = 0.5 * (H + H.T)
    n = len(g)
    if A is None or len(A) == 0:
        A = np.zeros((0, n))
        b = np.zeros(0)
    x, _, _, _, lam, _ = quadprog.solve_qp(H, -g, -A.T, -b, 0)
    lam = np.asarray(lam)
    stat = H @ x + g + A.T @ lam
    prim = np.maximum(A @ x - b, 0.0)
    comp = lam * (b - A @ x)
    res = float(max(np.max(np.abs(stat), initial=0.0), np.max(prim, initial=0.0),
                    np.max(np.abs(comp), initial=0.0)))
    return x, lam, res


# ---------------------------------------------------------------------------
# Controller


@dataclass
class _Lin:
    A: np.ndarray
    B: np.ndarray
    Tx: np.ndarray | None = None
    Tu: np.ndarray | None = None
    T0: np.ndarray | None = None


class MpcController:
    """Stateful tracking controller (caches linearizations by reference tick)."""

    def __init__(self, cfg: MpcConfig, model_sp: RigidBodyModel, plan: Plan,
                 model_uw: RigidBodyModel | None = None):
        if cfg.mode == "underwater_equivalent" and model_uw is None:
            raise MpcError("underwater mode needs the underwater model")
        self.cfg = cfg
        self.m_sp = model_sp
        self.m_uw = model_uw
        self.ref = Reference(plan, model_sp)
        self.ec = ErrorCoords(model_sp.dofs)
        n = self.ec.n
        if cfg.Q.shape != (2 * n, 2 * n) or cfg.R.shape != (n, n) or (cfg.U is not None and cfg.U.dim != n):
            raise MpcError("weight or input-set dimensions do not match the active degrees of freedom")
        self._lin: dict[int, _Lin] = {}

    # -- model pieces -----------------------------------------------------------

    def _step(self, x, u_act, d):
        return rk4_step(self.m_sp, x, self.ec.embed(u_act), d, self.cfg.dt)

    def _transform(self, x, u_act):
        w = feedback_equivalence_input(x, self.ec.embed(u_act), self.m_sp, self.m_uw)
        return self.ec.select(w)

    def _linearize(self, k: int, e0=None, u0=None, d=None) -> tuple[_Lin, np.ndarray]:
        """Jacobians and the propagated error at (e0, u0) for reference tick k."""
        dt = self.cfg.dt
        xr, ur = self.ref.at_tick(k, dt)
        xr1, _ = self.ref.at_tick(k + 1, dt)
        ur_a = self.ec.select(ur)
        n = self.ec.n
        at_ref = e0 is None
        e0 = np.zeros(2 * n) if e0 is None else e0
        u0 = ur_a if u0 is None else u0
        d = np.zeros(6) if d is None else d
        f = lambda e, u, dd: self.ec.error(self._step(self.ec.retract(xr, e), u, dd), xr1)
        lin = self._lin.get(k) if at_ref else None
        if lin is None:
            h = FD_STEP
            A = np.zeros((2 * n, 2 * n))
            B = np.zeros((2 * n, n))
            for j in range(2 * n):
                de = np.zeros(2 * n)
                de[j] = h
                A[:, j] = (f(e0 + de, u0, np.zeros(6)) - f(e0 - de, u0, np.zeros(6))) / (2 * h)
            for j in range(n):
                du = np.zeros(n)
                du[j] = h
                B[:, j] = (f(e0, u0 + du, np.zeros(6)) - f(e0, u0 - du, np.zeros(6))) / (2 * h)
            lin = _Lin(A, B)
            if self.cfg.mode == "underwater_equivalent":
                g = lambda e, u: self._transform(self.ec.retract(xr, e), u)
                Tx = np.zeros((n, 2 * n))
                for j in range(2 * n):
                    de = np.zeros(2 * n)
                    de[j] = h
                    Tx[:, j] = (g(e0 + de, u0) - g(e0 - de, u0)) / (2 * h)
                lin.Tx, lin.Tu, lin.T0 = Tx, self._Tu(), g(e0, u0)
            if at_ref:
                self._lin[k] = lin
        return lin, f(e0, u0, d)

    def _Tu(self) -> np.ndarray:
        n = self.ec.n
        cols = []
        x = make_state()
        base = self._transform(x, np.zeros(n))
        for j in range(n):
            du = np.zeros(n)
            du[j] = 1.0
            cols.append(self._transform(x, du) - base)
        return np.array(cols).T

    # -- QP assembly ----------------------------------------------------------------

    def step(self, x_hat, k: int, d_hat=None) -> MpcSolution:
        """Solve the tracking QP at reference tick ``k`` from estimated state ``x_hat``."""
        cfg = self.cfg
        d_hat = np.zeros(6) if d_hat is None else np.asarray(d_hat, float)
        xr0, _ = self.ref.at_tick(k, cfg.dt)
        e_init = self.ec.error(np.asarray(x_hat, float), xr0)
        sol = self._solve(e_init, k, d_hat, None, None)
        for _ in range(cfg.sqp_iters):
            if not sol.ok:
                break
            sol = self._solve(e_init, k, d_hat, sol.predicted, sol.inputs)
        if cfg.mode == "underwater_equivalent":
            self._finish_underwater(sol, x_hat)
        return sol

    def _solve(self, e_init, k, d_hat, e_lin, u_lin) -> MpcSolution:
        cfg = self.cfg
        N, n = cfg.N, self.ec.n
        nx = 2 * n
        # affine prediction e_{j+1} = A_j e_j + B_j du_j + c_j, du relative to the linearization input
        As, Bs, cs, ulin, urefs, lins = [], [], [], [], [], []
        for j in range(N):
            xr, ur = self.ref.at_tick(k + j, cfg.dt)
            ur_a = self.ec.select(ur)
            u_ref = ur_a - self.ec.select(disturbance_frame(xr[Q]) @ d_hat)
            if e_lin is None:
                lin, f0 = self._linearize(k + j, d=d_hat)
                u0 = ur_a
                c = f0
            else:
                u0 = u_lin[j]
                lin, f0 = self._linearize(k + j, e_lin[j], u0, d_hat)
                c = f0 - lin.A @ e_lin[j]
            As.append(lin.A)
            Bs.append(lin.B)
            cs.append(c)
            ulin.append(u0)
            urefs.append(u_ref)
            lins.append(lin)
        # condensed: E = Sx e_init + Su dU + Sc, stacked e_1..e_N
        Sx = np.zeros((N * nx, nx))
        Su = np.zeros((N * nx, N * n))
        Sc = np.zeros(N * nx)
        Ak = np.eye(nx)
        prev_c = np.zeros(nx)
        prev_U = np.zeros((nx, N * n))
        for j in range(N):
            Ak = As[j] @ Ak
            rows = slice(j * nx, (j + 1) * nx)
            Sx[rows] = Ak
            cur_U = As[j] @ prev_U
            cur_U[:, j * n:(j + 1) * n] += Bs[j]
            Su[rows] = cur_U
            prev_U = cur_U
            prev_c = As[j] @ prev_c + cs[j]
            Sc[rows] = prev_c
        E0 = Sx @ e_init + Sc  # prediction with du = 0
        Qbar = np.zeros((N * nx, N * nx))
        for j in range(N):
            W_ = cfg.P if j == N - 1 else cfg.Q
            Qbar[j * nx:(j + 1) * nx, j * nx:(j + 1) * nx] = W_
        Rbar = np.kron(np.eye(N), cfg.R)
        ulin_s = np.concatenate(ulin)
        du_ref = np.concatenate(urefs) - ulin_s
        H = Su.T @ Qbar @ Su + Rbar
        g = Su.T @ Qbar @ E0 - Rbar @ du_ref

        # hard input rows
        rows_A, rows_b, soft_A, soft_b = [], [], [], []
        for j in range(N if cfg.U is not None else 0):
            Hu, bu = cfg.U.H, cfg.U.b
            blk = np.zeros((len(bu), N * n))
            blk[:, j * n:(j + 1) * n] = Hu
            rows_A.append(blk)
            rows_b.append(bu - Hu @ ulin[j])
        if cfg.mode == "underwater_equivalent":
            Hw, bw = cfg.U_uw.H, cfg.U_uw.b
            for j in range(N):
                lin = lins[j]
                if j == 0:
                    ej_const, ej_U = e_init, np.zeros((nx, N * n))
                else:
                    r = slice((j - 1) * nx, j * nx)
                    ej_const, ej_U = E0[r], Su[r]
                if e_lin is not None:
                    ej_const = ej_const - e_lin[j]
                blk = Hw @ (lin.Tx @ ej_U)
                blk[:, j * n:(j + 1) * n] += Hw @ lin.Tu
                rows_A.append(blk)
                rows_b.append(bw - Hw @ (lin.T0 + lin.Tx @ ej_const))
        # soft workspace rows over predicted positions
        trans = [i for i, dof in enumerate(self.ec.dofs) if dof < 3]
        if cfg.workspace is not None and trans:
            Hs, bs = cfg.workspace.H, cfg.workspace.b
            for j in range(N):
                xr1, _ = self.ref.at_tick(k + j + 1, cfg.dt)
                pref = xr1[P][[self.ec.dofs[i] for i in trans]]
                r = slice(j * nx, (j + 1) * nx)
                sel = np.zeros((len(trans), nx))
                sel[range(len(trans)), trans] = 1.0
                soft_A.append(Hs @ sel @ Su[r])
                soft_b.append(bs - Hs @ (pref + sel @ E0[r]))
        A_hard = np.vstack(rows_A) if rows_A else np.zeros((0, N * n))
        b_hard = np.concatenate(rows_b) if rows_b else np.zeros(0)
        x_qp, relaxed, ok, kkt, slack, active = self._qp(H, g, A_hard, b_hard, soft_A, soft_b, N)
        if not ok:
            u0 = np.zeros(6)
            return MpcSolution(u0, np.zeros((N + 1, nx)), float("nan"), ok=False, relaxed=True,
                               inputs=np.tile(np.zeros(n), (N, 1)))
        dU = x_qp[: N * n]
        E = E0 + Su @ dU
        inputs = ulin_s.reshape(N, n) + dU.reshape(N, n)
        pred = np.vstack([e_init, E.reshape(N, nx)])
        cost = float(E @ Qbar @ E + (dU - du_ref) @ Rbar @ (dU - du_ref))
        u0 = self.ec.embed(inputs[0])
        return MpcSolution(u0, pred, cost, ok=True, slack=slack, relaxed=relaxed, active=active,
                           kkt_residual=kkt, inputs=inputs)

    def _qp(self, H, g, A_hard, b_hard, soft_A, soft_b, N):
        nU = len(g)
        cfg = self.cfg

        def assemble(groups_soft, penalty_each):
            """Append one nonnegative slack per group of soft rows."""
            ns = len(groups_soft)
            Hq = np.zeros((nU + ns, nU + ns))
            Hq[:nU, :nU] = H
            Hq[nU:, nU:] = SLACK_QUAD * np.eye(ns)
            gq = np.concatenate([g, np.asarray(penalty_each, float)])
            A_rows, b_rows = [], []
            for i, (Ai, bi) in enumerate(groups_soft):
                blk = np.zeros((len(bi), nU + ns))
                blk[:, :nU] = Ai
                blk[:, nU + i] = -1.0
                A_rows.append(blk)
                b_rows.append(bi)
            if ns:
                neg = np.zeros((ns, nU + ns))
                neg[:, nU:] = -np.eye(ns)
                A_rows.append(neg)
                b_rows.append(np.zeros(ns))
            return Hq, gq, A_rows, b_rows

        soft = list(zip(soft_A, soft_b))
        Hq, gq, A_rows, b_rows = assemble(soft, [cfg.slack_penalty] * len(soft))
        ns = len(soft)
        A_all = np.vstack([np.hstack([A_hard, np.zeros((len(b_hard), ns))])] + A_rows)
        b_all = np.concatenate([b_hard] + b_rows)
        try:
            x, lam, kkt = solve_qp(Hq, gq, A_all, b_all)
            return x, False, True, kkt, float(np.max(x[nU:], initial=0.0)), int(np.sum(lam > 1e-9))
        except ValueError:
            pass
        # relax every hard row group (one per horizon step and constraint family) as well
        step_groups = []
        rows_per = len(b_hard) // N if N else 0
        if len(b_hard) == 0:
            pass
        elif rows_per * N == len(b_hard):
            for j in range(N):
                step_groups.append((A_hard[j * rows_per:(j + 1) * rows_per], b_hard[j * rows_per:(j + 1) * rows_per]))
        else:
            step_groups.append((A_hard, b_hard))
        groups = step_groups + soft
        if not groups:
            return None, True, False, float("nan"), float("nan"), 0
        Hq, gq, A_rows, b_rows = assemble(groups, [FALLBACK_PENALTY] * len(step_groups)
                                          + [cfg.slack_penalty] * len(soft))
        try:
            x, lam, kkt = solve_qp(Hq, gq, np.vstack(A_rows), np.concatenate(b_rows))
        except ValueError:
            return None, True, False, float("nan"), float("nan"), 0
        return x, True, True, kkt, float(np.max(x[nU:], initial=0.0)), int(np.sum(lam > 1e-9))

    def _finish_underwater(self, sol: MpcSolution, x_hat) -> None:
        sol.u_uw, sol.scaled = self.transformed(x_hat, sol.u0)

    def transformed(self, x, u0) -> tuple[np.ndarray, bool]:
        """Underwater wrench equivalent to ``u0`` at ``x``, pulled radially into U_uw if needed."""
        w = feedback_equivalence_input(np.asarray(x, float), u0, self.m_sp, self.m_uw)
        w = w * self.m_uw.mask
        wa = self.ec.select(w)
        if self.cfg.U_uw.contains(wa, tol=1e-6):
            return w, False
        return w * self.cfg.U_uw.radial_scale(wa), True

    def wrench_law(self, sol: MpcSolution):
        """State feedback applying the transformation continuously during a hold interval.

        Evaluating the transform at every integrator stage keeps the underwater plant's
        velocity derivative equal to the space plant's, which a frozen wrench would not.
        """
        if self.cfg.mode != "underwater_equivalent":
            return sol.u0
        return lambda x: self.transformed(x, sol.u0)[0]
