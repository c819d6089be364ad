"""Rigid-body models in control-affine form.

State layout (13): position p (inertial, m), unit quaternion q (scalar first,
Hamilton product, rotates body-frame vectors into the inertial frame), body
linear velocity v (m/s), body angular velocity w (rad/s).

Wrenches and disturbances are 6-vectors ``[F, tau]``. Wrenches act in the body
frame; disturbance forces are inertial and disturbance torques body-frame.

The inertial z axis points up: weight acts along -z, buoyancy along +z.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

P, Q, V, W = slice(0, 3), slice(3, 7), slice(7, 10), slice(10, 13)
NU = slice(7, 13)

DOFS_FULL = (0, 1, 2, 3, 4, 5)
DOFS_PLANAR = (0, 1, 5)
KINDS = ("space_linear", "space_nonlinear", "underwater")


class SimulationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Quaternions


def cross(a, b) -> np.ndarray:
    """3-vector cross product (np.cross carries heavy per-call overhead)."""
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_rot(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_rate_matrix(q) -> np.ndarray:
    """E(q) with ``q_dot = 0.5 * E(q) @ w_body``."""
    w, x, y, z = q
    return np.array([[-x, -y, -z], [w, -z, y], [z, w, -x], [-y, x, w]])


def quat_exp(rotvec) -> np.ndarray:
    rotvec = np.asarray(rotvec, float)
    angle = np.linalg.norm(rotvec)
    if angle < 1e-12:
        q = np.concatenate([[1.0], 0.5 * rotvec])
        return q / np.linalg.norm(q)
    axis = rotvec / angle
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quat_log(q) -> np.ndarray:
    """Rotation vector of ``q`` (angle in [0, pi])."""
    q = np.asarray(q, float)
    if q[0] < 0:
        q = -q
    vn = np.linalg.norm(q[1:])
    if vn < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(vn, q[0])
    return angle * q[1:] / vn


def euler_to_quat(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """ZYX (yaw, then pitch, then roll) Euler angles to a quaternion."""
    cr, sr = np.cos(roll / 2), np.sin(roll / 2)
    cp, sp = np.cos(pitch / 2), np.sin(pitch / 2)
    cy, sy = np.cos(yaw / 2), np.sin(yaw / 2)
    return np.array([
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ])


def quat_to_euler(q) -> np.ndarray:
    w, x, y, z = q
    roll = np.arctan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = np.arcsin(np.clip(2 * (w * y - z * x), -1.0, 1.0))
    yaw = np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return np.array([roll, pitch, yaw])


def make_state(p=(0, 0, 0), q=(1, 0, 0, 0), v=(0, 0, 0), w=(0, 0, 0)) -> np.ndarray:
    x = np.zeros(13)
    x[P], x[Q], x[V], x[W] = p, q, v, w
    x[Q] /= np.linalg.norm(x[Q])
    return x


def attitude_error(q_ref, q) -> np.ndarray:
    """Small-angle body-frame rotation taking ``q_ref`` to ``q``."""
    return quat_log(quat_mul(quat_conj(q_ref), q))


# ---------------------------------------------------------------------------
# Models


@dataclass(frozen=True, eq=False)
class RigidBodyModel:
    """Parameters of one platform.

    ``dofs`` lists the active body-velocity components; inactive ones are held
    at zero by constraint forces (``DOFS_PLANAR`` keeps x, y and yaw).
    """

    kind: str
    mass: float
    inertia: np.ndarray
    added_mass: np.ndarray = field(default_factory=lambda: np.zeros(6))
    damping_linear: np.ndarray = field(default_factory=lambda: np.zeros(6))
    damping_quadratic: np.ndarray = field(default_factory=lambda: np.zeros(6))
    weight: float = 0.0
    buoyancy: float = 0.0
    r_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    r_b: np.ndarray = field(default_factory=lambda: np.zeros(3))
    allocation: np.ndarray | None = None
    mu_min: np.ndarray | None = None
    mu_max: np.ndarray | None = None
    dofs: tuple[int, ...] = DOFS_FULL
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        J = np.asarray(self.inertia, float)
        if J.shape == (3,):
            J = np.diag(J)
        conv = lambda a: np.asarray(a, float).reshape(-1)
        object.__setattr__(self, "inertia", J)
        for name in ("added_mass", "damping_linear", "damping_quadratic"):
            object.__setattr__(self, name, conv(getattr(self, name)))
        object.__setattr__(self, "r_g", conv(self.r_g))
        object.__setattr__(self, "r_b", conv(self.r_b))
        object.__setattr__(self, "dofs", tuple(sorted(self.dofs)))
        if self.kind != "underwater":
            if (np.any(self.added_mass) or np.any(self.damping_linear)
                    or np.any(self.damping_quadratic) or self.weight or self.buoyancy):
                raise ValueError("space models carry no added mass, damping or restoring terms")
        M = np.zeros((6, 6))
        M[:3, :3] = self.mass * np.eye(3)
        M[3:, 3:] = J
        M += np.diag(self.added_mass)
        if not np.allclose(M, M.T) or np.min(np.linalg.eigvalsh(M)) <= 0:
            raise ValueError("mass-inertia matrix must be symmetric positive definite")
        idx = np.array(self.dofs)
        minv = np.zeros((6, 6))
        minv[np.ix_(idx, idx)] = np.linalg.inv(M[np.ix_(idx, idx)])
        mask = np.zeros(6)
        mask[idx] = 1.0
        g = np.zeros((13, 6))
        g[NU] = minv
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "M_inv", minv)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "_g", g)
        object.__setattr__(self, "_g_pinv", np.linalg.pinv(g))
        if self.allocation is not None:
            G = np.atleast_2d(np.asarray(self.allocation, float))
            if G.shape[0] != 6:
                raise ValueError("allocation matrix must have 6 rows")
            object.__setattr__(self, "allocation", G)
            m = G.shape[1]
            lo = np.full(m, -np.inf) if self.mu_min is None else conv(self.mu_min)
            hi = np.full(m, np.inf) if self.mu_max is None else conv(self.mu_max)
            object.__setattr__(self, "mu_min", lo)
            object.__setattr__(self, "mu_max", hi)

    @property
    def planar(self) -> bool:
        return self.dofs == DOFS_PLANAR

    # -- force terms ---------------------------------------------------------

    def coriolis(self, nu) -> np.ndarray:
        """C(nu) nu in Kirchhoff form for the full (rigid + added) mass matrix."""
        if self.kind == "space_linear":
            return np.zeros(6)
        v, w = nu[:3], nu[3:]
        M = self.M
        lin = M[:3, :3] @ v + M[:3, 3:] @ w
        ang = M[3:, :3] @ v + M[3:, 3:] @ w
        return np.concatenate([cross(w, lin), cross(v, lin) + cross(w, ang)])

    def damping(self, nu) -> np.ndarray:
        return (self.damping_linear + self.damping_quadratic * np.abs(nu)) * nu

    def restoring(self, q) -> np.ndarray:
        if not (self.weight or self.buoyancy):
            return np.zeros(6)
        R = quat_to_rot(q)
        f_g = R.T @ np.array([0.0, 0.0, -self.weight])
        f_b = R.T @ np.array([0.0, 0.0, self.buoyancy])
        return -np.concatenate([f_g + f_b, cross(self.r_g, f_g) + cross(self.r_b, f_b)])

    def passive(self, x) -> np.ndarray:
        """C(nu) nu + D(nu) nu + g(eta)."""
        nu = x[NU]
        return self.coriolis(nu) + self.damping(nu) + self.restoring(x[Q])

    # -- control-affine pieces ---------------------------------------------------

    def drift(self, x) -> np.ndarray:
        out = np.empty(13)
        q = x[Q]
        out[P] = quat_to_rot(q) @ x[V]
        out[Q] = 0.5 * quat_rate_matrix(q) @ x[W]
        out[NU] = -self.M_inv @ self.passive(x)
        return out

    def actuation(self, x=None) -> np.ndarray:
        return self._g

    def disturbance_map(self, x) -> np.ndarray:
        C = np.zeros((13, 6))
        C[NU] = self.M_inv @ disturbance_frame(x[Q])
        return C


def disturbance_frame(q) -> np.ndarray:
    """F(eta): inertial disturbance force to body frame, torque unchanged."""
    Fm = np.eye(6)
    Fm[:3, :3] = quat_to_rot(q).T
    return Fm


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise SimulationError("non-finite value in dynamics input")


def derivative(m: RigidBodyModel, x, w, d=None) -> np.ndarray:
    """State derivative ``f(x) + g(x) w + C(x) d``."""
    x = np.asarray(x, float)
    w = np.asarray(w, float)
    d = np.zeros(6) if d is None else np.asarray(d, float)
    _check_finite(x, w, d)
    q = x[Q]
    out = np.empty(13)
    out[P] = quat_to_rot(q) @ x[V]
    out[Q] = 0.5 * quat_rate_matrix(q) @ x[W]
    out[NU] = m.M_inv @ (w + disturbance_frame(q) @ d - m.passive(x))
    return out


def nu_dot(m: RigidBodyModel, nu, q, w, d) -> np.ndarray:
    """Velocity-block dynamics with attitude treated as a given input."""
    out = m.coriolis(nu) + m.damping(nu) + m.restoring(q)
    return m.M_inv @ (w + disturbance_frame(q) @ d - out)


WrenchLike = np.ndarray | Callable[[np.ndarray], np.ndarray]


def rk4_step(m: RigidBodyModel, x, w: WrenchLike, d=None, dt: float = 0.1) -> np.ndarray:
    """One classical Runge-Kutta step, quaternion renormalized afterwards.

    ``w`` is either a constant wrench or a state feedback ``w(x)`` evaluated at
    every stage.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    d = np.zeros(6) if d is None else np.asarray(d, float)
    wf = w if callable(w) else (lambda _x, _w=np.asarray(w, float): _w)
    x = np.asarray(x, float)
    k1 = derivative(m, x, wf(x), d)
    x2 = x + 0.5 * dt * k1
    k2 = derivative(m, x2, wf(x2), d)
    x3 = x + 0.5 * dt * k2
    k3 = derivative(m, x3, wf(x3), d)
    x4 = x + dt * k3
    k4 = derivative(m, x4, wf(x4), d)
    out = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise SimulationError("integration blew up")
    out[Q] /= np.linalg.norm(out[Q])
    return out


def wrench_from_thrusts(m: RigidBodyModel, mu) -> tuple[np.ndarray, bool]:
    """Total body wrench ``G mu`` and whether ``mu`` respects the thrust bounds."""
    if m.allocation is None:
        raise ValueError("model has no allocation matrix")
    mu = np.asarray(mu, float)
    ok = bool(np.all(mu >= m.mu_min) and np.all(mu <= m.mu_max))
    return m.allocation @ mu, ok


def thruster_allocation(directions: Sequence, positions: Sequence) -> np.ndarray:
    """Allocation matrix columns ``[d_i; r_i x d_i]``."""
    cols = []
    for d, r in zip(directions, positions):
        d = np.asarray(d, float)
        cols.append(np.concatenate([d, cross(np.asarray(r, float), d)]))
    return np.array(cols).T


# ---------------------------------------------------------------------------
# Inverse dynamics along a configuration sequence


def _diff(samples: Sequence[np.ndarray], h: float, where: str) -> tuple[np.ndarray, np.ndarray]:
    f = samples
    if where == "center":
        return (f[2] - f[0]) / (2 * h), (f[2] - 2 * f[1] + f[0]) / h**2
    d1 = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * h)
    if len(f) >= 4:
        d2 = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / h**2
    else:
        d2 = (f[0] - 2 * f[1] + f[2]) / h**2
    if where == "backward":
        d1 = -d1
    return d1, d2


def _stencil(k: int, n: int) -> tuple[list[int], str]:
    if 0 < k < n - 1:
        return [k - 1, k, k + 1], "center"
    span = min(4, n)
    if k == 0:
        return list(range(span)), "forward"
    return [n - 1 - j for j in range(span)], "backward"


def unwrap_quaternions(quats) -> np.ndarray:
    qs = np.array(quats, float)
    for k in range(1, len(qs)):
        if np.dot(qs[k], qs[k - 1]) < 0:
            qs[k] = -qs[k]
        if np.dot(qs[k], qs[k - 1]) < 1e-9:
            raise ValueError(f"rotation between samples {k - 1} and {k} reaches pi; ambiguous")
    return qs


def configuration_rates(positions, quats, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Body twists and twist rates from a uniformly sampled configuration sequence.

    Second-order finite differences; endpoints use one-sided stencils.
    Angular terms use rotation vectors relative to each sample's attitude.
    """
    positions = np.asarray(positions, float)
    n = len(positions)
    if n < 3:
        raise ValueError("inverse dynamics needs at least 3 configurations")
    if not dt > 0:
        raise ValueError("dt must be positive")
    qs = unwrap_quaternions(quats)
    nu = np.zeros((n, 6))
    nu_dot_ = np.zeros((n, 6))
    for k in range(n):
        idx, where = _stencil(k, n)
        pd, pdd = _diff([positions[i] for i in idx], dt, where)
        qinv = quat_conj(qs[k])
        phis = [quat_log(quat_mul(qinv, qs[i])) for i in idx]
        wd, wdd = _diff(phis, dt, where)
        R = quat_to_rot(qs[k])
        v = R.T @ pd
        nu[k, :3] = v
        nu[k, 3:] = wd
        nu_dot_[k, :3] = R.T @ pdd - cross(wd, v)
        nu_dot_[k, 3:] = wdd
    return nu, nu_dot_


def inverse_dynamics(m: RigidBodyModel, positions, quats, dt: float) -> np.ndarray:
    """Wrenches (with zero disturbance) that make ``m`` follow the configurations."""
    qs = unwrap_quaternions(quats)
    positions = np.asarray(positions, float)
    nu, nud = configuration_rates(positions, qs, dt)
    out = np.zeros((len(positions), 6))
    for k in range(len(positions)):
        x = make_state(positions[k], qs[k], nu[k, :3], nu[k, 3:])
        out[k] = m.M @ nud[k] + m.passive(x)
    return out * m.mask


def feedback_equivalence_input(x, u, m_sp: RigidBodyModel, m_uw: RigidBodyModel) -> np.ndarray:
    """Wrench for ``m_uw`` reproducing ``m_sp`` under ``u``: g_uw^+ (f_sp + g_sp u - f_uw)."""
    x = np.asarray(x, float)
    target = m_sp.drift(x) + m_sp.actuation(x) @ np.asarray(u, float) - m_uw.drift(x)
    return m_uw._g_pinv @ target


def kinetic_energy(m: RigidBodyModel, x) -> float:
    nu = np.asarray(x)[NU]
    return 0.5 * float(nu @ m.M @ nu)


def inertial_angular_momentum(m: RigidBodyModel, x) -> np.ndarray:
    x = np.asarray(x)
    return quat_to_rot(x[Q]) @ (m.M[3:, 3:] @ x[W])
