"""Velocity and disturbance-wrench estimation with a random-walk disturbance model.

The filter state holds the body velocities and the disturbance components of the
model's active degrees of freedom. Attitude is a known input: it enters the
velocity dynamics through restoring terms and the disturbance frame map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .dynamics import RigidBodyModel, disturbance_frame, nu_dot

FD_STEP = 1e-6


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EkfConfig:
    """Diagonal noise intensities; process terms are per second and scale with dt."""

    q_vel: float = 1e-4
    q_ang_vel: float = 1e-4
    q_force: float = 1e-2
    q_torque: float = 1e-3
    r_vel: float = 1e-4
    r_ang_vel: float = 1e-4
    p0_vel: float = 1e-4
    p0_force: float = 1.0
    p0_torque: float = 0.1

    def __post_init__(self):
        vals = [self.q_vel, self.q_ang_vel, self.q_force, self.q_torque, self.p0_vel,
                self.p0_force, self.p0_torque]
        if min(vals) < 0 or min(self.r_vel, self.r_ang_vel) <= 0:
            raise EstimationError("noise intensities must be nonnegative and measurement noise positive")


class DisturbanceEkf:
    """Extended Kalman filter over ``[nu_active, d_active]``."""

    def __init__(self, model: RigidBodyModel, cfg: EkfConfig | None = None, nu0=None):
        self.model = model
        self.cfg = cfg = cfg or EkfConfig()
        self.dofs = list(model.dofs)
        n = self.n = len(self.dofs)
        rot = np.array([d >= 3 for d in self.dofs])
        self.Qp = np.diag(np.concatenate([np.where(rot, cfg.q_ang_vel, cfg.q_vel),
                                          np.where(rot, cfg.q_torque, cfg.q_force)]))
        self.Rm = np.diag(np.where(rot, cfg.r_ang_vel, cfg.r_vel))
        self.H = np.hstack([np.eye(n), np.zeros((n, n))])
        self.mean = np.zeros(2 * n)
        if nu0 is not None:
            self.mean[:n] = np.asarray(nu0, float)[self.dofs]
        self.cov = np.diag(np.concatenate([np.full(n, cfg.p0_vel),
                                           np.where(rot, cfg.p0_torque, cfg.p0_force)]))

    # -- helpers ----------------------------------------------------------------

    def _full(self, a) -> np.ndarray:
        out = np.zeros(6)
        out[self.dofs] = a
        return out

    def _rate(self, s, w, q) -> np.ndarray:
        n = self.n
        acc = nu_dot(self.model, self._full(s[:n]), q, w, self._full(s[n:]))
        return np.concatenate([acc[self.dofs], np.zeros(n)])

    def _propagate(self, s, w, q, dt) -> np.ndarray:
        k1 = self._rate(s, w, q)
        k2 = self._rate(s + 0.5 * dt * k1, w, q)
        k3 = self._rate(s + 0.5 * dt * k2, w, q)
        k4 = self._rate(s + dt * k3, w, q)
        return s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    def _jacobian(self, w, q) -> np.ndarray:
        """Continuous-time Jacobian; the disturbance block is exact, the velocity block central-differenced."""
        n = self.n
        A = np.zeros((2 * n, 2 * n))
        for j in range(n):
            e = np.zeros(2 * n)
            e[j] = FD_STEP
            A[:n, j] = (self._rate(self.mean + e, w, q)[:n] - self._rate(self.mean - e, w, q)[:n]) / (2 * FD_STEP)
        gain = self.model.M_inv @ disturbance_frame(q)
        A[:n, n:] = gain[np.ix_(self.dofs, self.dofs)]
        return A

    def _symmetrize(self):
        self.cov = 0.5 * (self.cov + self.cov.T)

    # -- filter steps ---------------------------------------------------------------

    def predict(self, w_cmd, q, dt: float) -> None:
        if not dt > 0:
            raise EstimationError("dt must be positive")
        w = np.asarray(w_cmd, float) * self.model.mask
        q = np.asarray(q, float)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(q))):
            raise EstimationError("non-finite command or attitude")
        F = expm(self._jacobian(w, q) * dt)
        mean = self._propagate(self.mean, w, q, dt)
        cov = F @ self.cov @ F.T + self.Qp * dt
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise EstimationError("non-finite propagation")
        self.mean, self.cov = mean, cov
        self._symmetrize()

    def update(self, z) -> None:
        """Fuse a measurement of the full body velocity (6); inactive components are ignored."""
        z = np.asarray(z, float)
        if not np.all(np.isfinite(z)):
            raise EstimationError("non-finite measurement")
        y = z[self.dofs] - self.H @ self.mean
        S = self.H @ self.cov @ self.H.T + self.Rm
        K = np.linalg.solve(S, self.H @ self.cov).T
        self.mean = self.mean + K @ y
        J = np.eye(len(self.mean)) - K @ self.H
        self.cov = J @ self.cov @ J.T + K @ self.Rm @ K.T
        self._symmetrize()

    def step(self, w_cmd, q, z, dt: float) -> None:
        self.predict(w_cmd, q, dt)
        self.update(z)

    def velocity(self) -> np.ndarray:
        return self._full(self.mean[: self.n])

    def disturbance(self) -> np.ndarray:
        """Current disturbance estimate as a 6-vector (inertial force, body torque)."""
        return self._full(self.mean[self.n:])

    def disturbance_std(self) -> np.ndarray:
        n = self.n
        return self._full(np.sqrt(np.clip(np.diag(self.cov)[n:], 0.0, None)))
