"""Re-timing a plan for a second platform at equal disturbance robustness.

The configuration sequence is pinned, so the wrenches the second platform needs
are a deterministic function of the sample spacing. The shortest feasible
spacing is found with a coarse log-spaced scan followed by bisection.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import stl
from .dynamics import RigidBodyModel, inverse_dynamics
from .planner import Plan
from .polytope import Polytope, tighten
from .stl import Formula

GRID_POINTS = 50
REL_TOL = 1e-4
FEAS_TOL = 1e-9


class TransferError(RuntimeError):
    pass


@dataclass
class TransferResult:
    dt_star: float
    speedup: float
    plan_uw: Plan
    spec_uw: Formula
    alpha: float
    margin: float  # worst tightened-constraint value at dt_star (<= 0 when feasible)
    non_monotone: bool = False
    profile: list[tuple[float, float]] = field(default_factory=list)

    @property
    def duration(self) -> float:
        return self.dt_star * self.plan_uw.N


def required_wrenches(dt: float, plan: Plan, m_uw: RigidBodyModel) -> np.ndarray:
    if not dt > 0:
        raise ValueError("dt must be positive")
    pos, quats = plan.poses()
    return inverse_dynamics(m_uw, pos, quats, dt)


def feasible_at(dt: float, plan: Plan, m_uw: RigidBodyModel, U_uw: Polytope, K, dbar,
                alpha: float) -> tuple[bool, float]:
    """Whether every required wrench lies in the alpha-tightened set, and the worst margin.

    ``U_uw`` is expressed over the model's active wrench components.
    """
    w = required_wrenches(dt, plan, m_uw)[:, list(m_uw.dofs)]
    T = tighten(U_uw, K, dbar, alpha)
    margin = float(np.max(w @ T.H.T - T.b))
    return margin <= FEAS_TOL, margin


def _bisect(lo: float, hi: float, probe) -> float:
    """Shrink an (infeasible, feasible) bracket to relative width REL_TOL; returns feasible end."""
    while hi / lo - 1.0 > REL_TOL:
        mid = np.sqrt(lo * hi)
        if probe(mid)[0]:
            hi = mid
        else:
            lo = mid
    return hi


def transfer(plan_sp: Plan, spec_sp: Formula, m_uw: RigidBodyModel, U_uw: Polytope, K, dbar,
             alpha: float, floor_factor: float = 0.1) -> TransferResult:
    """Smallest sample spacing at which ``m_uw`` executes the plan's configurations
    inside ``U_uw`` tightened by the same ``alpha``."""
    dt_sp = plan_sp.dt
    cache: dict[float, tuple[bool, float]] = {}

    def probe(dt: float) -> tuple[bool, float]:
        if dt not in cache:
            cache[dt] = feasible_at(dt, plan_sp, m_uw, U_uw, K, dbar, alpha)
        return cache[dt]

    if probe(dt_sp)[0]:
        grid = np.geomspace(floor_factor * dt_sp, dt_sp, GRID_POINTS)
    else:
        grid = np.geomspace(dt_sp, 100.0 * dt_sp, GRID_POINTS)
    flags = [probe(float(g))[0] for g in grid]
    if not any(flags):
        raise TransferError(f"no feasible spacing within [{grid[0]:.4g}, {grid[-1]:.4g}] s")
    j = flags.index(True)
    non_monotone = not all(flags[j:])
    if j == 0 or non_monotone:
        dt_star = float(grid[j])
    else:
        dt_star = _bisect(float(grid[j - 1]), float(grid[j]), probe)
    ok, margin = probe(dt_star)
    if not ok:
        raise TransferError(f"spacing {dt_star:.6g} s failed its own feasibility re-check")

    s = dt_star / dt_sp
    n = len(plan_sp.dims)
    states = plan_sp.states.copy()
    states[:, n:] /= s
    plan_uw = replace(plan_sp, dt=dt_star, states=states, inputs=plan_sp.inputs / s**2,
                      wrenches=required_wrenches(dt_star, plan_sp, m_uw), info={})
    spec_uw = stl.time_scale(spec_sp, s)
    profile = sorted(cache.items())
    return TransferResult(dt_star, dt_sp / dt_star, plan_uw, spec_uw, alpha, margin, non_monotone,
                          [(dt, m) for dt, (_, m) in profile])


def audit(result: TransferResult, plan_sp: Plan, spec_sp: Formula, m_uw: RigidBodyModel,
          U_uw: Polytope, K, dbar, tol: float = 1e-6) -> dict:
    """Independent re-check of the transfer invariants."""
    plan = result.plan_uw
    T = tighten(U_uw, K, dbar, plan_sp.alpha)
    w = plan.wrenches[:, list(m_uw.dofs)]
    worst = float(np.max(w @ T.H.T - T.b))
    config_gap = float(np.max(np.abs(plan.configs - plan_sp.configs)))
    rho_sp = stl.robustness(spec_sp, plan_sp.signal())
    rho_uw = stl.robustness(result.spec_uw, plan.signal())
    out = {
        "alpha_sp": plan_sp.alpha, "alpha_uw": result.alpha,
        "equal_alpha": result.alpha == plan_sp.alpha,
        "worst_margin": worst, "wrenches_inside": worst <= tol,
        "config_gap": config_gap, "rho_sp": rho_sp, "rho_uw": rho_uw,
        "rho_consistent": abs(rho_sp - rho_uw) <= 1e-9,
    }
    out["passed"] = bool(out["equal_alpha"] and out["wrenches_inside"] and config_gap == 0.0
                         and out["rho_consistent"])
    return out
