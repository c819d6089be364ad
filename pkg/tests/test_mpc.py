import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from drvalidate import dynamics as dyn
from drvalidate.dynamics import DOFS_PLANAR, RigidBodyModel, make_state
from drvalidate.mpc import MpcConfig, MpcController, MpcError, Reference, solve_qp
from drvalidate.planner import Plan
from drvalidate.polytope import Polytope


def point(mass=1.0, kind="space_nonlinear", **kw):
    return RigidBodyModel(kind, mass, [1.0, 1.0, 1.0], dofs=(0,), **kw)


def accel_plan(n=11, dt=0.5, accel=0.2, mass=1.0):
    t = np.arange(n) * dt
    states = np.column_stack([0.5 * accel * t**2, accel * t])
    return Plan(dt, ("x",), states, np.full((n - 1, 1), mass * accel), 1.0, 0.0, 0.0, np.array([mass]))


def hover_plan(n=41, dt=0.5, dims=("x",), mass=(1.0,)):
    k = len(dims)
    return Plan(dt, dims, np.zeros((n, 2 * k)), np.zeros((n - 1, k)), 1.0, 0.0, 0.0, np.array(mass))


def cfg_1d(N=20, dt=0.1, U=10.0, **kw):
    base = dict(N=N, dt=dt, Q=[10.0, 1.0], R=[0.1], P=None, U=Polytope.box([U]))
    base.update(kw)
    return MpcConfig(**base)


def test_config_validation():
    with pytest.raises(MpcError):
        cfg_1d(R=[0.0])
    with pytest.raises(MpcError):
        cfg_1d(Q=[-1.0, 1.0])
    with pytest.raises(MpcError):
        cfg_1d(mode="underwater_equivalent")
    with pytest.raises(MpcError):
        MpcController(cfg_1d(Q=[1.0, 1.0, 1.0, 1.0]), point(), accel_plan())


def test_reference_matches_plan_samples():
    plan = accel_plan()
    ref = Reference(plan, point())
    for k in range(plan.N):
        x = ref.state(k * plan.dt)
        assert x[0] == pytest.approx(plan.configs[k, 0], abs=1e-12)
        assert x[7] == pytest.approx(plan.rates[k, 0], abs=1e-12)
    assert ref.wrench(0.3)[0] == pytest.approx(0.2)
    # past the end the last configuration is held at rest
    x = ref.state(100.0)
    assert x[0] == plan.configs[-1, 0] and x[7] == 0.0


def test_planar_reference_wrench_is_consistent():
    plan = Plan(1.0, ("x", "y", "yaw"), np.array([[0, 0, 0, 0, 0, 0.0], [0.05, 0, 0.1, 0.1, 0, 0.2]]),
                np.array([[0.1 * 2, 0.0, 0.2 * 0.5]]), 1.0, 0, 0, np.array([2.0, 2.0, 0.5]))
    m = RigidBodyModel("space_nonlinear", 2.0, [0.3, 0.4, 0.5], dofs=DOFS_PLANAR)
    ref = Reference(plan, m)
    x0 = ref.state(0.0)
    x = x0
    h = 0.001
    for i in range(1000):
        x = dyn.rk4_step(m, x, lambda xx, t=i * h: ref.wrench(t + 0.5 * h), None, h)
    np.testing.assert_allclose(x[:3], ref.state(1.0)[:3], atol=1e-6)


def test_horizon_past_the_end_brakes_towards_hold():
    c = MpcController(cfg_1d(), point(), accel_plan())
    sol = c.step(c.ref.at_tick(49, 0.1)[0], 49)
    assert sol.u0[0] < 0.0


def test_on_reference_returns_plan_input():
    plan = accel_plan()
    c = MpcController(cfg_1d(), point(), plan)
    for k in (0, 7, 25):  # horizons that stay inside the plan
        x = c.ref.at_tick(k, 0.1)[0]
        sol = c.step(x, k)
        assert sol.ok and sol.u0[0] == pytest.approx(0.2, abs=1e-6)
        assert sol.kkt_residual <= 1e-8


def test_lqr_oracle():
    dt, m = 0.1, 1.0
    A = np.array([[1, dt], [0, 1]])
    B = np.array([[0.5 * dt * dt / m], [dt / m]])
    Qw, Rw = np.diag([10.0, 1.0]), np.array([[0.1]])
    Pw = solve_discrete_are(A, B, Qw, Rw)
    K = np.linalg.solve(Rw + B.T @ Pw @ B, B.T @ Pw @ A)
    c = MpcController(cfg_1d(N=50, Q=Qw, R=Rw, P=Pw, U=1e6), point(), hover_plan())
    for e in ([0.3, 0.0], [-0.1, 0.2], [0.05, -0.4]):
        x = make_state(p=[e[0], 0, 0], v=[e[1], 0, 0])
        sol = c.step(x, 0)
        expected = float(-(K @ np.array(e))[0])
        assert sol.u0[0] == pytest.approx(expected, rel=0.02)


def test_disturbance_feedforward_hover():
    d = np.array([0.3, 0, 0, 0, 0, 0])
    m = point()
    c = MpcController(cfg_1d(), m, hover_plan())
    x = make_state()
    for k in range(150):
        sol = c.step(x, k, d)
        x = dyn.rk4_step(m, x, sol.u0, d, 0.1)
    assert sol.u0[0] == pytest.approx(-0.3, abs=1e-3)
    assert abs(x[0]) <= 1e-6


def test_input_constraint_is_hard():
    c = MpcController(cfg_1d(U=0.05), point(), hover_plan())
    sol = c.step(make_state(p=[1.0, 0, 0]), 0)
    assert sol.ok and not sol.relaxed
    assert abs(sol.u0[0]) <= 0.05 + 1e-9


def test_infeasible_constraints_are_relaxed():
    bad = Polytope([[1.0], [-1.0]], [-1.0, -1.0])
    c = MpcController(MpcConfig(20, 0.1, [10.0, 1.0], [0.1], None, bad), point(), hover_plan())
    sol = c.step(make_state(), 0)
    assert sol.ok and sol.relaxed


def test_soft_workspace_reports_slack():
    plan = accel_plan(accel=0.4)
    ws = Polytope([[1.0]], [0.5])
    c = MpcController(cfg_1d(workspace=ws), point(), plan)
    sol = c.step(c.ref.at_tick(20, 0.1)[0], 20)
    assert sol.ok and sol.slack > 0


def test_small_perturbation_small_change():
    plan = accel_plan()
    c = MpcController(cfg_1d(), point(), plan)
    x = c.ref.at_tick(5, 0.1)[0] + np.concatenate([[0.1], np.zeros(12)])
    a = c.step(x, 5).u0
    x2 = x.copy()
    x2[0] += 1e-6
    b = c.step(x2, 5).u0
    assert np.max(np.abs(a - b)) <= 1e-3


def test_qp_kkt_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        M = rng.normal(size=(6, 6))
        H = M @ M.T + 0.1 * np.eye(6)
        g = rng.normal(size=6)
        A = rng.normal(size=(8, 6))
        b = rng.uniform(0.1, 1.0, 8)
        x, lam, res = solve_qp(H, g, A, b)
        assert res <= 1e-8
        assert np.all(lam >= -1e-12)


# -- underwater-equivalent mode --------------------------------------------------------

def uw_planar():
    return RigidBodyModel("underwater", 13.5, [0.26, 0.23, 0.37],
                          added_mass=[6.36, 7.12, 18.68, 0.189, 0.135, 0.222],
                          damping_linear=[13.7, 0, 33, 0, 0.8, 0],
                          damping_quadratic=[141, 217, 190, 1.19, 0.47, 1.5],
                          weight=114.8, buoyancy=114.8, dofs=DOFS_PLANAR)


def sp_planar():
    return RigidBodyModel("space_nonlinear", 16.8, [0.2, 0.2, 0.2], dofs=DOFS_PLANAR)


def planar_cfg(mode="space", U_uw=None):
    return MpcConfig(20, 0.1, [10, 10, 10, 1, 1, 1], [0.1, 0.1, 1.0], None,
                     Polytope.box([1.42, 1.42, 0.24]), mode, U_uw)


def planar_plan():
    """Accelerate then brake on every axis, ending at rest."""
    n, dt = 9, 2.5
    inertia = np.array([16.8, 16.8, 0.2])
    acc = np.array([0.004, -0.002, 0.01])
    states = [np.zeros(6)]
    inputs = []
    for k in range(n - 1):
        a = acc if k < (n - 1) // 2 else -acc
        c, r = states[-1][:3], states[-1][3:]
        states.append(np.concatenate([c + r * dt + 0.5 * a * dt * dt, r + a * dt]))
        inputs.append(inertia * a)
    return Plan(dt, ("x", "y", "yaw"), np.array(states), np.array(inputs), 1.0, 0.1, 0.0, inertia)


def test_equal_models_give_identical_output():
    m = sp_planar()
    plan = planar_plan()
    a = MpcController(planar_cfg(), m, plan)
    b = MpcController(planar_cfg("underwater_equivalent", Polytope.box([1e3, 1e3, 1e3])), m, plan, m)
    x = a.ref.at_tick(10, 0.1)[0] + np.concatenate([[0.05, -0.02, 0], np.zeros(10)])
    sa, sb = a.step(x, 10), b.step(x, 10)
    np.testing.assert_allclose(sa.u0, sb.u0, atol=1e-9)
    np.testing.assert_allclose(sb.u_uw, sb.u0, atol=1e-9)


def test_applied_wrench_cancels_hydrodynamics():
    m_sp, m_uw = sp_planar(), uw_planar()
    c = MpcController(planar_cfg("underwater_equivalent", Polytope.box([21.0, 21.0, 17.0])), m_sp,
                      planar_plan(), m_uw)
    x = make_state(q=dyn.euler_to_quat(0, 0, 0.3), v=[0.1, -0.05, 0], w=[0, 0, 0.1])
    sol = c.step(x, 0)
    nu = x[7:]
    # algebraic oracle: equal accelerations on the active block
    idx = list(DOFS_PLANAR)
    Msp, Muw = m_sp.M[np.ix_(idx, idx)], m_uw.M[np.ix_(idx, idx)]
    acc = np.linalg.solve(Msp, (sol.u0 - m_sp.passive(x))[idx])
    expected = Muw @ acc + m_uw.passive(x)[idx]
    np.testing.assert_allclose(sol.u_uw[idx], expected, atol=1e-9)


def test_dual_closed_loop_matches():
    m_sp, m_uw = sp_planar(), uw_planar()
    plan = planar_plan()
    cs = MpcController(planar_cfg(), m_sp, plan)
    cu = MpcController(planar_cfg("underwater_equivalent", Polytope.box([1e3, 1e3, 1e3])), m_sp, plan, m_uw)
    xs = xu = cs.ref.at_tick(0, 0.1)[0]
    dev = track = 0.0
    for k in range(int(round(plan.N * plan.dt / 0.1))):
        us = cs.step(xs, k).u0
        uu = cu.step(xu, k)
        xs = dyn.rk4_step(m_sp, xs, us, None, 0.1)
        xu = dyn.rk4_step(m_uw, xu, cu.wrench_law(uu), None, 0.1)
        dev = max(dev, float(np.max(np.abs(xs - xu))))
        track = max(track, float(np.max(np.abs(xs[:3] - cs.ref.at_tick(k + 1, 0.1)[0][:3]))))
    assert dev <= 1e-3
    assert track <= 1e-3


def test_underwater_constraint_scales_and_flags():
    m_sp, m_uw = sp_planar(), uw_planar()
    c = MpcController(planar_cfg("underwater_equivalent", Polytope.box([0.5, 0.5, 0.5])), m_sp,
                      planar_plan(), m_uw)
    x = make_state(v=[0.5, 0, 0])  # drag alone needs far more than the box allows
    sol = c.step(x, 0)
    assert sol.scaled
    assert np.all(np.abs(sol.u_uw[list(DOFS_PLANAR)]) <= 0.5 + 1e-9)
