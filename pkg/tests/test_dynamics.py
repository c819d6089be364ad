import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from drvalidate import dynamics as dyn
from drvalidate.dynamics import RigidBodyModel, make_state


def space_model(**kw):
    kw.setdefault("inertia", [1.0, 2.0, 3.0])
    return RigidBodyModel("space_nonlinear", mass=kw.pop("mass", 2.0), **kw)


def uw_model(**kw):
    base = dict(mass=13.5, inertia=[0.26, 0.23, 0.37],
                added_mass=[6.36, 7.12, 18.68, 0.189, 0.135, 0.222],
                damping_linear=[13.7, 0, 33, 0, 0.8, 0],
                damping_quadratic=[141, 217, 190, 1.19, 0.47, 1.5],
                weight=114.8, buoyancy=114.8, r_b=[0, 0, 0.02])
    base.update(kw)
    return RigidBodyModel("underwater", **base)


def random_state(rng, scale=1.0):
    return make_state(rng.normal(size=3), Rotation.random(random_state=rng).as_quat(scalar_first=True),
                      scale * rng.normal(size=3), scale * rng.normal(size=3))


# -- quaternions -------------------------------------------------------------------

def test_quaternion_helpers_match_scipy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        r = Rotation.random(random_state=rng)
        q = r.as_quat(scalar_first=True)
        np.testing.assert_allclose(dyn.quat_to_rot(q), r.as_matrix(), atol=1e-12)
        np.testing.assert_allclose(dyn.quat_log(q), r.as_rotvec(), atol=1e-10)
        q2 = dyn.quat_exp(r.as_rotvec())
        assert abs(abs(q2 @ q) - 1) < 1e-12
        s = Rotation.random(random_state=rng)
        prod = dyn.quat_mul(q, s.as_quat(scalar_first=True))
        np.testing.assert_allclose(dyn.quat_to_rot(prod), (r * s).as_matrix(), atol=1e-12)
        eul = r.as_euler("ZYX")[::-1]
        assert abs(abs(dyn.euler_to_quat(*eul) @ q) - 1) < 1e-12
        np.testing.assert_allclose(dyn.quat_to_euler(dyn.euler_to_quat(*eul)), eul, atol=1e-9)


def test_rate_matrix_is_half_product():
    rng = np.random.default_rng(1)
    q = Rotation.random(random_state=rng).as_quat(scalar_first=True)
    w = rng.normal(size=3)
    np.testing.assert_allclose(dyn.quat_rate_matrix(q) @ w,
                               dyn.quat_mul(q, np.concatenate([[0], w])), atol=1e-14)


# -- derivative -------------------------------------------------------------------

def test_equilibria():
    assert not np.any(dyn.derivative(space_model(), make_state(), np.zeros(6)))
    m = uw_model(r_b=[0, 0, 0])
    np.testing.assert_allclose(dyn.derivative(m, make_state(q=dyn.euler_to_quat(0.3, -0.2, 1)),
                                              np.zeros(6)), 0, atol=1e-12)


def test_euler_equations():
    m = space_model()
    J = np.diag([1.0, 2.0, 3.0])
    for w in ([0, 0, 1], [1, 1, 0], [0.3, -2, 0.7]):
        w = np.array(w, float)
        xd = dyn.derivative(m, make_state(w=w), np.zeros(6))
        np.testing.assert_allclose(xd[10:], np.linalg.solve(J, -np.cross(w, J @ w)), atol=1e-14)
    xd = dyn.derivative(m, make_state(w=[1, 1, 0]), np.zeros(6))
    np.testing.assert_allclose(xd[10:], [0, 0, -1 / 3], atol=1e-14)


def test_kinematic_block_random():
    rng = np.random.default_rng(2)
    for m in (space_model(), uw_model()):
        for _ in range(50):
            x = random_state(rng)
            xd = dyn.derivative(m, x, rng.normal(size=6), rng.normal(size=6))
            np.testing.assert_allclose(xd[:3], Rotation.from_quat(x[3:7], scalar_first=True).apply(x[7:10]))
            np.testing.assert_allclose(xd[3:7], 0.5 * dyn.quat_mul(x[3:7], np.concatenate([[0], x[10:]])))


def test_disturbance_force_is_inertial():
    m = space_model()
    q = dyn.euler_to_quat(0, 0, np.pi / 2)
    xd = dyn.derivative(m, make_state(q=q), np.zeros(6), [2.0, 0, 0, 0, 0, 0])
    # body x points along inertial y, so an inertial x force pushes along body -y
    np.testing.assert_allclose(xd[7:10], [0, -1.0, 0], atol=1e-14)


def test_nonfinite_rejected():
    with pytest.raises(dyn.SimulationError):
        dyn.derivative(space_model(), make_state(), [np.nan, 0, 0, 0, 0, 0])


def test_model_validation():
    with pytest.raises(ValueError):
        RigidBodyModel("space_nonlinear", 1.0, [1, 1, 1], damping_linear=[1] * 6)
    with pytest.raises(ValueError):
        RigidBodyModel("space_nonlinear", -1.0, [1, 1, 1])
    with pytest.raises(ValueError):
        RigidBodyModel("boat", 1.0, [1, 1, 1])


# -- integration ------------------------------------------------------------------

def test_rk4_double_integrator():
    m = space_model()
    x = make_state()
    F = np.array([1.0, -2.0, 0.5])
    dt, n = 0.1, 100
    for _ in range(n):
        x = dyn.rk4_step(m, x, np.concatenate([F, [0, 0, 0]]), None, dt)
    t = n * dt
    a = F / m.mass
    np.testing.assert_allclose(x[7:10], a * t, rtol=1e-10)
    np.testing.assert_allclose(x[:3], 0.5 * a * t**2, rtol=1e-10)


def test_rk4_single_axis_rotation():
    m = space_model()
    x = make_state(w=[0, 0, 0.7])
    for _ in range(100):
        x = dyn.rk4_step(m, x, np.zeros(6), None, 0.1)
    np.testing.assert_allclose(x[10:], [0, 0, 0.7], atol=1e-14)
    angle = dyn.quat_log(x[3:7])[2]
    assert abs(np.angle(np.exp(1j * (angle - 7.0)))) < 1e-6
    assert abs(np.linalg.norm(x[3:7]) - 1) < 1e-12


def test_rk4_zero_derivative():
    x = make_state(p=[1, 2, 3])
    assert np.array_equal(dyn.rk4_step(space_model(), x, np.zeros(6), None, 0.5), x)
    with pytest.raises(ValueError):
        dyn.rk4_step(space_model(), x, np.zeros(6), None, 0.0)


def test_energy_and_momentum_conserved():
    m = space_model()
    x = make_state(v=[0.2, -0.1, 0.3], w=[0.4, 1.0, -0.3])
    e0, h0 = dyn.kinetic_energy(m, x), dyn.inertial_angular_momentum(m, x)
    for _ in range(1000):
        x = dyn.rk4_step(m, x, np.zeros(6), None, 0.01)
    assert abs(dyn.kinetic_energy(m, x) - e0) <= 1e-6 * e0
    assert np.linalg.norm(dyn.inertial_angular_momentum(m, x) - h0) <= 1e-6 * np.linalg.norm(h0)


def test_planar_mode_stays_planar():
    m = uw_model(dofs=dyn.DOFS_PLANAR)
    x = make_state(q=dyn.euler_to_quat(0, 0, 0.4), v=[0.1, 0.2, 0], w=[0, 0, 0.3])
    for _ in range(50):
        x = dyn.rk4_step(m, x, [3.0, -1.0, 5.0, 2.0, 2.0, 0.5], [1, 1, 1, 1, 1, 1], 0.05)
    assert x[2] == 0 and x[9] == 0 and x[10] == 0 and x[11] == 0
    roll, pitch, _ = dyn.quat_to_euler(x[3:7])
    assert abs(roll) < 1e-12 and abs(pitch) < 1e-12


# -- thrusters ----------------------------------------------------------------------

def test_wrench_from_thrusts():
    G = dyn.thruster_allocation([[1, 0, 0], [1, 0, 0], [-1, 0, 0]], [[0, 1, 0], [0, -1, 0], [0, 1, 0]])
    m = space_model(allocation=G, mu_min=[0, 0, 0], mu_max=[1, 1, 1])
    w, ok = dyn.wrench_from_thrusts(m, [0, 0, 0])
    assert ok and not np.any(w)
    w, ok = dyn.wrench_from_thrusts(m, [2, 0, 0])
    np.testing.assert_allclose(w, [2, 0, 0, 0, 0, -2])
    assert not ok
    w, ok = dyn.wrench_from_thrusts(m, [0.5, 0, 0.5])
    np.testing.assert_allclose(w, [0, 0, 0, 0, 0, 0])
    w, ok = dyn.wrench_from_thrusts(m, [0, 0.5, 0])
    np.testing.assert_allclose(w[:3], [0.5, 0, 0])
    with pytest.raises(ValueError):
        dyn.wrench_from_thrusts(space_model(), [1.0])


# -- inverse dynamics -----------------------------------------------------------------

def test_inverse_dynamics_hover():
    q = dyn.euler_to_quat(0.1, 0.2, 0.3)
    pos = np.zeros((5, 3))
    quats = np.tile(q, (5, 1))
    assert not np.any(dyn.inverse_dynamics(space_model(), pos, quats, 0.5))
    m = uw_model()
    x = make_state(q=q)
    np.testing.assert_allclose(dyn.inverse_dynamics(m, pos, quats, 0.5), np.tile(m.restoring(q), (5, 1)),
                               atol=1e-12)


def test_inverse_dynamics_constant_acceleration():
    a = np.array([0.3, -0.2, 0.1])
    dt = 0.5
    t = np.arange(8) * dt
    pos = 0.5 * t[:, None] ** 2 * a
    quats = np.tile([1.0, 0, 0, 0], (8, 1))
    m = space_model()
    w = dyn.inverse_dynamics(m, pos, quats, dt)
    np.testing.assert_allclose(w, np.tile(np.concatenate([m.mass * a, [0, 0, 0]]), (8, 1)), atol=1e-12)
    mu = RigidBodyModel("underwater", 2.0, [1, 2, 3], damping_linear=[0.5, 1.0, 2.0, 0, 0, 0])
    w = dyn.inverse_dynamics(mu, pos, quats, dt)
    expected = mu.mass * a + np.array([0.5, 1.0, 2.0]) * (t[:, None] * a)
    np.testing.assert_allclose(w[:, :3], expected, atol=1e-12)


def test_inverse_dynamics_errors():
    with pytest.raises(ValueError):
        dyn.inverse_dynamics(space_model(), np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)), 0.1)
    flip = [[1.0, 0, 0, 0], [0, 0, 0, 1.0], [1.0, 0, 0, 0]]
    with pytest.raises(ValueError):
        dyn.inverse_dynamics(space_model(), np.zeros((3, 3)), flip, 0.1)


def test_inverse_dynamics_sign_continuity():
    qs = np.array([dyn.euler_to_quat(0, 0, 0.1 * k**2) for k in range(5)])
    flipped = qs.copy()
    flipped[2] *= -1
    w1 = dyn.inverse_dynamics(space_model(), np.zeros((5, 3)), flipped, 0.2)
    w2 = dyn.inverse_dynamics(space_model(), np.zeros((5, 3)), qs, 0.2)
    assert np.any(w2)
    np.testing.assert_allclose(w1, w2, atol=1e-12)


def _roundtrip_error(m, dt, T=2.0, sub=20):
    """Simulate a smooth wrench history, recover wrenches by inverse dynamics,
    re-simulate with those (linearly interpolated) and return max config error."""
    wfun = lambda t: np.array([np.sin(t), 0.5 * np.cos(2 * t), 0.3 * t, 0.2 * np.sin(3 * t),
                               -0.1 * np.cos(t), 0.3 * np.sin(t)])

    def simulate(x0, wrench_at, n):
        xs = [x0]
        x = x0
        h = dt / sub
        for k in range(n):
            for j in range(sub):
                x = dyn.rk4_step(m, x, wrench_at(k * dt + (j + 0.5) * h), None, h)
            xs.append(x)
        return np.array(xs)

    n = int(round(T / dt))
    x0 = make_state(v=[0.1, 0, 0.05], w=[0, 0.2, 0.1])
    ref = simulate(x0, wfun, n)
    w = dyn.inverse_dynamics(m, ref[:, :3], ref[:, 3:7], dt)
    nu, _ = dyn.configuration_rates(ref[:, :3], ref[:, 3:7], dt)
    interp = lambda t: np.array([np.interp(t, np.arange(n + 1) * dt, w[:, i]) for i in range(6)])
    x1 = make_state(ref[0, :3], ref[0, 3:7], nu[0, :3], nu[0, 3:])
    rep = simulate(x1, interp, n)
    perr = np.max(np.abs(rep[:, :3] - ref[:, :3]))
    qerr = max(np.linalg.norm(dyn.attitude_error(a, b)) for a, b in zip(ref[:, 3:7], rep[:, 3:7]))
    return max(perr, qerr)


@pytest.mark.parametrize("model", [space_model(), uw_model()], ids=["space", "underwater"])
def test_inverse_dynamics_roundtrip_second_order(model):
    e1 = _roundtrip_error(model, 0.1)
    e2 = _roundtrip_error(model, 0.05)
    assert e1 < 1e-2
    assert e1 / e2 >= 3.5


# -- feedback equivalence --------------------------------------------------------------

def test_equivalence_identity_and_drag():
    rng = np.random.default_rng(3)
    m = space_model()
    x, u = random_state(rng), rng.normal(size=6)
    np.testing.assert_allclose(dyn.feedback_equivalence_input(x, u, m, m), u, atol=1e-12)
    m1 = RigidBodyModel("space_linear", 1.0, [1, 1, 1], dofs=(0,))
    m2 = RigidBodyModel("underwater", 1.0, [1, 1, 1], damping_linear=[0.7, 0, 0, 0, 0, 0], dofs=(0,))
    x = make_state(v=[0.4, 0, 0])
    out = dyn.feedback_equivalence_input(x, [1.5, 0, 0, 0, 0, 0], m1, m2)
    np.testing.assert_allclose(out, [1.5 + 0.7 * 0.4, 0, 0, 0, 0, 0], atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_equivalence_matches_derivatives(seed):
    rng = np.random.default_rng(seed)
    m_sp, m_uw = space_model(mass=16.8), uw_model()
    x, u = random_state(rng), rng.normal(size=6) * 5
    w = dyn.feedback_equivalence_input(x, u, m_sp, m_uw)
    a = dyn.derivative(m_uw, x, w)
    b = dyn.derivative(m_sp, x, u)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("dofs", [dyn.DOFS_FULL, dyn.DOFS_PLANAR])
def test_equivalence_closed_loop(dofs):
    m_sp, m_uw = space_model(mass=16.8, dofs=dofs), uw_model(dofs=dofs)
    planar = dofs == dyn.DOFS_PLANAR
    x0 = make_state(q=dyn.euler_to_quat(0, 0, 0.3) if planar else dyn.euler_to_quat(0.1, 0.2, 0.3),
                    v=[0.2, -0.1, 0 if planar else 0.1], w=[0, 0, 0.2] if planar else [0.1, -0.2, 0.2])
    u_of_t = lambda k: np.array([np.sin(0.1 * k), np.cos(0.05 * k), 0.2, 0.1, -0.1, 0.05 * np.sin(0.2 * k)])
    xs, xu = x0.copy(), x0.copy()
    dev = 0.0
    for k in range(100):
        u = u_of_t(k)
        xs = dyn.rk4_step(m_sp, xs, u, None, 0.1)
        xu = dyn.rk4_step(m_uw, xu, lambda x, u=u: dyn.feedback_equivalence_input(x, u, m_sp, m_uw), None, 0.1)
        dev = max(dev, float(np.max(np.abs(xs - xu))))
    assert dev <= 1e-8
