import math

import highspy
import numpy as np
import pytest
from scipy.optimize import Bounds, LinearConstraint, milp as scipy_milp

from drvalidate import milp
from drvalidate.milp import MilpProblem

from milp_oracle import dense, enumerate_optimum


def random_milp(rng, n_bin=None, n_cont=3, n_rows=6):
    n_bin = int(rng.integers(1, 9)) if n_bin is None else n_bin
    p = MilpProblem("rand")
    for i in range(n_bin):
        p.add_var(f"z{i}", binary=True, obj=float(rng.normal()))
    for i in range(n_cont):
        p.add_var(f"x{i}", -5.0, 5.0, obj=float(rng.normal()))
    n = p.num_vars
    for _ in range(n_rows):
        a = rng.normal(size=n) * (rng.random(n) < 0.7)
        sense = ["<=", ">=", "<="][int(rng.integers(0, 3))]
        rhs = float(rng.normal() * 2 + (2.0 if sense == "<=" else -2.0))
        p.add_constr({i: a[i] for i in range(n)}, sense, rhs)
    if rng.random() < 0.3:
        p.add_constr({0: 1.0, n_bin: 1.0}, "=", float(rng.uniform(-1, 1)))
    return p


def toy():
    p = MilpProblem("toy")
    a = p.add_var("a", binary=True, obj=-3.0)
    b = p.add_var("b", binary=True, obj=-2.0)
    p.add_constr({a: 1.0, b: 1.0}, "<=", 1.0)
    return p


def test_pure_lp():
    p = MilpProblem()
    x = p.add_var("x", -math.inf, math.inf, obj=-1.0)
    p.add_constr({x: 1.0}, "<=", 3.0)
    s = milp.solve(p)
    assert s.status == "optimal" and s.x[0] == pytest.approx(3.0)


def test_knapsack_toy():
    s = milp.solve(toy())
    assert s.status == "optimal"
    np.testing.assert_array_equal(s.x, [1.0, 0.0])
    assert s.objective == pytest.approx(-3.0)


def test_infeasible_and_unbounded():
    p = MilpProblem()
    z = p.add_var("z", binary=True)
    p.add_constr({z: 1.0}, ">=", 2.0)
    assert milp.solve(p).status == "infeasible"
    p = MilpProblem()
    z = p.add_var("z", binary=True)
    x = p.add_var("x", -math.inf, math.inf, obj=1.0)
    p.add_constr({z: 1.0, x: 1.0}, "<=", 0.5)
    assert milp.solve(p).status == "unbounded"
    # integer infeasible although the relaxation is feasible
    p = MilpProblem()
    a, b = p.add_var("a", binary=True), p.add_var("b", binary=True)
    p.add_constr({a: 1.0, b: 1.0}, "=", 1.0)
    p.add_constr({a: 1.0, b: -1.0}, "=", 0.0)
    assert milp.solve(p).status == "infeasible"


def test_builder_validation():
    p = MilpProblem()
    with pytest.raises(milp.MilpError):
        p.add_constr({0: 1.0}, "<=", 1.0)
    p.add_var("x")
    with pytest.raises(milp.MilpError):
        p.add_constr({0: 1.0}, "<", 1.0)
    with pytest.raises(milp.MilpError):
        p.add_var("y", 2.0, 1.0)
    z = p.add_var("z", -3, 7, binary=True)
    assert (p.lb[z], p.ub[z]) == (0.0, 1.0)


def test_random_milps_match_enumeration():
    rng = np.random.default_rng(0)
    solved = 0
    for _ in range(30):
        p = random_milp(rng)
        s = milp.solve(p, gap=1e-9)
        ref, _ = enumerate_optimum(p)
        if math.isinf(ref):
            assert s.status == "infeasible"
            continue
        solved += 1
        assert s.status == "optimal"
        assert s.objective == pytest.approx(ref, abs=1e-8, rel=1e-9)
        assert p.max_violation(s.x) <= 1e-7
        assert s.bound <= s.objective + 1e-9
    assert solved >= 15


def test_random_milps_match_scipy_milp():
    rng = np.random.default_rng(1)
    for _ in range(10):
        p = random_milp(rng, n_bin=12, n_cont=4, n_rows=8)
        A_ub, b_ub, A_eq, b_eq = dense(p)
        cons = [LinearConstraint(A_ub, -np.inf, b_ub)]
        if len(b_eq):
            cons.append(LinearConstraint(A_eq, b_eq, b_eq))
        ref = scipy_milp(p.obj, constraints=cons, integrality=np.array(p.binary, int),
                         bounds=Bounds(p.lb, p.ub), options={"mip_rel_gap": 0})
        s = milp.solve(p, gap=1e-9)
        if ref.status == 2:
            assert s.status == "infeasible"
        else:
            assert s.objective == pytest.approx(ref.fun, abs=1e-7)


def test_deterministic():
    p = random_milp(np.random.default_rng(5), n_bin=8)
    a, b = milp.solve(p), milp.solve(p)
    assert a.nodes == b.nodes and np.array_equal(a.x, b.x)


def test_time_limit_returns_bound():
    p = random_milp(np.random.default_rng(2), n_bin=8)
    s = milp.solve(p, time_limit=0.0)
    assert s.status in ("time_limit", "optimal", "infeasible")
    if s.status == "time_limit":
        assert s.bound <= s.objective


# -- LP export ----------------------------------------------------------------------

def read_back(text, tmp_path):
    f = tmp_path / "m.lp"
    f.write_text(text)
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.readModel(str(f))
    return h


def test_export_empty(tmp_path):
    text = milp.export_lp(MilpProblem("empty"))
    assert "Subject To" in text and text.rstrip().endswith("End")
    assert "Binaries" not in text and "Bounds" not in text


def test_export_toy_counts(tmp_path):
    text = milp.export_lp(toy())
    assert "Binaries\n a b" in text
    h = read_back(text, tmp_path)
    lp = h.getLp()
    assert lp.num_col_ == 2 and lp.num_row_ == 1
    assert sum(1 for t in lp.integrality_ if t == highspy.HighsVarType.kInteger) == 2
    h.run()
    assert h.getInfo().objective_function_value == pytest.approx(-3.0)


def test_export_roundtrip_random(tmp_path):
    rng = np.random.default_rng(3)
    for _ in range(5):
        p = random_milp(rng)
        p.names[0] = "bad name[0]"
        h = read_back(milp.export_lp(p), tmp_path)
        assert h.getLp().num_row_ == len(p.rows)
        h.run()
        s = milp.solve(p, gap=1e-9)
        if s.status == "optimal":
            assert h.getInfo().objective_function_value == pytest.approx(s.objective, abs=1e-7)
        else:
            assert h.getModelStatus() == highspy.HighsModelStatus.kInfeasible
