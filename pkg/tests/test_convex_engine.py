import numpy as np
import pytest

from uavfl import rb_allocation as rb
from uavfl.convex_engine import (
    ConvexProgram,
    Functional,
    InfeasibleProgramError,
    dual_ascent,
    finite_difference_gradient,
    solve,
    trace_to_csv,
)
from uavfl.system_model import eta_objective

from conftest import start, tiny


def quad(center):
    c = np.asarray(center, dtype=float)
    return Functional(lambda x: float(np.sum((x - c) ** 2)), lambda x: 2 * (x - c), lambda x: 2 * np.eye(x.size))


def box(n, lo, hi):
    return np.full(n, lo, dtype=float), np.full(n, hi, dtype=float)


def test_minimum_inside_box():
    lo, hi = box(1, -1, 1)
    rep = solve(ConvexProgram({"x": (1,)}, quad([0.0]), lower=lo, upper=hi), np.array([0.5]))
    assert rep.converged
    assert rep.x[0] == pytest.approx(0.0, abs=1e-6)


def test_active_upper_bound_has_positive_multiplier():
    lo, hi = box(1, -1, 1)
    rep = solve(ConvexProgram({"x": (1,)}, quad([3.0]), lower=lo, upper=hi), np.array([0.0]))
    assert rep.converged
    assert rep.x[0] == pytest.approx(1.0, abs=1e-6)
    # stationarity 2(x - 3) + z = 0 at x = 1
    assert rep.upper_multipliers[0] == pytest.approx(4.0, rel=1e-4)
    assert rep.lower_multipliers[0] == pytest.approx(0.0, abs=1e-6)


def test_linear_inequality_qp_matches_hand_kkt():
    # min x1^2 + x2^2  s.t.  1 - x1 - x2 <= 0  ->  x = (1/2, 1/2), lambda = 1
    g = Functional(lambda x: 1.0 - x[0] - x[1], lambda x: -np.ones(2), lambda x: np.zeros((2, 2)))
    rep = solve(ConvexProgram({"x": (2,)}, quad([0.0, 0.0]), inequalities=(g,)), np.array([2.0, 2.0]))
    assert rep.converged
    assert rep.x == pytest.approx([0.5, 0.5], abs=1e-6)
    assert rep.multipliers[0] == pytest.approx(1.0, abs=1e-6)


def test_equality_qp_matches_hand_kkt():
    # min (x1 - 1)^2 + (x2 - 2)^2  s.t. x1 + x2 = 1 -> x = (0, 1), nu = 2
    prog = ConvexProgram({"x": (2,)}, quad([1.0, 2.0]), eq_matrix=np.array([[1.0, 1.0]]), eq_rhs=np.array([1.0]))
    rep = solve(prog, np.array([0.5, 0.5]))
    assert rep.converged
    assert rep.x == pytest.approx([0.0, 1.0], abs=1e-6)
    assert rep.eq_multipliers[0] == pytest.approx(2.0, abs=1e-5)


def test_phase_one_and_infeasible():
    # start outside the feasible half-plane
    g = Functional(lambda x: 1.0 - x[0], lambda x: np.array([-1.0]), lambda x: np.zeros((1, 1)))
    lo, hi = box(1, -5, 5)
    rep = solve(ConvexProgram({"x": (1,)}, quad([0.0]), inequalities=(g,), lower=lo, upper=hi), np.array([-3.0]))
    assert rep.x[0] == pytest.approx(1.0, abs=1e-6)
    h = Functional(lambda x: x[0] + 2.0, lambda x: np.array([1.0]), lambda x: np.zeros((1, 1)))
    with pytest.raises(InfeasibleProgramError):
        solve(ConvexProgram({"x": (1,)}, quad([0.0]), inequalities=(g, h), lower=lo, upper=hi), np.array([0.0]))


def test_bad_start_rejected():
    lo, hi = box(1, -1, 1)
    with pytest.raises(ValueError):
        solve(ConvexProgram({"x": (1,)}, quad([0.0]), lower=lo, upper=hi), np.array([2.0]))


def test_deterministic_report():
    g = Functional(lambda x: 1.0 - x[0] - x[1], lambda x: -np.ones(2), lambda x: np.zeros((2, 2)))
    prog = ConvexProgram({"x": (2,)}, quad([0.0, 0.0]), inequalities=(g,))
    a = solve(prog, np.array([2.0, 2.0]))
    b = solve(prog, np.array([2.0, 2.0]))
    assert np.array_equal(a.x, b.x) and a.iterations == b.iterations and a.trace == b.trace
    assert trace_to_csv(a) == trace_to_csv(b)
    assert trace_to_csv(a).splitlines()[0].startswith("iteration")


def test_pack_unpack():
    prog = ConvexProgram({"a": (2, 3), "b": (4,)}, quad(np.zeros(10)))
    x = np.arange(10.0)
    parts = prog.unpack(x)
    assert parts["a"].shape == (2, 3) and parts["b"].tolist() == [6, 7, 8, 9]
    assert np.array_equal(prog.pack(parts), x)


def test_dual_ascent_slack_constraint_stays_zero():
    # min (x - 1)^2 s.t. x - 5 <= 0: slack at lambda = 0
    res = dual_ascent(lambda lam: np.array([1.0 - lam[0] / 2]), lambda x: np.array([x[0] - 5.0]), 0.5, [0.0])
    assert res.converged
    assert res.multipliers[0] == 0.0


def _waterfill_map(a):
    def primal(lam):
        level = 1.0 / max(lam[0], 1e-12)
        return np.maximum(0.0, level - 1.0 / a)

    return primal


def test_dual_ascent_water_filling():
    a = np.array([2.0, 4.0])
    res = dual_ascent(_waterfill_map(a), lambda x: np.array([x.sum() - 1.0]), lambda k: 0.5 / (1 + k) ** 0.5, [1.0],
                      tol=1e-8, max_iter=200_000)
    level = (1.0 + np.sum(1.0 / a)) / 2.0  # both users active
    assert res.converged
    assert res.primal == pytest.approx(level - 1.0 / a, abs=1e-6)
    assert res.multipliers[0] == pytest.approx(1.0 / level, abs=1e-6)


def test_dual_gap_shrinks_against_reference():
    # dual values of min sum -log(1 + a x) s.t. sum x <= 1, x >= 0, versus the barrier solve
    a = np.random.default_rng(5).uniform(1.0, 5.0, 3)
    obj = Functional(lambda x: float(-np.sum(np.log1p(a * x))), lambda x: -a / (1 + a * x),
                     lambda x: np.diag(a**2 / (1 + a * x) ** 2))
    cap = Functional(lambda x: float(x.sum() - 1.0), lambda x: np.ones(3), lambda x: np.zeros((3, 3)))
    ref = solve(ConvexProgram({"x": (3,)}, obj, inequalities=(cap,), lower=np.zeros(3)), np.full(3, 0.1))
    res = dual_ascent(_waterfill_map(a), lambda x: np.array([x.sum() - 1.0]), lambda k: 1.0 / (1 + k),
                      [2.0], objective=obj.value, tol=1e-9, max_iter=100_000)
    gaps = ref.objective - np.array(res.dual_values)
    assert np.all(gaps >= -1e-7)  # weak duality
    assert np.all(np.diff(gaps) <= 1e-12)
    assert gaps[-1] <= 1e-4


def test_gradients_match_finite_differences(rng):
    sc = tiny(3)
    coeffs = rb.rb_coefficients(sc, start(sc))
    prog, x0 = rb.reference_program(coeffs)
    lo, hi = prog.bounds()
    fns = (prog.objective,) + tuple(prog.inequalities)
    for _ in range(20):
        x = x0 * rng.uniform(0.9, 1.1, x0.size)
        x = np.clip(x, lo + 1e-6, np.where(np.isfinite(hi), hi - 1e-6, np.inf))
        for fn in fns:
            g = fn.grad(x)
            fd = finite_difference_gradient(fn.value, x)
            scale = max(1.0, np.max(np.abs(g)))
            assert np.max(np.abs(g - fd)) / scale <= 1e-5


def test_reference_solve_has_no_model_drift():
    sc = tiny(4)
    st = start(sc)
    coeffs = rb.rb_coefficients(sc, st)
    rep, shares = rb.solve_reference(coeffs)
    assert rep.converged
    eta = rep.x[-sc.slots:]
    st2 = st.with_(alpha=rb.staircase(shares, sc.channel.rb_count), rb_scale=1.0)
    assert eta_objective(sc, st2, eta) == pytest.approx(rep.objective, rel=1e-8)
    assert eta_objective(sc, st2) == pytest.approx(rep.objective, rel=1e-6)
