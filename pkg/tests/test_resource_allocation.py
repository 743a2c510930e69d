import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uavfl import resource_allocation as ra
from uavfl.system_model import SubproblemError, energy_feasibility, evaluate

from conftest import start, tiny

B, NOISE = 1e6, 10 ** (-17.4) / 1000


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1.0), st.floats(1e-12, 1e-6))
def test_gamma_round_trip(p, g):
    gam = ra.gamma_from_power(p, g, B, NOISE)
    assert ra.power_from_gamma(gam, g, B, NOISE) == pytest.approx(p, rel=1e-10)


def test_gamma_examples():
    g = 1e-8
    p1 = B * NOISE / g  # SNR = 1
    assert ra.gamma_from_power(p1, g, B, NOISE) == pytest.approx(1.0, rel=1e-14)
    assert ra.power_from_gamma(1.0, g, B, NOISE) == pytest.approx(p1, rel=1e-14)
    assert 0 < ra.gamma_from_power(1e12, g, B, NOISE) < 0.05
    assert ra.power_from_gamma(1e6, g, B, NOISE) < 1e-5 * p1
    ps = np.linspace(0.01, 1, 50)
    assert np.all(np.diff(ra.gamma_from_power(ps, g, B, NOISE)) < 0)


def test_gamma_floor_is_power_box():
    g, p_max = 3e-9, 0.2
    gmin = ra.gamma_floor(p_max, g, B, NOISE)
    # 2^(1/gamma) - 1 = p_max g / (B s2) at the boundary
    assert np.expm1(np.log(2) / gmin) == pytest.approx(p_max * g / (B * NOISE), rel=1e-12)
    assert ra.power_from_gamma(gmin, g, B, NOISE) == pytest.approx(p_max, rel=1e-12)


def test_xi_residual_cases():
    assert ra.xi_epigraph_residual(1.0, 1.0) == pytest.approx(0.0, abs=1e-15)
    assert ra.xi_epigraph_residual(1.0, 2.0) == pytest.approx(-1.0)
    assert ra.xi_function(1.0) == pytest.approx(1.0)


def test_xi_function_convex():
    x = np.linspace(0.05, 20, 4000)
    h = x[1] - x[0]
    f = ra.xi_function(x)
    assert np.all(f[:-2] - 2 * f[1:-1] + f[2:] > -1e-12 * h)
    assert np.all(f[:-2] - 2 * f[1:-1] + f[2:] >= 0)


def test_nonconvexity_witness():
    rep = ra.verify_nonconvexity_g()
    assert rep.points == (0.5, 1.0, 2.0, 10.0)
    assert rep.concave_at_points
    assert rep.witness_grid[0] == pytest.approx(1e-3) and rep.witness_grid[-1] == pytest.approx(1e3)
    assert rep.witness_nonnegative
    assert ra.energy_ratio_witness(0.0) == 0.0


def test_witness_matches_second_derivative():
    # d2g/dx2 = -ln2 g_tilde / ((1+x)^2 ln^3(1+x)) for a = b = 1
    for x in (0.5, 1.0, 2.0, 10.0):
        h = 1e-4 * x
        f = ra.energy_ratio(np.array([x - h, x, x + h]))
        fd = (f[0] - 2 * f[1] + f[2]) / h**2
        closed = -np.log(2) * ra.energy_ratio_witness(x) / ((1 + x) ** 2 * np.log1p(x) ** 3)
        assert fd == pytest.approx(closed, rel=1e-4)


def test_loose_energy_drives_boxes():
    sc = tiny(0, devices={"energy_budget": 1e6}, uav={"energy_budget": 1e9})
    state = start(sc)
    sol = ra.solve_power_freq(sc, state)
    b = evaluate(sc, sol.apply(state))
    # only the slowest device of a slot sets eta; the others have slack
    slow = np.argmax(b.t_train + b.t_up, axis=0)
    cols = np.arange(sc.slots)
    assert sol.f[slow, cols] == pytest.approx(sc.f_max[slow], rel=1e-6)
    assert sol.p[slow, cols] == pytest.approx(sc.p_max[slow], rel=1e-6)
    assert sol.f_uav == pytest.approx(np.full(sc.slots, sc.uav.f_max), rel=1e-6)
    assert sol.p_uav == pytest.approx(np.full_like(sol.p_uav, sc.uav.p_max), rel=1e-6)
    top = state.with_(f=np.repeat(sc.f_max[:, None], sc.slots, axis=1), p=np.repeat(sc.p_max[:, None], sc.slots, axis=1),
                      f_uav=np.full(sc.slots, sc.uav.f_max), p_uav=np.full_like(sol.p_uav, sc.uav.p_max))
    assert b.objective == pytest.approx(evaluate(sc, top).objective, rel=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_objective_and_audit(seed):
    sc = tiny(seed, m=3, u=4, n=4, devices={"energy_budget": 0.004})
    state = start(sc)
    sol = ra.solve_power_freq(sc, state)
    assert ra.objective_check(sc, state, sol) <= 1e-6
    new = sol.apply(state)
    assert energy_feasibility(sc, evaluate(sc, new)).feasible(1e-6)
    assert np.all(sol.p <= sc.p_max[:, None] * (1 + 1e-9)) and np.all(sol.p >= 0)
    assert np.all(sol.f <= sc.f_max[:, None] * (1 + 1e-9)) and np.all(sol.f >= ra.F_FLOOR)
    assert np.all(sol.f_uav <= sc.uav.f_max * (1 + 1e-9))
    assert np.all(sol.p_uav <= sc.uav.p_max * (1 + 1e-9))
    assert np.all(sol.xi >= ra.xi_function(sol.gamma) - 1e-9)
    assert evaluate(sc, new).objective <= evaluate(sc, state).objective * (1 + 1e-9)


def test_tight_budget_makes_xi_epigraph_tight():
    sc = tiny(1, m=2, u=3, n=3, devices={"energy_budget": 0.002})
    state = start(sc)
    sol = ra.solve_power_freq(sc, state)
    used = energy_feasibility(sc, evaluate(sc, sol.apply(state))).device_used
    active = used >= sc.energy_budget * (1 - 1e-6)
    assert active.any()
    res = ra.xi_epigraph_residual(sol.gamma[active], sol.xi[active])
    assert np.all(res >= -1e-6)


def test_single_device_slot_matches_grid():
    sc = tiny(0, m=1, u=1, n=1, devices={"energy_budget": 0.0015})
    state = start(sc)
    sol = ra.solve_power_freq(sc, state)
    fs = np.logspace(np.log10(sc.f_max[0]) - 1.0, np.log10(sc.f_max[0]), 200)
    ps = np.logspace(np.log10(sc.p_max[0]) - 2.0, np.log10(sc.p_max[0]), 200)
    fixed = state.with_(f_uav=sol.f_uav, p_uav=sol.p_uav)
    best, arg = np.inf, None
    for f in fs:
        for p in ps:
            cand = fixed.with_(f=np.array([[f]]), p=np.array([[p]]))
            b = evaluate(sc, cand)
            if energy_feasibility(sc, b).feasible(0.0) and b.objective < best:
                best, arg = b.objective, (f, p)
    exact = evaluate(sc, sol.apply(state)).objective
    assert exact <= best * (1 + 1e-9)
    # one log-grid step in each coordinate
    df, dp = np.log(fs[1] / fs[0]), np.log(ps[1] / ps[0])
    assert abs(np.log(sol.f[0, 0] / arg[0])) <= df + 1e-12
    assert abs(np.log(sol.p[0, 0] / arg[1])) <= dp + 1e-12


def test_halving_uav_budget_never_helps():
    sc = tiny(2, m=3, u=4, n=4, uav={"energy_budget": 0.5})
    state = start(sc)
    full = ra.solve_power_freq(sc, state)
    half_sc = tiny(2, m=3, u=4, n=4, uav={"energy_budget": 0.25})
    half = ra.solve_power_freq(half_sc, state)
    assert half.objective >= full.objective * (1 - 1e-9)


def test_uav_frequency_at_max_unless_budget_binds():
    sc = tiny(3, m=2, u=3, n=3)
    sol = ra.solve_power_freq(sc, start(sc))
    rep = energy_feasibility(sc, evaluate(sc, sol.apply(start(sc))))
    if rep.uav_used < sc.uav.energy_budget * (1 - 1e-6):
        assert sol.f_uav == pytest.approx(np.full(sc.slots, sc.uav.f_max), rel=1e-6)


def test_pinned_devices_keep_their_settings():
    sc = tiny(0, m=2, u=3, n=3)
    state = start(sc, device_fraction=0.5)
    sol = ra.solve_power_freq(sc, state, pin_devices=True)
    assert np.array_equal(sol.f, np.clip(state.f, ra.F_FLOOR, sc.f_max[:, None]))
    assert np.array_equal(sol.p, state.p)


def test_impossible_budget_reports_infeasible():
    sc = tiny(0, m=2, u=3, n=3, devices={"energy_budget": 1e-9})
    with pytest.raises(SubproblemError) as err:
        ra.solve_power_freq(sc, start(sc, repair=False))
    assert err.value.stage == "power"
