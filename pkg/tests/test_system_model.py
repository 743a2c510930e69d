import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uavfl.system_model import (
    aggregation_latency_energy,
    channel_gain,
    downlink_rate,
    energy_feasibility,
    eta_objective,
    evaluate,
    kinematics_check,
    train_latency_energy,
    uplink_rate,
)

from conftest import start, tiny


def test_gain_directly_overhead():
    assert channel_gain([3.0, 4.0], [3.0, 4.0], 100.0, 1e-3) == pytest.approx(1e-7)


def test_gain_quarters_when_altitude_doubles():
    g1 = channel_gain([0, 0], [0, 0], 100.0, 1e-3)
    g2 = channel_gain([0, 0], [0, 0], 200.0, 1e-3)
    assert g2 == pytest.approx(g1 / 4)


def test_gain_decays_with_distance():
    d = np.logspace(0, 6, 50)
    g = channel_gain(np.stack([d, np.zeros_like(d)], axis=1), [0.0, 0.0], 100.0, 1e-3)
    assert np.all(np.diff(g) < 0) and g[-1] < 1e-14


def test_uplink_rate_example():
    r = uplink_rate([1.0], 0.1, 1e-7, 1e6, 10**-17.4)
    assert r == pytest.approx(1e6 * math.log2(1 + 0.1 * 1e-7 / (1e6 * 10**-17.4)))
    assert r == pytest.approx(1.13e7, rel=5e-3)


def test_rate_zero_alpha_and_linear_in_alpha():
    assert uplink_rate([0.0, 0.0], 0.1, 1e-7, 1e6, 1e-20) == 0.0
    r1 = uplink_rate([0.3, 0.2], 0.1, 1e-7, 1e6, 1e-20)
    r2 = uplink_rate([0.6, 0.4], 0.1, 1e-7, 1e6, 1e-20)
    assert r2 == pytest.approx(2 * r1)
    assert downlink_rate([0.3, 0.2], 0.1, 1e-7, 1e6, 1e-20) == pytest.approx(r1)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0, 3), p=st.floats(1e-4, 1), g=st.floats(1e-12, 1e-6), s2=st.floats(1e-22, 1e-18),
       k=st.floats(1.0, 3.0))
def test_rate_monotonicity(a, p, g, s2, k):
    base = uplink_rate([a], p, g, 1e6, s2)
    assert uplink_rate([a * k], p, g, 1e6, s2) >= base
    assert uplink_rate([a], p * k, g, 1e6, s2) >= base
    assert uplink_rate([a], p, g * k, 1e6, s2) >= base
    assert uplink_rate([a], p, g, 1e6, s2 * k) <= base


def test_train_latency_energy_example():
    t, e = train_latency_energy(1e6, 100, 5, 1e9, 1e-28)
    assert t == pytest.approx(0.5)
    assert e == pytest.approx(0.05)
    t0, e0 = train_latency_energy(1e6, 100, 0, 1e9, 1e-28)
    assert t0 == 0 and e0 == 0


def test_aggregation_example_and_monotone():
    t, _ = aggregation_latency_energy(8e6, 100, 1e9, 1e-28)
    assert t == pytest.approx(0.8)
    f = np.linspace(1e8, 1e10, 20)
    ts, _ = aggregation_latency_energy(8e6, 100, f, 1e-28)
    assert np.all(np.diff(ts) < 0)
    assert aggregation_latency_energy(0.0, 100, 1e9, 1e-28) == (0.0, 0.0)


def test_energy_scaling_laws():
    _, e1 = train_latency_energy(1e6, 100, 5, 1e9, 1e-28)
    _, e2 = train_latency_energy(1e6, 100, 5, 2e9, 1e-28)
    # energy kappa f^2 C is quadratic in f for fixed work; the power E/T is cubic
    assert e2 == pytest.approx(4 * e1)
    t1, _ = train_latency_energy(1e6, 100, 5, 1e9, 1e-28)
    t2, _ = train_latency_energy(1e6, 100, 5, 2e9, 1e-28)
    assert (e2 / t2) / (e1 / t1) == pytest.approx(8.0)  # power kappa f^3


def _reference_eval(sc, st):
    # second implementation straight from the model, one scalar at a time
    n, m = sc.slots, sc.n_devices
    ch, uav = sc.channel, sc.uav
    total = 0.0
    for k in range(n):
        t_upload = []
        t_down = []
        for i in range(m):
            dev = sc.devices[i]
            dx = st.q[k] - np.asarray(dev.position)
            g = ch.ref_gain / (uav.altitude**2 + dx @ dx)
            share = st.rb_scale * st.alpha[i, :, k].sum()
            r_up = share * ch.rb_bandwidth * math.log2(1 + st.p[i, k] * g / (ch.rb_bandwidth * ch.noise_density))
            r_dn = share * ch.rb_bandwidth * math.log2(1 + st.p_uav[i, k] * g / (ch.rb_bandwidth * ch.noise_density_down))
            bits = dev.samples[k] * dev.sample_bits
            t_tr = bits * dev.cycles_per_bit * dev.local_rounds / st.f[i, k]
            t_upload.append(t_tr + dev.model_size[k] / r_up)
            t_down.append(uav.aggregate_size[k] / r_dn)
        t_agg = uav.cycles_per_bit * sum(d.model_size[k] for d in sc.devices) / st.f_uav[k]
        for i in range(m):
            total += max(t_upload) + t_agg + t_down[i]
    return total


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_evaluate_matches_reference(seed, rng):
    sc = tiny(seed, m=3, u=4, n=3)
    st = start(sc)
    st = st.with_(
        f=st.f * rng.uniform(0.3, 1.0, st.f.shape),
        p=st.p * rng.uniform(0.2, 2.0, st.p.shape),
        q=st.q + np.vstack([[0, 0], rng.normal(0, 30, (sc.slots - 2, 2)), [0, 0]]),
    )
    assert evaluate(sc, st).objective == pytest.approx(_reference_eval(sc, st), rel=1e-12)


def test_evaluate_pure(desk, desk_state):
    a = evaluate(desk, desk_state)
    b = evaluate(desk, desk_state)
    assert a.objective == b.objective
    assert np.array_equal(a.latency, b.latency)


def test_eta_form_equals_objective(desk, desk_state):
    assert eta_objective(desk, desk_state) == pytest.approx(evaluate(desk, desk_state).objective, rel=1e-14)


def test_wait_zero_for_argmax_only(desk, desk_state):
    b = evaluate(desk, desk_state)
    assert np.all(b.t_wait >= 0)
    done = b.t_train + b.t_up
    arg = done == done.max(axis=0)
    assert np.all(b.t_wait[arg] == 0)
    assert np.all(b.t_wait[~arg] > 0)


def test_single_device_has_no_wait():
    sc = tiny(0, m=1, u=2, n=3)
    assert np.all(evaluate(sc, start(sc)).t_wait == 0)


def test_zero_payload_zero_latency():
    sc = tiny(0, m=2, u=3, n=3, devices={"local_rounds": 0})
    dev = tuple(d.__class__(**{**d.__dict__, "model_size": (1e-300,) * 3}) for d in sc.devices)
    uav = sc.uav.__class__(**{**sc.uav.__dict__, "aggregate_size": (0.0,) * 3})
    sc0 = sc.replace(devices=dev, uav=uav)
    b = evaluate(sc0, start(sc0))
    assert b.objective == pytest.approx(0.0, abs=1e-200)
    assert energy_feasibility(sc0, b).feasible(0.0)


def test_energy_budget_boundary():
    sc = tiny(1, m=2, u=3, n=2)
    st = start(sc, repair=False)
    b = evaluate(sc, st)
    used = np.sum(b.e_train + b.e_up, axis=1)

    def with_budget(scale):
        dev = tuple(d.__class__(**{**d.__dict__, "energy_budget": float(used[i] * scale)}) for i, d in enumerate(sc.devices))
        return sc.replace(devices=dev)

    exact = energy_feasibility(with_budget(1.0), b)
    assert exact.feasible(0.0)
    assert np.allclose(exact.device_margin, 0.0)
    tight = energy_feasibility(with_budget(0.99), b)
    assert not tight.feasible(1e-6)
    assert tight.max_relative_violation == pytest.approx(1 / 0.99 - 1)
    assert np.allclose(tight.device_margin, -0.01)


def test_kinematics_stationary_violates_vmin():
    q = np.zeros((5, 2))
    rep = kinematics_check(q, np.ones(5), 3.0, 60.0, 200.0)
    assert [v[1] for v in rep.violations if v[0] == "v_min"] == [1, 2, 3, 4]


def test_kinematics_constant_speed_line():
    q = np.stack([np.arange(6) * 10.0, np.zeros(6)], axis=1)
    rep = kinematics_check(q, np.full(6, 0.5), 3.0, 60.0, 200.0)
    assert rep.feasible(0.0)
    assert np.allclose(rep.speed, 20.0) and np.allclose(rep.accel, 0.0)


def test_kinematics_matches_finite_differences(rng):
    q = rng.normal(0, 20, (8, 2)).cumsum(axis=0)
    t = rng.uniform(0.2, 1.5, 8)
    rep = kinematics_check(q, t, 3.0, 30.0, 40.0)
    for k in range(1, 8):
        v = np.hypot(*(q[k] - q[k - 1])) / t[k - 1]
        assert rep.speed[k - 1] == pytest.approx(v)
    for k in range(2, 8):
        v1 = (q[k] - q[k - 1]) / t[k - 1]
        v0 = (q[k - 1] - q[k - 2]) / t[k - 2]
        assert rep.accel[k - 2] == pytest.approx(np.hypot(*(v1 - v0)) / t[k - 1])
    worst = max([max(0, s / 30 - 1, 1 - s / 3) for s in rep.speed] + [max(0, a / 40 - 1) for a in rep.accel])
    assert rep.max_relative_violation == pytest.approx(worst)


def test_box_violations_clean(desk, desk_state):
    assert desk_state.box_violations(desk) == []
    bad = desk_state.with_(p=desk_state.p * 10)
    assert "device power outside box" in bad.box_violations(desk)
