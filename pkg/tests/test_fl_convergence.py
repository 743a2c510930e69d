import csv
import io
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uavfl import fl_convergence as fl


def test_local_bound_example():
    r = fl.local_rounds_bound(1.0, 1.0, 1.0, 0.1)
    assert r == pytest.approx(2 * math.log(10), rel=1e-12)
    assert r == pytest.approx(4.605, abs=5e-4)
    assert math.ceil(r) == 5


def test_global_bound_example():
    n = fl.global_rounds_bound(1.0, 1.0, 0.5, 0.1, 0.1)
    assert n == pytest.approx(2 / 0.45 * math.log(10), rel=1e-12)
    assert n == pytest.approx(10.23, abs=5e-3)
    assert math.ceil(n) == 11


def test_unit_accuracy_needs_no_rounds():
    assert fl.local_rounds_bound(1.0, 1.0, 1.0, 1.0) == 0.0
    assert fl.global_rounds_bound(1.0, 1.0, 0.5, 0.1, 1.0) == 0.0


def test_limits():
    assert fl.local_rounds_bound(2.0, 1.0, 1.0, 0.1) == math.inf  # lr = 2 / L
    assert fl.local_rounds_bound(2.0, 1.0, 1.0 - 1e-9, 0.1) > 1e8
    assert fl.global_rounds_bound(1.0, 1.0, 0.5, 1 - 1e-9, 0.1) > 1e9


@pytest.mark.parametrize("args", [(1.0, 1.0, 0.0, 0.1), (1.0, 1.0, 2.5, 0.1), (1.0, 1.0, 1.0, 0.0), (1.0, 1.0, 1.0, 1.5)])
def test_local_bound_domain(args):
    with pytest.raises(ValueError):
        fl.local_rounds_bound(*args)


@pytest.mark.parametrize("args", [(2.0, 1.0, 0.6, 0.1, 0.1), (1.0, 1.0, 0.0, 0.1, 0.1), (1.0, 1.0, 0.5, 1.0, 0.1)])
def test_global_bound_domain(args):
    with pytest.raises(ValueError):
        fl.global_rounds_bound(*args)


def test_round_bounds_record():
    rb = fl.round_bounds(4.0, 1.0, 0.25, 0.25, 0.1, 0.1)
    assert rb.local_rounds == fl.local_rounds_bound(4.0, 1.0, 0.25, 0.1)
    assert rb.global_ceil == math.ceil(rb.global_rounds)
    with pytest.raises(ValueError):
        fl.RoundBounds(1.0, 2.0, 0.5, 0.1, 0.1, 0.1, 1.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_bounds_grow_as_accuracy_tightens(e1, e2):
    lo, hi = sorted((e1, e2))
    assert fl.local_rounds_bound(4.0, 1.0, 0.25, lo) >= fl.local_rounds_bound(4.0, 1.0, 0.25, hi)
    assert fl.global_rounds_bound(4.0, 1.0, 0.25, 0.1, lo) >= fl.global_rounds_bound(4.0, 1.0, 0.25, 0.1, hi)
    assert fl.global_rounds_bound(4.0, 1.0, 0.25, hi, 0.1) >= fl.global_rounds_bound(4.0, 1.0, 0.25, lo, 0.1)


def test_task_construction():
    task = fl.make_task(3, n_devices=3, dim=4, L=5.0, upsilon=0.5)
    eig = np.linalg.eigvalsh(task.A)
    assert eig.min() == pytest.approx(0.5) and eig.max() == pytest.approx(5.0)
    assert task.gap(task.optimum) == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(task.grad(task.optimum), 0.0, atol=1e-10)
    with pytest.raises(ValueError):
        fl.SyntheticFlTask(task.A, task.b, 4.0, 0.5, task.samples, task.theta0)


def test_single_device_matches_gradient_descent():
    lam, lr, L, ups = 3.0, 0.2, 4.0, 1.0
    task = fl.SyntheticFlTask(np.array([[[lam]]]), np.array([[1.5]]), L, ups, np.array([10.0]), np.array([4.0]))
    loc = fl.local_train(task, 0, task.theta0, lr, 0.5, 6)  # later gaps drown in rounding
    gaps = np.array(loc.surrogate) - loc.optimum
    ratios = gaps[1:] / gaps[:-1]
    assert ratios == pytest.approx(np.full(6, (1 - lr * lam) ** 2), rel=1e-9)
    assert np.all(ratios <= 1 - lr * ups * (2 - L * lr) / 2)
    # one local step on the corrected surrogate is a gradient step of size lr * rho
    tr = fl.simulate_fl(task, lr, 0.5, 1, 3)
    th = task.theta0.copy()
    for n in range(3):
        th = th - lr * 0.5 * task.grad(th)
        assert tr.thetas[n + 1] == pytest.approx(th, rel=1e-12)


def test_start_at_optimum_stays():
    task = fl.make_task(1)
    tr = fl.simulate_fl(task, 0.25, 0.25, 5, 4, theta0=task.optimum)
    assert max(abs(g) for g in tr.global_gap) <= 1e-12
    for slot in tr.local:
        for loc in slot:
            assert np.allclose(loc.increment, 0.0, atol=1e-12)


def test_local_surrogate_descends():
    task = fl.make_task(2)
    tr = fl.simulate_fl(task, 1 / task.L, task.upsilon / task.L, 8, 5)
    for slot in tr.local:
        for loc in slot:
            assert np.all(np.diff(loc.surrogate) <= 1e-12)
            assert loc.surrogate[-1] >= loc.optimum - 1e-12


def test_global_gap_contracts():
    task = fl.make_task(4)
    tr = fl.simulate_fl(task, 1 / task.L, task.upsilon / task.L, 10, 30)
    gaps = np.array(tr.global_gap)
    assert np.all(np.diff(gaps) <= 1e-12) and gaps[-1] < 0.5 * gaps[0]
    w = fl.simulate_fl(task, 1 / task.L, task.upsilon / task.L, 10, 30, weighted=True)
    assert w.global_gap[-1] < w.global_gap[0]


@pytest.mark.parametrize("lr_f,rho_f", [(1.0, 1.0), (0.5, 0.5), (1.5, 0.25)])
def test_bounds_hold_on_twenty_tasks(lr_f, rho_f):
    t0 = time.perf_counter()
    for seed in range(20):
        task = fl.make_task(seed)
        lr, rho = lr_f / task.L, rho_f * task.upsilon / task.L
        b = fl.round_bounds(task.L, task.upsilon, lr, rho, 0.1, 0.1)
        assert max(fl.empirical_local_rounds(task, task.theta0, lr, rho, 0.1)) <= b.local_ceil
        assert fl.empirical_global_slots(task, lr, rho, b.local_ceil, 0.1) <= b.global_ceil
    assert time.perf_counter() - t0 < 30


def test_trace_csv():
    task = fl.make_task(0, n_devices=2, dim=2)
    tr = fl.simulate_fl(task, 0.25, 0.25, 2, 2)
    rows = list(csv.DictReader(io.StringIO(fl.trace_to_csv(tr))))
    assert len(rows) == 3 + 2 * 2 * 3
    glob = [r for r in rows if r["device"] == "-1"]
    assert [float(r["loss"]) for r in glob] == list(tr.global_gap)
    assert fl.trace_to_csv(tr) == fl.trace_to_csv(fl.simulate_fl(task, 0.25, 0.25, 2, 2))
