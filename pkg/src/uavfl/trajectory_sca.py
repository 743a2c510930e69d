"""UAV trajectory by successive convex approximation.

With RB shares, frequencies and powers fixed, the rates depend on the
trajectory only through the squared distances ``Delta = H^2 + |q - s|^2``.
Writing the rate as ``log2(Delta + c) - log2(Delta)`` and linearizing the
concave ``-log2(Delta)`` around the current iterate gives a lower bound that
is concave in ``Delta`` and exact at the iterate.  Because that bound is
decreasing in ``Delta``, the slack is constrained from below,
``Delta >= H^2 + |q - s|^2``, which is convex in ``q``; at the optimum the
slack is reset to the exact distance, which can only raise the bound.

Slot durations inside the kinematic constraints are frozen at the value
computed from the current iterate (``T_ref``), so speed and acceleration
limits become second-order cone constraints.  The minimum-speed constraint is
linearized around the current iterate.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from . import _cvx
from .scenario import Scenario
from .system_model import (
    AllocationState,
    SubproblemError,
    evaluate,
    kinematics_check,
)

__all__ = [
    "ScaIterate",
    "ScaResult",
    "linearize_rate_lb",
    "rate_lb_gradient",
    "exact_rate",
    "linearize_vmin",
    "linearize_distance",
    "distance_gradient",
    "refresh_reference",
    "solve_trajectory_step",
    "run_sca",
    "surrogate_objective",
]

LN2 = math.log(2.0)
KM = 1000.0
SOLVER_OPTS = {"tol_gap_abs": 1e-9, "tol_gap_rel": 1e-9, "tol_feas": 1e-9, "max_iter": 500}


def exact_rate(delta, share, power, ref_gain: float, bandwidth: float, noise: float):
    """``S B log2(1 + p rho0 / (B s2 Delta))``."""
    c = np.asarray(power) * ref_gain / (bandwidth * noise)
    return np.asarray(share) * bandwidth * np.log2(1.0 + c / np.asarray(delta))


def linearize_rate_lb(delta, delta_ref, share, power, ref_gain: float, bandwidth: float, noise: float):
    """First-order lower bound ``R_hat`` of the rate in the squared distance.

    ``S B [log2(Delta + c) - log2(Delta_l) - (Delta - Delta_l) / (Delta_l ln 2)]``
    with ``c = p rho0 / (B s2)``.  Concave in ``Delta``, equal to the rate at
    ``Delta = Delta_l`` and below it everywhere else.
    """
    delta_ref = np.asarray(delta_ref, dtype=float)
    if np.any(delta_ref <= 0):
        raise ValueError("expansion point must be positive")
    delta = np.asarray(delta, dtype=float)
    c = np.asarray(power) * ref_gain / (bandwidth * noise)
    se = np.log2(delta + c) - np.log2(delta_ref) - (delta - delta_ref) / (delta_ref * LN2)
    return np.asarray(share) * bandwidth * se


def rate_lb_gradient(delta, delta_ref, share, power, ref_gain: float, bandwidth: float, noise: float):
    """Derivative of :func:`linearize_rate_lb` in ``Delta``."""
    c = np.asarray(power) * ref_gain / (bandwidth * noise)
    return np.asarray(share) * bandwidth * (1.0 / ((np.asarray(delta) + c) * LN2) - 1.0 / (np.asarray(delta_ref) * LN2))


def linearize_vmin(q_ref: np.ndarray, v_min: float, t_ref: np.ndarray):
    """Linearized minimum-speed constraint as ``(A, rhs)`` per segment.

    Segment ``k`` (between slots ``k - 1`` and ``k``) requires
    ``2 (dq_l)^T dq - |dq_l|^2 >= (V_min T_ref[k - 1])^2``.  Returns the
    coefficient rows ``2 dq_l`` (N-1, 2), the offsets ``|dq_l|^2`` and the
    required levels, and a callable evaluating the margin
    ``lhs - rhs`` at a trajectory (nonnegative when satisfied).
    """
    q_ref = np.asarray(q_ref, dtype=float)
    dq_l = np.diff(q_ref, axis=0)
    coef = 2.0 * dq_l
    offset = np.sum(dq_l**2, axis=1)
    need = (v_min * np.asarray(t_ref, dtype=float)[: len(dq_l)]) ** 2

    def margin(q: np.ndarray) -> np.ndarray:
        dq = np.diff(np.asarray(q, dtype=float), axis=0)
        return np.sum(coef * dq, axis=1) - offset - need

    return coef, offset, need, margin


def linearize_distance(q, q_ref, s, altitude: float):
    """Affine underestimate of ``H^2 + |q - s|^2`` around ``q_ref``.

    Broadcasts over trailing position axis (last dim 2).
    """
    q = np.asarray(q, dtype=float)
    q_ref = np.asarray(q_ref, dtype=float)
    s = np.asarray(s, dtype=float)
    diff = q_ref - s
    return altitude**2 + np.sum(diff**2, axis=-1) + 2.0 * np.sum(diff * (q - q_ref), axis=-1)


def distance_gradient(q_ref, s):
    """Gradient of :func:`linearize_distance` in ``q`` (constant)."""
    return 2.0 * (np.asarray(q_ref, dtype=float) - np.asarray(s, dtype=float))


@dataclass(frozen=True)
class ScaIterate:
    q: np.ndarray  # (N, 2)
    delta: np.ndarray  # (M, N) slack squared distances
    rate_up: np.ndarray  # (M, N) R_tilde, equal to R_hat at delta
    rate_down: np.ndarray  # (M, N)
    eta: np.ndarray  # (N,)
    t_ref: np.ndarray  # (N,) frozen slot durations used for the kinematics
    surrogate: float  # surrogate objective at the solution
    status: str


@dataclass(frozen=True)
class ScaResult:
    q: np.ndarray
    t_ref: np.ndarray
    objectives: tuple[float, ...]  # exact objective at q0 and after every step
    iterations: int
    last: ScaIterate | None
    failure: str = ""  # set when a convexified solve failed and SCA stopped early


def surrogate_objective(scenario: Scenario, state: AllocationState) -> float:
    """Exact objective in epigraph form, ``sum_m sum_n (eta + T_agg + T_down)``."""
    return evaluate(scenario, state).objective


class _TrajectoryProgram:
    """DPP-compiled convexified program for one scenario geometry.

    Lengths are in kilometres inside the program for conditioning.
    """

    def __init__(self, m: int, n: int, positions: np.ndarray, altitude: float, start, end):
        self.m, self.n = m, n
        self.free = cp.Variable((n - 2, 2), name="q_free")
        q = cp.vstack([np.asarray(start, dtype=float)[None, :] / KM, self.free, np.asarray(end, dtype=float)[None, :] / KM])
        self.z = cp.Variable((m, n), name="z")  # Delta / Delta_l
        self.w_up = cp.Variable((m, n), name="w_up")  # >= 1 / se_up
        self.w_dn = cp.Variable((m, n), name="w_dn")
        self.eta = cp.Variable(n, name="eta")

        self.delta_l = cp.Parameter((m, n), pos=True, name="delta_l")
        # log(z + snr) = log(snr) + log(1 + z / snr) keeps cone entries O(1)
        self.log_snr_up = cp.Parameter((m, n), name="log_snr_up")
        self.log_snr_dn = cp.Parameter((m, n), name="log_snr_dn")
        self.inv_snr_up = cp.Parameter((m, n), pos=True, name="inv_snr_up")
        self.inv_snr_dn = cp.Parameter((m, n), pos=True, name="inv_snr_dn")
        self.up = cp.Parameter((m, n), nonneg=True, name="up")  # d / (S B)
        self.down = cp.Parameter((m, n), nonneg=True, name="down")  # d_agg / (S B)
        self.e_up = cp.Parameter((m, n), nonneg=True, name="e_up")
        self.e_down = cp.Parameter((m, n), nonneg=True, name="e_down")
        self.t_train = cp.Parameter((m, n), name="t_train")
        self.dev_room = cp.Parameter(m, name="dev_room")
        self.uav_room = cp.Parameter(name="uav_room")
        self.vmax_len = cp.Parameter(n - 1, nonneg=True, name="vmax_len")
        self.vmin_coef = cp.Parameter((n - 1, 2), name="vmin_coef")
        self.vmin_rhs = cp.Parameter(n - 1, name="vmin_rhs")
        self.inv_t = cp.Parameter((n - 1, 2), pos=True, name="inv_t")
        self.amax_len = cp.Parameter(max(n - 2, 1), nonneg=True, name="amax_len")

        ones_m = np.ones((m, 1))
        qx = ones_m @ cp.reshape(q[:, 0], (1, n), order="C")
        qy = ones_m @ cp.reshape(q[:, 1], (1, n), order="C")
        sx = np.repeat(positions[:, :1], n, axis=1) / KM
        sy = np.repeat(positions[:, 1:2], n, axis=1) / KM
        dist2 = cp.square(qx - sx) + cp.square(qy - sy) + (altitude / KM) ** 2
        cons = [dist2 <= cp.multiply(self.delta_l, self.z)]
        se_up = (self.log_snr_up + cp.log(1.0 + cp.multiply(self.inv_snr_up, self.z)) - self.z + 1.0) / LN2
        se_dn = (self.log_snr_dn + cp.log(1.0 + cp.multiply(self.inv_snr_dn, self.z)) - self.z + 1.0) / LN2
        cons += [cp.inv_pos(se_up) <= self.w_up, cp.inv_pos(se_dn) <= self.w_dn]
        cons.append(self.t_train + cp.multiply(self.up, self.w_up) <= ones_m @ cp.reshape(self.eta, (1, n), order="C"))
        cons.append(cp.sum(cp.multiply(self.e_up, self.w_up), axis=1) <= self.dev_room)
        cons.append(cp.sum(cp.multiply(self.e_down, self.w_dn)) <= self.uav_room)

        dq = q[1:, :] - q[:-1, :]
        cons.append(cp.norm(dq, 2, axis=1) <= self.vmax_len)
        cons.append(cp.sum(cp.multiply(self.vmin_coef, dq), axis=1) >= self.vmin_rhs)
        if n >= 3:
            vel = cp.multiply(self.inv_t, dq)
            cons.append(cp.norm(vel[1:, :] - vel[:-1, :], 2, axis=1) <= self.amax_len)
        obj = m * cp.sum(self.eta) + cp.sum(cp.multiply(self.down, self.w_dn))
        self.problem = cp.Problem(cp.Minimize(obj), cons)


_local = threading.local()


def _program(scenario: Scenario) -> _TrajectoryProgram:
    cache = getattr(_local, "traj", None)
    if cache is None:
        cache = _local.traj = {}
    u = scenario.uav
    key = (scenario.n_devices, scenario.slots, scenario.positions.tobytes(), u.altitude, tuple(u.start), tuple(u.end))
    if key not in cache:
        if len(cache) > 64:
            cache.clear()
        cache[key] = _TrajectoryProgram(scenario.n_devices, scenario.slots, scenario.positions, u.altitude, u.start, u.end)
    return cache[key]


def _kinematic_ok(scenario: Scenario, q: np.ndarray, t_ref: np.ndarray, tol: float = 1e-9) -> bool:
    u = scenario.uav
    rep = kinematics_check(q, t_ref, u.v_min, u.v_max, u.a_max)
    return rep.max_relative_violation <= tol


def refresh_reference(scenario: Scenario, state: AllocationState, previous: np.ndarray | None) -> np.ndarray:
    """Frozen slot durations for the next convexified problem.

    Uses ``T_FL`` at the current state when the current trajectory satisfies
    the kinematics under it; otherwise clips it per segment into the
    interval the current segment lengths allow, and if the acceleration
    limit still fails keeps ``previous``.  The current trajectory is thus
    always feasible for the next problem.
    """
    u = scenario.uav
    t_new = evaluate(scenario, state).t_fl
    if previous is None or _kinematic_ok(scenario, state.q, t_new):
        return t_new
    seg = np.linalg.norm(np.diff(state.q, axis=0), axis=1)
    t_clip = t_new.copy()
    lo = seg / u.v_max
    hi = seg / u.v_min if u.v_min > 0 else np.full_like(seg, np.inf)
    t_clip[:-1] = np.clip(t_new[:-1], lo, hi)
    if _kinematic_ok(scenario, state.q, t_clip):
        return t_clip
    return np.asarray(previous, dtype=float)


def solve_trajectory_step(scenario: Scenario, state: AllocationState, t_ref: np.ndarray) -> ScaIterate:
    """One convexified trajectory solve around ``state.q``."""
    ch, uav = scenario.channel, scenario.uav
    m, n = scenario.n_devices, scenario.slots
    if n < 3:
        raise SubproblemError("trajectory", "need at least three slots for a free waypoint")
    q_l = np.asarray(state.q, dtype=float)
    pos = scenario.positions
    delta_l = uav.altitude**2 + np.sum((q_l[None, :, :] - pos[:, None, :]) ** 2, axis=2)
    share = state.rb_share
    c_up = state.p * ch.ref_gain / (ch.rb_bandwidth * ch.noise_density)
    c_dn = state.p_uav * ch.ref_gain / (ch.rb_bandwidth * ch.noise_density_down)
    b = evaluate(scenario, state)
    d_agg = np.broadcast_to(scenario.aggregate_size, (m, n))
    up = scenario.model_size / (share * ch.rb_bandwidth)
    down = d_agg / (share * ch.rb_bandwidth)

    prog = _program(scenario)
    prog.delta_l.value = delta_l / KM**2
    prog.log_snr_up.value = np.log(c_up / delta_l)
    prog.log_snr_dn.value = np.log(c_dn / delta_l)
    prog.inv_snr_up.value = delta_l / c_up
    prog.inv_snr_dn.value = delta_l / c_dn
    prog.up.value = up
    prog.down.value = down
    prog.e_up.value = state.p * up
    prog.e_down.value = state.p_uav * down
    prog.t_train.value = b.t_train
    prog.dev_room.value = scenario.energy_budget - np.sum(b.e_train, axis=1)
    prog.uav_room.value = uav.energy_budget - float(np.sum(b.e_agg))
    t_ref = np.asarray(t_ref, dtype=float)
    prog.vmax_len.value = uav.v_max * t_ref[: n - 1] / KM
    coef, offset, need, _ = linearize_vmin(q_l / KM, uav.v_min / KM, t_ref)
    prog.vmin_coef.value = coef
    prog.vmin_rhs.value = offset + need
    prog.inv_t.value = np.repeat(1.0 / t_ref[: n - 1, None], 2, axis=1)
    prog.amax_len.value = uav.a_max * t_ref[1 : n - 1] / KM if n >= 3 else np.zeros(1)
    status = _cvx.solve(prog.problem, SOLVER_OPTS, "trajectory")
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or prog.free.value is None:
        raise SubproblemError("trajectory", f"convexified program {status}")
    q = np.vstack([uav.start, KM * prog.free.value, uav.end])
    # Tighten the slack to the exact distance; the rate bound only improves.
    delta = uav.altitude**2 + np.sum((q[None, :, :] - pos[:, None, :]) ** 2, axis=2)
    r_up = linearize_rate_lb(delta, delta_l, share, state.p, ch.ref_gain, ch.rb_bandwidth, ch.noise_density)
    r_dn = linearize_rate_lb(delta, delta_l, share, state.p_uav, ch.ref_gain, ch.rb_bandwidth, ch.noise_density_down)
    eta = np.max(b.t_train + scenario.model_size / r_up, axis=0)
    surrogate = float(m * np.sum(eta) + m * np.sum(b.t_agg) + np.sum(d_agg / r_dn))
    return ScaIterate(q=q, delta=delta, rate_up=r_up, rate_down=r_dn, eta=eta, t_ref=t_ref, surrogate=surrogate, status=status)


def _budget_ok(scenario: Scenario, state: AllocationState, tol: float = 1e-9) -> bool:
    b = evaluate(scenario, state)
    dev = np.sum(b.e_train + b.e_up, axis=1)
    uav = float(np.sum(b.e_agg) + np.sum(b.e_down))
    return bool(np.all(dev <= scenario.energy_budget * (1 + tol)) and uav <= scenario.uav.energy_budget * (1 + tol))


def run_sca(
    scenario: Scenario,
    state: AllocationState,
    *,
    t_ref: np.ndarray | None = None,
    max_iters: int = 30,
    tol: float = 1e-4,
) -> ScaResult:
    """Iterate :func:`solve_trajectory_step` from ``state.q``.

    A step is accepted only if it does not raise the exact objective; the
    frozen durations are refreshed after each accepted step.  Stops when the
    relative decrease falls below ``tol`` or after ``max_iters`` solves.  A
    failed solve ends the run at the incumbent with ``failure`` set.
    """
    cur = state
    ref = refresh_reference(scenario, cur, t_ref)
    objs = [evaluate(scenario, cur).objective]
    last = None
    it = 0
    failure = ""
    while it < max_iters:
        try:
            step = solve_trajectory_step(scenario, cur, ref)
        except SubproblemError as exc:
            # keep the last accepted path; the caller sees why SCA stopped
            failure = exc.detail
            break
        it += 1
        last = step
        cand = cur.with_(q=step.q)
        val = evaluate(scenario, cand).objective
        if not (val <= objs[-1] and _budget_ok(scenario, cand)):
            # rounding-level increase: keep the incumbent and stop
            objs.append(objs[-1])
            break
        prev = objs[-1]
        cur = cand
        objs.append(val)
        ref = refresh_reference(scenario, cur, step.t_ref)
        if not math.isfinite(tol) or prev - val <= tol * abs(prev):
            break
    return ScaResult(q=cur.q, t_ref=ref, objectives=tuple(objs), iterations=it, last=last, failure=failure)

