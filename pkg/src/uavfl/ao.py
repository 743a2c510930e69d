"""Alternating optimization over RB shares, trajectory, and frequency/power.

Each outer iteration solves the three blocks in order (RBs, trajectory,
frequencies and powers), each with the other two held at their latest
values.  Every block decreases the exact objective, so the sequence is
nonincreasing; a candidate that would raise the objective by solver noise
is rejected and the incumbent kept.  After convergence the relaxed RB
shares are re-solved once more and rounded onto a sub-RB grid.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rb_allocation as rb
from .resource_allocation import solve_power_freq
from .scenario import Scenario
from .system_model import (
    AllocationState,
    LatencyBreakdown,
    SubproblemError,
    energy_feasibility,
    evaluate,
    kinematics_check,
)
from .trajectory_sca import refresh_reference, run_sca

__all__ = [
    "AoConfig",
    "AoIteration",
    "AoTrace",
    "AoResult",
    "initial_state",
    "repair_energy",
    "run_ao",
    "complexity_estimate",
    "audit",
]


@dataclass(frozen=True)
class AoConfig:
    eps: float = 1e-3  # relative objective change that stops the loop
    l_max: int = 30
    chi: int = rb.DEFAULT_CHI
    sca_iters: int = 30
    sca_tol: float = 1e-4
    balance_rounding: bool = True
    # blocks pinned by the benchmark schemes
    optimize_rb: bool = True
    optimize_trajectory: bool = True
    pin_devices: bool = False
    # replaces the relaxed RB stage (used by thresholding); returns a state
    rb_override: Callable[[Scenario, AllocationState], AllocationState] | None = None


@dataclass(frozen=True)
class AoIteration:
    index: int
    objective: float
    stage_objectives: dict
    energy_ok: bool
    kinematics_ok: bool
    seconds: float


@dataclass(frozen=True)
class AoTrace:
    iterations: tuple[AoIteration, ...]
    converged: bool
    relaxed_objective: float
    final_objective: float
    notes: tuple[str, ...] = ()

    @property
    def objectives(self) -> list[float]:
        return [it.objective for it in self.iterations]

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "relaxed_objective": self.relaxed_objective,
            "final_objective": self.final_objective,
            "notes": list(self.notes),
            "iterations": [
                {
                    "index": it.index,
                    "objective": it.objective,
                    "stages": it.stage_objectives,
                    "energy_ok": it.energy_ok,
                    "kinematics_ok": it.kinematics_ok,
                    "seconds": it.seconds,
                }
                for it in self.iterations
            ],
        }


@dataclass(frozen=True)
class AoResult:
    state: AllocationState
    breakdown: LatencyBreakdown
    trace: AoTrace
    audits: dict = field(default_factory=dict)

    @property
    def objective(self) -> float:
        return self.breakdown.objective


def _scaled(state: AllocationState, dev: np.ndarray | None = None, uav: float | None = None) -> AllocationState:
    out = state
    if dev is not None:
        out = out.with_(f=state.f * dev[:, None], p=state.p * dev[:, None])
    if uav is not None:
        out = out.with_(f_uav=state.f_uav * uav, p_uav=state.p_uav * uav)
    return out


def repair_energy(scenario: Scenario, state: AllocationState, margin: float = 1e-3) -> tuple[AllocationState, list[str]]:
    """Scale frequencies and powers down until every budget holds with ``margin``.

    Device ``m``'s frequency and power are scaled by a common factor found
    by bisection (energy is increasing in both); likewise the UAV's.
    """
    notes = []
    b = evaluate(scenario, state)
    dev_used = np.sum(b.e_train + b.e_up, axis=1)
    target = scenario.energy_budget * (1 - margin)
    factors = np.ones(scenario.n_devices)
    for m in np.nonzero(dev_used > target)[0]:
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            fac = np.ones(scenario.n_devices)
            fac[m] = mid
            bb = evaluate(scenario, _scaled(state, fac))
            e = np.sum(bb.e_train[m] + bb.e_up[m])
            lo, hi = (mid, hi) if e <= target[m] else (lo, mid)
        factors[m] = lo
        notes.append(f"device {m}: frequency and power scaled by {lo:.4f} to meet its energy budget")
    state = _scaled(state, factors)
    b = evaluate(scenario, state)
    uav_used = float(np.sum(b.e_agg) + np.sum(b.e_down))
    uav_target = scenario.uav.energy_budget * (1 - margin)
    if uav_used > uav_target:
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            bb = evaluate(scenario, _scaled(state, uav=mid))
            e = float(np.sum(bb.e_agg) + np.sum(bb.e_down))
            lo, hi = (mid, hi) if e <= uav_target else (lo, mid)
        state = _scaled(state, uav=lo)
        notes.append(f"UAV: frequency and power scaled by {lo:.4f} to meet its energy budget")
    return state, notes


def initial_state(scenario: Scenario, *, alpha: np.ndarray | None = None, rb_scale: float = 1.0,
                  device_fraction: float = 1.0, repair: bool = True) -> tuple[AllocationState, list[str]]:
    """Feasible starting point: equal RB split, maximum frequencies, half-maximum
    powers and the straight-line trajectory, scaled into the energy budgets.

    ``device_fraction`` sets the device frequencies as a fraction of their
    maxima (the fixed-allocation benchmark uses one half).
    """
    m, n, u = scenario.n_devices, scenario.slots, scenario.channel.rb_count
    if alpha is None:
        alpha = rb.staircase(np.full((m, n), u / m), u)
        rb_scale = 1.0
    state = AllocationState(
        alpha=np.asarray(alpha, dtype=float),
        f=np.repeat(scenario.f_max[:, None] * device_fraction, n, axis=1),
        f_uav=np.full(n, scenario.uav.f_max),
        p=np.repeat(scenario.p_max[:, None] / 2, n, axis=1),
        p_uav=np.full((m, n), scenario.uav.p_max / 2),
        q=scenario.straight_line(),
        rb_scale=rb_scale,
    )
    notes: list[str] = []
    if repair:
        state, notes = repair_energy(scenario, state)
    state = state.with_(slot_reference=evaluate(scenario, state).t_fl)
    return state, notes


def audit(scenario: Scenario, state: AllocationState, tol: float = 1e-6) -> dict:
    """Energy and kinematics audits; kinematics against the frozen durations
    and, separately, against the recomputed slot durations."""
    b = evaluate(scenario, state)
    energy = energy_feasibility(scenario, b)
    u = scenario.uav
    ref = state.slot_reference if state.slot_reference is not None else b.t_fl
    kin = kinematics_check(state.q, ref, u.v_min, u.v_max, u.a_max)
    kin_true = kinematics_check(state.q, b.t_fl, u.v_min, u.v_max, u.a_max)
    return {
        "energy_ok": energy.feasible(tol),
        "energy_violation": energy.max_relative_violation,
        "kinematics_ok": kin.feasible(tol),
        "kinematics_violation": kin.max_relative_violation,
        "kinematics_true_ok": kin_true.feasible(tol),
        "kinematics_true_violation": kin_true.max_relative_violation,
        "boxes": state.box_violations(scenario),
        "model_feasible": b.feasible,
    }


def _accept(scenario: Scenario, cur: AllocationState, cur_obj: float, cand: AllocationState) -> tuple[AllocationState, float]:
    val = evaluate(scenario, cand).objective
    if val <= cur_obj and energy_feasibility(scenario, evaluate(scenario, cand)).feasible(1e-9):
        return cand, val
    return cur, cur_obj


def _rb_stage(scenario: Scenario, state: AllocationState, cfg: AoConfig) -> AllocationState:
    if cfg.rb_override is not None:
        return cfg.rb_override(scenario, state)
    sol = rb.solve_relaxed(scenario, state)
    return state.with_(alpha=sol.alpha_relaxed, rb_scale=1.0, eta=None)


def run_ao(scenario: Scenario, init: AllocationState | None = None, cfg: AoConfig = AoConfig()) -> AoResult:
    """Alternate the three blocks until the relative change drops below ``cfg.eps``.

    Raises :class:`SubproblemError` tagged with the failing stage.
    """
    notes: list[str] = []
    if init is None:
        init, notes = initial_state(scenario)
    state = init
    if state.slot_reference is None:
        state = state.with_(slot_reference=evaluate(scenario, state).t_fl)
    obj = evaluate(scenario, state).objective
    if not math.isfinite(obj):
        raise SubproblemError("init", "initial state has an undefined latency")
    a0 = audit(scenario, state)
    if not a0["energy_ok"]:
        raise SubproblemError("init", f"initial state violates an energy budget by {a0['energy_violation']:.3g}")
    if not a0["kinematics_ok"]:
        raise SubproblemError("init", f"straight-line trajectory violates the kinematic limits by {a0['kinematics_violation']:.3g}")
    iters = [AoIteration(0, obj, {}, True, True, 0.0)]
    converged = False
    for l in range(1, cfg.l_max + 1):
        t0 = time.perf_counter()
        stages = {}
        if cfg.optimize_rb or cfg.rb_override is not None:
            cand = _rb_stage(scenario, state, cfg)
            if cfg.rb_override is not None:
                # heuristic stage: no optimality guarantee, accept as is
                state, obj = cand, evaluate(scenario, cand).objective
            else:
                state, obj = _accept(scenario, state, obj, cand)
            stages["rb"] = obj
        if cfg.optimize_trajectory and scenario.slots >= 3:
            res = run_sca(scenario, state, t_ref=state.slot_reference, max_iters=cfg.sca_iters, tol=cfg.sca_tol)
            cand = state.with_(q=res.q, slot_reference=res.t_ref)
            state, obj = _accept(scenario, state, obj, cand)
            stages["trajectory"] = obj
            stages["sca_iterations"] = res.iterations
            if res.failure:
                notes.append(f"iteration {l}: trajectory stage stopped early ({res.failure})")
        sol = solve_power_freq(scenario, state, pin_devices=cfg.pin_devices)
        state, obj = _accept(scenario, state, obj, sol.apply(state))
        stages["power"] = obj
        # durations for the next trajectory stage, keeping the current path feasible
        state = state.with_(slot_reference=refresh_reference(scenario, state, state.slot_reference))
        a = audit(scenario, state)
        iters.append(AoIteration(l, obj, stages, a["energy_ok"], a["kinematics_ok"], time.perf_counter() - t0))
        prev = iters[-2].objective
        if abs(prev - obj) <= cfg.eps * abs(prev):
            converged = True
            break

    # final relaxed shares at the converged point, then the binary grid
    relaxed_obj = obj
    if cfg.optimize_rb and cfg.rb_override is None:
        cand = _rb_stage(scenario, state, cfg)
        state, relaxed_obj = _accept(scenario, state, obj, cand)
    final = state
    if not _is_binary(state):
        binary = rb.reconstruct_binary(state.rb_share, cfg.chi, scenario.channel.rb_count, balance=cfg.balance_rounding)
        if binary.trimmed:
            notes.append(f"sub-RB rounding trimmed in slots {list(binary.trimmed)}")
        final = rb.apply_binary(state, binary)
        sol = solve_power_freq(scenario, final, pin_devices=cfg.pin_devices)
        if not energy_feasibility(scenario, evaluate(scenario, final)).feasible(1e-9):
            # rounding moved an energy budget over its limit
            final = sol.apply(final)
            notes.append("powers re-solved after rounding to restore an energy budget")
        else:
            final, _ = _accept(scenario, final, evaluate(scenario, final).objective, sol.apply(final))
        if cfg.optimize_trajectory and scenario.slots >= 3:
            # one more trajectory and power pass with the binary shares fixed
            obj_b = evaluate(scenario, final).objective
            res = run_sca(scenario, final, t_ref=final.slot_reference, max_iters=cfg.sca_iters, tol=cfg.sca_tol)
            final, obj_b = _accept(scenario, final, obj_b, final.with_(q=res.q, slot_reference=res.t_ref))
            sol = solve_power_freq(scenario, final, pin_devices=cfg.pin_devices)
            final, obj_b = _accept(scenario, final, obj_b, sol.apply(final))
    final = final.with_(slot_reference=refresh_reference(scenario, final, final.slot_reference))
    breakdown = evaluate(scenario, final)
    trace = AoTrace(tuple(iters), converged, relaxed_obj, breakdown.objective, tuple(notes))
    return AoResult(final, breakdown, trace, audit(scenario, final))


def _is_binary(state: AllocationState) -> bool:
    a = state.alpha
    return bool(np.all((a == 0) | (a == 1)))


def complexity_estimate(m: int, u: int, n: int, outer: int, eps_a: float = 1e-3) -> float:
    """Operation-count estimate of the whole loop, for reporting only:
    ``L ((MUN + N)^3.5 + (3MN + 3N)^3.5 + (7MN + 2N)^3.5) log(1/eps_a)``."""
    per = (m * u * n + n) ** 3.5 + (3 * m * n + 3 * n) ** 3.5 + (7 * m * n + 2 * n) ** 3.5
    return float(outer * per * math.log(1.0 / eps_a))
