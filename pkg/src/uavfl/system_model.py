"""Pure evaluation of the wireless/compute latency and energy model.

Every solver, baseline and audit goes through these functions, so there is a
single definition of each formula.  Array conventions: per-device per-slot
quantities have shape ``(M, N)``, per-slot UAV quantities ``(N,)``, the
trajectory ``(N, 2)`` and RB allocations ``(M, K, N)`` where column ``k``
carries ``rb_scale`` RBs of bandwidth (1 for whole RBs, ``1/chi`` for
sub-RBs).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
import numpy as np

from .scenario import Scenario

__all__ = [
    "SubproblemError",
    "AllocationState",
    "LatencyBreakdown",
    "KinematicsReport",
    "EnergyReport",
    "channel_gain",
    "uplink_rate",
    "downlink_rate",
    "train_latency_energy",
    "aggregation_latency_energy",
    "channel_gains",
    "spectral_efficiency",
    "evaluate",
    "objective",
    "eta_objective",
    "slot_durations",
    "kinematics_check",
    "energy_feasibility",
]


class SubproblemError(RuntimeError):
    """A subproblem solve failed; ``stage`` names the block, ``detail`` the reason."""

    def __init__(self, stage: str, detail: str):
        super().__init__(f"{stage}: {detail}")
        self.stage = stage
        self.detail = detail


def channel_gain(q, s, altitude: float, ref_gain: float):
    """LoS power gain ``ref_gain / (H^2 + |q - s|^2)``; broadcasts over leading axes."""
    q = np.asarray(q, dtype=float)
    s = np.asarray(s, dtype=float)
    d2 = np.sum((q - s) ** 2, axis=-1)
    return ref_gain / (altitude**2 + d2)


def spectral_efficiency(power, gain, bandwidth: float, noise: float):
    """``log2(1 + p g / (B sigma^2))`` in bit/s/Hz."""
    return np.log2(1.0 + np.asarray(power) * np.asarray(gain) / (bandwidth * noise))


def uplink_rate(alpha_row, p, g, bandwidth: float, noise: float):
    """Device-to-UAV rate: ``sum_u alpha_u * B * log2(1 + p g / (B sigma^2))``."""
    share = np.sum(np.asarray(alpha_row, dtype=float), axis=-1)
    return share * bandwidth * spectral_efficiency(p, g, bandwidth, noise)


def downlink_rate(alpha_row, p_uav, g, bandwidth: float, noise_down: float):
    """UAV-to-device rate; same form as the uplink with the UAV power and device noise."""
    return uplink_rate(alpha_row, p_uav, g, bandwidth, noise_down)


def train_latency_energy(data_bits, cycles_per_bit, rounds, f, capacitance):
    """Local training time ``D phi R / f`` and energy ``kappa f^2 D phi R``.

    A zero frequency with positive work returns ``inf`` latency; callers that
    must stay finite check for it before calling.
    """
    cycles = np.asarray(data_bits, dtype=float) * cycles_per_bit * rounds
    f = np.asarray(f, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(cycles > 0, cycles / f, 0.0)
    e = capacitance * f**2 * cycles
    return t, e


def aggregation_latency_energy(total_bits, cycles_per_bit, f_uav, capacitance):
    """UAV aggregation time ``phi sum d / f`` and energy ``kappa f^2 phi sum d``."""
    cycles = np.asarray(total_bits, dtype=float) * cycles_per_bit
    f_uav = np.asarray(f_uav, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(cycles > 0, cycles / f_uav, 0.0)
    e = capacitance * f_uav**2 * cycles
    return t, e


@dataclass(frozen=True)
class AllocationState:
    """Decision variables at one iterate.

    ``alpha`` is ``(M, K, N)``; device ``m`` holds ``rb_scale * sum_k alpha``
    RBs in slot ``n``.  ``eta`` is the per-slot epigraph variable; when left
    as ``None`` it is taken as the exact max of train+upload time.
    ``slot_reference`` stores the frozen slot durations the trajectory was
    last optimized against (used by the kinematics audit).
    """

    alpha: np.ndarray
    f: np.ndarray
    f_uav: np.ndarray
    p: np.ndarray
    p_uav: np.ndarray
    q: np.ndarray
    rb_scale: float = 1.0
    eta: np.ndarray | None = None
    slot_reference: np.ndarray | None = None

    @property
    def rb_share(self) -> np.ndarray:
        """RBs held per device and slot, ``(M, N)``."""
        return self.rb_scale * np.sum(self.alpha, axis=1)

    def with_(self, **changes) -> "AllocationState":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {
            "alpha": self.alpha.tolist(),
            "rb_scale": self.rb_scale,
            "f": self.f.tolist(),
            "f_uav": self.f_uav.tolist(),
            "p": self.p.tolist(),
            "p_uav": self.p_uav.tolist(),
            "q": self.q.tolist(),
        }
        if self.eta is not None:
            out["eta"] = self.eta.tolist()
        if self.slot_reference is not None:
            out["slot_reference"] = self.slot_reference.tolist()
        return out

    def box_violations(self, scenario: Scenario, tol: float = 1e-9) -> list[str]:
        """Names of violated box/assignment constraints (empty when valid)."""
        bad = []
        a = self.alpha
        if a.min() < -tol or a.max() > 1 + tol:
            bad.append("alpha outside [0, 1]")
        if np.max(np.sum(a, axis=0)) > 1 + tol:
            bad.append("RB assigned beyond capacity")
        if np.min(self.rb_share) < 1 - tol:
            bad.append("device below one RB")
        if np.any(self.f < -tol) or np.any(self.f > scenario.f_max[:, None] * (1 + tol)):
            bad.append("device frequency outside box")
        if np.any(self.f_uav < -tol) or np.any(self.f_uav > scenario.uav.f_max * (1 + tol)):
            bad.append("UAV frequency outside box")
        if np.any(self.p < -tol) or np.any(self.p > scenario.p_max[:, None] * (1 + tol)):
            bad.append("device power outside box")
        if np.any(self.p_uav < -tol) or np.any(self.p_uav > scenario.uav.p_max * (1 + tol)):
            bad.append("UAV power outside box")
        if not (np.allclose(self.q[0], scenario.uav.start) and np.allclose(self.q[-1], scenario.uav.end)):
            bad.append("trajectory endpoints not pinned")
        return bad


@dataclass(frozen=True)
class LatencyBreakdown:
    t_train: np.ndarray
    t_up: np.ndarray
    t_wait: np.ndarray
    t_agg: np.ndarray
    t_down: np.ndarray
    e_train: np.ndarray
    e_up: np.ndarray
    e_agg: np.ndarray
    e_down: np.ndarray
    t_fl: np.ndarray
    latency: np.ndarray
    infeasible: tuple[tuple[int, int, str], ...] = field(default=())

    @property
    def feasible(self) -> bool:
        return not self.infeasible

    @property
    def objective(self) -> float:
        """Total latency ``sum_m sum_n L_m[n]``; ``inf`` marks an infeasible state."""
        if self.infeasible:
            return math.inf
        return float(np.sum(self.latency))

    def to_rows(self) -> list[dict]:
        m_count, n_count = self.latency.shape
        rows = []
        for m in range(m_count):
            for n in range(n_count):
                rows.append(
                    {
                        "device": m,
                        "slot": n,
                        "t_train": self.t_train[m, n],
                        "t_up": self.t_up[m, n],
                        "t_wait": self.t_wait[m, n],
                        "t_agg": self.t_agg[n],
                        "t_down": self.t_down[m, n],
                        "e_train": self.e_train[m, n],
                        "e_up": self.e_up[m, n],
                        "e_agg": self.e_agg[n],
                        "e_down": self.e_down[m, n],
                        "t_fl": self.t_fl[n],
                        "latency": self.latency[m, n],
                    }
                )
        return rows

    def to_csv(self) -> str:
        rows = self.to_rows()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            name: getattr(self, name).tolist()
            for name in (
                "t_train", "t_up", "t_wait", "t_agg", "t_down",
                "e_train", "e_up", "e_agg", "e_down", "t_fl", "latency",
            )
        }
        payload["objective"] = self.objective if self.feasible else None
        payload["infeasible"] = [list(x) for x in self.infeasible]
        return json.dumps(payload, sort_keys=True)


def channel_gains(scenario: Scenario, q: np.ndarray) -> np.ndarray:
    """Gains ``g_m[n]`` for trajectory ``q`` of shape (N, 2); returns (M, N)."""
    return channel_gain(
        np.asarray(q)[None, :, :], scenario.positions[:, None, :], scenario.uav.altitude, scenario.channel.ref_gain
    )


def _safe_div(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    bad = (den <= 0) & (num > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(num > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.where(bad, 0.0, out), bad


def evaluate(scenario: Scenario, state: AllocationState) -> LatencyBreakdown:
    """Exact per-device, per-slot latency and energy breakdown of ``state``."""
    ch = scenario.channel
    g = channel_gains(scenario, state.q)
    share = state.rb_share
    r_up = share * ch.rb_bandwidth * spectral_efficiency(state.p, g, ch.rb_bandwidth, ch.noise_density)
    r_dn = share * ch.rb_bandwidth * spectral_efficiency(state.p_uav, g, ch.rb_bandwidth, ch.noise_density_down)

    cycles = scenario.train_cycles
    t_train, bad_train = _safe_div(cycles, state.f)
    e_train = scenario.capacitance[:, None] * state.f**2 * cycles
    t_up, bad_up = _safe_div(scenario.model_size, r_up)
    e_up = state.p * t_up

    agg_cycles = scenario.uav.cycles_per_bit * np.sum(scenario.model_size, axis=0)
    t_agg, bad_agg = _safe_div(agg_cycles, state.f_uav)
    e_agg = scenario.uav.capacitance * state.f_uav**2 * agg_cycles
    d_agg = np.broadcast_to(scenario.aggregate_size, t_up.shape)
    t_down, bad_down = _safe_div(d_agg, r_dn)
    e_down = state.p_uav * t_down

    upload_done = t_train + t_up
    slot_max = np.max(upload_done, axis=0)
    t_wait = slot_max[None, :] - upload_done
    t_fl = slot_max + t_agg + np.max(t_down, axis=0)
    latency = upload_done + t_wait + t_agg[None, :] + t_down

    infeasible = []
    for tag, mask in (("train", bad_train), ("up", bad_up), ("down", bad_down)):
        for m, n in zip(*np.nonzero(mask)):
            infeasible.append((int(m), int(n), tag))
    for n in np.nonzero(bad_agg)[0]:
        infeasible.append((-1, int(n), "agg"))

    return LatencyBreakdown(
        t_train=t_train,
        t_up=t_up,
        t_wait=t_wait,
        t_agg=t_agg,
        t_down=t_down,
        e_train=e_train,
        e_up=e_up,
        e_agg=e_agg,
        e_down=e_down,
        t_fl=t_fl,
        latency=latency,
        infeasible=tuple(infeasible),
    )


def objective(scenario: Scenario, state: AllocationState) -> float:
    return evaluate(scenario, state).objective


def eta_objective(scenario: Scenario, state: AllocationState, eta: np.ndarray | None = None) -> float:
    """Epigraph form ``sum_m sum_n (eta[n] + T_agg[n] + T_down[m, n])``.

    With ``eta`` the per-slot max of train+upload time this equals
    :func:`objective` exactly.
    """
    b = evaluate(scenario, state)
    if eta is None:
        eta = np.max(b.t_train + b.t_up, axis=0)
    m = scenario.n_devices
    return float(m * np.sum(eta) + m * np.sum(b.t_agg) + np.sum(b.t_down))


def slot_durations(scenario: Scenario, state: AllocationState) -> np.ndarray:
    """``T_FL[n]`` for the state."""
    return evaluate(scenario, state).t_fl


@dataclass(frozen=True)
class KinematicsReport:
    """Velocities ``speed[k]`` for k = 1..N-1 and accelerations for k = 2..N-1.

    ``speed[k]`` is ``|q[k] - q[k-1]| / T[k-1]`` (0-based slots).  Violation
    entries are ``(kind, slot, value, limit, relative_excess)``.
    """

    speed: np.ndarray
    accel: np.ndarray
    violations: tuple[tuple[str, int, float, float, float], ...]
    max_relative_violation: float

    def feasible(self, tol: float = 1e-6) -> bool:
        return self.max_relative_violation <= tol


def kinematics_check(
    trajectory: np.ndarray,
    durations: np.ndarray,
    v_min: float,
    v_max: float,
    a_max: float,
    tol: float = 0.0,
) -> KinematicsReport:
    q = np.asarray(trajectory, dtype=float)
    t = np.asarray(durations, dtype=float)
    vel = (q[1:] - q[:-1]) / t[:-1, None]  # vel[k-1] is v at slot k
    speed = np.linalg.norm(vel, axis=1)
    accel = np.linalg.norm(vel[1:] - vel[:-1], axis=1) / t[1:-1]

    violations = []
    worst = 0.0

    def check(kind: str, slot: int, value: float, limit: float, excess: float) -> None:
        nonlocal worst
        rel = excess / limit if limit > 0 else excess
        worst = max(worst, rel)
        if rel > tol:
            violations.append((kind, slot, float(value), float(limit), float(rel)))

    for k, s in enumerate(speed, start=1):
        check("v_max", k, s, v_max, s - v_max)
        check("v_min", k, s, v_min, v_min - s)
    for k, a in enumerate(accel, start=2):
        check("a_max", k, a, a_max, a - a_max)
    return KinematicsReport(
        speed=speed, accel=accel, violations=tuple(violations), max_relative_violation=worst
    )


@dataclass(frozen=True)
class EnergyReport:
    device_used: np.ndarray
    device_budget: np.ndarray
    uav_used: float
    uav_budget: float

    @property
    def device_margin(self) -> np.ndarray:
        """``(budget - used) / used``; negative means over budget."""
        used = np.maximum(self.device_used, 1e-300)
        return (self.device_budget - self.device_used) / used

    @property
    def uav_margin(self) -> float:
        return (self.uav_budget - self.uav_used) / max(self.uav_used, 1e-300)

    @property
    def max_relative_violation(self) -> float:
        """Largest ``(used - budget) / budget``, 0 when every budget holds."""
        dev = np.max((self.device_used - self.device_budget) / self.device_budget)
        uav = (self.uav_used - self.uav_budget) / self.uav_budget
        return float(max(0.0, dev, uav))

    def feasible(self, tol: float = 1e-6) -> bool:
        return self.max_relative_violation <= tol

    def violations(self, tol: float = 1e-6) -> list[str]:
        out = []
        for m, (u, b) in enumerate(zip(self.device_used, self.device_budget)):
            if u > b * (1 + tol):
                out.append(f"device {m}: {u:.6g} J > {b:.6g} J")
        if self.uav_used > self.uav_budget * (1 + tol):
            out.append(f"uav: {self.uav_used:.6g} J > {self.uav_budget:.6g} J")
        return out


def energy_feasibility(scenario: Scenario, breakdown: LatencyBreakdown) -> EnergyReport:
    dev = np.sum(breakdown.e_train + breakdown.e_up, axis=1)
    uav = float(np.sum(breakdown.e_agg) + np.sum(breakdown.e_down))
    return EnergyReport(
        device_used=dev,
        device_budget=scenario.energy_budget.copy(),
        uav_used=uav,
        uav_budget=scenario.uav.energy_budget,
    )


