"""Computing frequencies and transmit powers with RBs and trajectory fixed.

The upload energy ``p d / R`` is not convex in the power.  Substituting the
inverse spectral efficiency ``gamma = 1 / log2(1 + p g / (B s2))`` makes the
upload time linear, ``d gamma / (S B)``, and the energy
``s2 d / (g S) * gamma (2^(1/gamma) - 1)``.  The last factor is the
perspective of ``exp(ln 2 x) - 1`` and is convex; it is bounded by an
auxiliary ``Xi`` through the exponential cone
``gamma exp(ln 2 / gamma) <= Xi + gamma``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from . import _cvx
from .scenario import Scenario
from .system_model import AllocationState, SubproblemError, channel_gains, evaluate

__all__ = [
    "PowerFreqSolution",
    "gamma_from_power",
    "power_from_gamma",
    "gamma_floor",
    "xi_epigraph_residual",
    "xi_function",
    "NonconvexityReport",
    "verify_nonconvexity_g",
    "energy_ratio",
    "energy_ratio_witness",
    "solve_power_freq",
    "objective_check",
    "F_FLOOR",
]

LN2 = math.log(2.0)
F_FLOOR = 1e3  # Hz; keeps training time finite
GHZ = 1e9
BUDGET_CAP = 100.0  # budgets beyond this multiple of the peak energy use are clipped to it
SOLVER_OPTS = {"tol_gap_abs": 1e-10, "tol_gap_rel": 1e-10, "tol_feas": 1e-10, "max_iter": 500}


def gamma_from_power(p, g, bandwidth: float, noise: float):
    """``1 / log2(1 + p g / (B s2))``: strictly decreasing in ``p``."""
    return 1.0 / np.log2(1.0 + np.asarray(p, dtype=float) * np.asarray(g) / (bandwidth * noise))


def power_from_gamma(gamma, g, bandwidth: float, noise: float):
    """Inverse of :func:`gamma_from_power`: ``(B s2 / g)(2^(1/gamma) - 1)``."""
    gamma = np.asarray(gamma, dtype=float)
    return bandwidth * noise / np.asarray(g) * np.expm1(LN2 / gamma)


def gamma_floor(p_max, g, bandwidth: float, noise: float):
    """Smallest admissible ``gamma``: the power box ``p <= p_max`` in gamma form."""
    return gamma_from_power(p_max, g, bandwidth, noise)


def xi_function(gamma):
    """``gamma (2^(1/gamma) - 1)``, the quantity ``Xi`` must dominate."""
    gamma = np.asarray(gamma, dtype=float)
    return gamma * np.expm1(LN2 / gamma)


def xi_epigraph_residual(gamma, xi):
    """``gamma 2^(1/gamma) - (Xi + gamma)``; feasible iff ``<= 0``."""
    gamma = np.asarray(gamma, dtype=float)
    return gamma * np.exp2(1.0 / gamma) - (np.asarray(xi, dtype=float) + gamma)


def energy_ratio(x, a: float = 1.0, b: float = 1.0):
    """``g(x) = a x / log2(1 + b x)``: upload energy as a function of power."""
    x = np.asarray(x, dtype=float)
    return a * x / np.log2(1.0 + b * x)


def energy_ratio_witness(x, a: float = 1.0, b: float = 1.0):
    """``g_tilde(x) = (a b^2 x + 2 a b) ln(1 + b x) - 2 a b^2 x``.

    The second derivative of :func:`energy_ratio` is
    ``-ln 2 * g_tilde(x) / ((1 + b x)^2 ln^3(1 + b x))``, so ``g_tilde >= 0``
    means ``g`` is concave.  ``g_tilde(0) = 0``, its derivative
    ``a b^2 ln(1 + b x) - a b^3 x / (1 + b x)`` vanishes at 0 and its second
    derivative ``a b^4 x / (1 + b x)^2`` is nonnegative.
    """
    x = np.asarray(x, dtype=float)
    return (a * b**2 * x + 2 * a * b) * np.log1p(b * x) - 2 * a * b**2 * x


@dataclass(frozen=True)
class NonconvexityReport:
    points: tuple[float, ...]
    second_derivative: tuple[float, ...]
    witness_grid: tuple[float, ...]
    witness_values: tuple[float, ...]

    @property
    def concave_at_points(self) -> bool:
        return all(v < 0 for v in self.second_derivative)

    @property
    def witness_nonnegative(self) -> bool:
        return all(v >= 0 for v in self.witness_values)


def verify_nonconvexity_g(points=(0.5, 1.0, 2.0, 10.0), a: float = 1.0, b: float = 1.0, grid_size: int = 61) -> NonconvexityReport:
    """Numeric evidence that ``a x / log2(1 + b x)`` is concave on ``x > 0``.

    Central second differences at ``points`` should be negative, and the
    closed-form witness :func:`energy_ratio_witness` nonnegative on a log
    grid over ``[1e-3, 1e3]``.  Since the upload energy has this shape in
    the power, a budget on its sum over slots bounds a sum of concave
    functions and is not a convex set in the powers.
    """
    sd = []
    for x in points:
        h = 1e-4 * max(1.0, x)
        fx = energy_ratio(np.array([x - h, x, x + h]), a, b)
        sd.append(float((fx[0] - 2 * fx[1] + fx[2]) / h**2))
    grid = np.logspace(-3, 3, grid_size)
    wit = energy_ratio_witness(grid, a, b)
    return NonconvexityReport(tuple(points), tuple(sd), tuple(grid.tolist()), tuple(wit.tolist()))


@dataclass(frozen=True)
class PowerFreqSolution:
    f: np.ndarray  # (M, N) Hz
    f_uav: np.ndarray  # (N,) Hz
    gamma: np.ndarray  # (M, N)
    gamma_down: np.ndarray  # (M, N)
    xi: np.ndarray  # (M, N)
    xi_down: np.ndarray  # (M, N)
    p: np.ndarray  # (M, N) W
    p_uav: np.ndarray  # (M, N) W
    eta: np.ndarray  # (N,)
    objective: float  # gamma-form objective
    status: str

    def apply(self, state: AllocationState) -> AllocationState:
        return state.with_(f=self.f, f_uav=self.f_uav, p=self.p, p_uav=self.p_uav, eta=None)


class _PowerProgram:
    """DPP-compiled gamma/Xi program for one (M, N) shape; frequencies in GHz."""

    def __init__(self, m: int, n: int):
        self.fg = cp.Variable((m, n), name="f")
        self.fu = cp.Variable(n, name="f_uav")
        self.gam = cp.Variable((m, n), name="gamma")
        self.gam_d = cp.Variable((m, n), name="gamma_down")
        self.xi = cp.Variable((m, n), name="xi")
        self.xi_d = cp.Variable((m, n), name="xi_down")
        self.eta = cp.Variable(n, name="eta")

        self.cyc = cp.Parameter((m, n), nonneg=True, name="cycles")  # Gcycles
        self.cyc_e = cp.Parameter((m, n), nonneg=True, name="cycles_energy")  # kappa 1e27 cycles
        self.agg = cp.Parameter(n, nonneg=True, name="agg_cycles")  # Gcycles
        self.agg_e = cp.Parameter(n, nonneg=True, name="agg_energy")
        self.up = cp.Parameter((m, n), nonneg=True, name="up")  # d / (S B)
        self.down = cp.Parameter((m, n), nonneg=True, name="down")
        self.k_up = cp.Parameter((m, n), nonneg=True, name="k_up")  # s2 d / (g S)
        self.k_dn = cp.Parameter((m, n), nonneg=True, name="k_down")
        self.g_min = cp.Parameter((m, n), pos=True, name="gamma_min")
        self.gd_min = cp.Parameter((m, n), pos=True, name="gamma_down_min")
        self.f_lo = cp.Parameter((m, n), pos=True, name="f_min")
        self.f_hi = cp.Parameter((m, n), pos=True, name="f_max")
        self.g_max = cp.Parameter((m, n), pos=True, name="gamma_max")
        self.fu_hi = cp.Parameter(pos=True, name="f_uav_max")
        self.e_dev = cp.Parameter(m, name="device_budget")
        self.e_uav = cp.Parameter(name="uav_budget")

        ones_m = np.ones((m, 1))
        ln2 = np.full((m, n), LN2)
        t_train = cp.multiply(self.cyc, cp.inv_pos(self.fg))
        self.c_eta = t_train + cp.multiply(self.up, self.gam) <= ones_m @ cp.reshape(self.eta, (1, n), order="C")
        self.c_dev = cp.sum(cp.multiply(self.cyc_e, cp.square(self.fg)) + cp.multiply(self.k_up, self.xi), axis=1) <= self.e_dev
        self.c_uav = cp.sum(cp.multiply(self.agg_e, cp.square(self.fu))) + cp.sum(cp.multiply(self.k_dn, self.xi_d)) <= self.e_uav
        cons = [
            self.c_eta,
            self.c_dev,
            self.c_uav,
            cp.constraints.ExpCone(ln2, self.gam, self.xi + self.gam),
            cp.constraints.ExpCone(ln2, self.gam_d, self.xi_d + self.gam_d),
            self.gam >= self.g_min,
            self.gam <= self.g_max,
            self.gam_d >= self.gd_min,
            self.fg >= self.f_lo,
            self.fg <= self.f_hi,
            self.fu >= F_FLOOR / GHZ,
            self.fu <= self.fu_hi,
        ]
        obj = m * cp.sum(self.eta) + m * cp.sum(cp.multiply(self.agg, cp.inv_pos(self.fu))) + cp.sum(cp.multiply(self.down, self.gam_d))
        self.problem = cp.Problem(cp.Minimize(obj), cons)


_local = threading.local()


def _program(m: int, n: int) -> _PowerProgram:
    cache = getattr(_local, "power", None)
    if cache is None:
        cache = _local.power = {}
    if (m, n) not in cache:
        cache[(m, n)] = _PowerProgram(m, n)
    return cache[(m, n)]


def _diagnose(scenario: Scenario, k_up: np.ndarray, k_dn: np.ndarray) -> str:
    """Name the budget that cannot be met even at minimum frequency and power."""
    cyc = scenario.train_cycles
    dev_min = np.sum(scenario.capacitance[:, None] * F_FLOOR**2 * cyc + LN2 * k_up, axis=1)
    bad = np.nonzero(dev_min > scenario.energy_budget)[0]
    if bad.size:
        return f"device energy budget binding and infeasible for devices {bad.tolist()}"
    agg = scenario.uav.cycles_per_bit * np.sum(scenario.model_size, axis=0)
    uav_min = float(np.sum(scenario.uav.capacitance * F_FLOOR**2 * agg) + LN2 * np.sum(k_dn))
    if uav_min > scenario.uav.energy_budget:
        return "UAV energy budget binding and infeasible"
    return "solver reported infeasibility"


GAMMA_CAP = 1e6  # inverse spectral efficiency ceiling; only binds when pinned


def solve_power_freq(scenario: Scenario, state: AllocationState, *, pin_devices: bool = False) -> PowerFreqSolution:
    """Jointly optimal ``f, f_UAV, p, p_u`` for fixed RB shares and trajectory.

    With ``pin_devices`` the device frequencies and powers stay at their
    values in ``state`` and only the UAV side is optimized.
    """
    ch, uav = scenario.channel, scenario.uav
    m, n = scenario.n_devices, scenario.slots
    g = channel_gains(scenario, state.q)
    share = state.rb_share
    if np.any(share <= 0):
        raise SubproblemError("power", "a device holds no bandwidth")
    d_agg = np.broadcast_to(scenario.aggregate_size, (m, n))
    cyc = scenario.train_cycles
    agg = uav.cycles_per_bit * np.sum(scenario.model_size, axis=0)
    k_up = ch.noise_density * scenario.model_size / (g * share)
    k_dn = ch.noise_density_down * d_agg / (g * share)

    prog = _program(m, n)
    prog.cyc.value = cyc / GHZ
    prog.cyc_e.value = scenario.capacitance[:, None] * cyc * GHZ**2
    prog.agg.value = agg / GHZ
    prog.agg_e.value = uav.capacitance * agg * GHZ**2
    prog.up.value = scenario.model_size / (share * ch.rb_bandwidth)
    prog.down.value = d_agg / (share * ch.rb_bandwidth)
    prog.k_up.value = k_up
    prog.k_dn.value = k_dn
    prog.gd_min.value = gamma_floor(uav.p_max, g, ch.rb_bandwidth, ch.noise_density_down)
    g_min = gamma_floor(scenario.p_max[:, None], g, ch.rb_bandwidth, ch.noise_density)
    if pin_devices:
        f_fix = np.clip(np.asarray(state.f, dtype=float), F_FLOOR, scenario.f_max[:, None])
        g_fix = np.maximum(gamma_from_power(state.p, g, ch.rb_bandwidth, ch.noise_density), g_min)
        prog.f_lo.value = f_fix / GHZ
        prog.f_hi.value = f_fix / GHZ
        prog.g_min.value = g_fix
        prog.g_max.value = g_fix
    else:
        prog.f_lo.value = np.full((m, n), F_FLOOR / GHZ)
        prog.f_hi.value = np.repeat(scenario.f_max[:, None], n, axis=1) / GHZ
        prog.g_min.value = g_min
        prog.g_max.value = np.maximum(np.full((m, n), GAMMA_CAP), 2 * g_min)
    prog.fu_hi.value = uav.f_max / GHZ
    # Energy use peaks at the box maxima; a budget far above that peak binds
    # nothing but wrecks the conic scaling, so clip it at BUDGET_CAP times the peak.
    peak = evaluate(scenario, state.with_(f=np.repeat(scenario.f_max[:, None], n, axis=1), f_uav=np.full(n, uav.f_max),
                                          p=np.repeat(scenario.p_max[:, None], n, axis=1),
                                          p_uav=np.full((m, n), uav.p_max)))
    prog.e_dev.value = np.minimum(scenario.energy_budget, BUDGET_CAP * np.sum(peak.e_train + peak.e_up, axis=1))
    prog.e_uav.value = min(uav.energy_budget, BUDGET_CAP * float(np.sum(peak.e_agg) + np.sum(peak.e_down)))
    status = _cvx.solve(prog.problem, SOLVER_OPTS, "power")
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or prog.gam.value is None:
        raise SubproblemError("power", f"{status}: {_diagnose(scenario, k_up, k_dn)}")

    gam = np.clip(np.asarray(prog.gam.value), prog.g_min.value, prog.g_max.value)
    gam_d = np.maximum(np.asarray(prog.gam_d.value), prog.gd_min.value)
    p = np.clip(power_from_gamma(gam, g, ch.rb_bandwidth, ch.noise_density), 0.0, scenario.p_max[:, None])
    if pin_devices:
        p = np.clip(np.asarray(state.p, dtype=float), 0.0, scenario.p_max[:, None])
        gam = gamma_from_power(p, g, ch.rb_bandwidth, ch.noise_density)
    p_uav = np.clip(power_from_gamma(gam_d, g, ch.rb_bandwidth, ch.noise_density_down), 0.0, uav.p_max)
    f = np.clip(np.asarray(prog.fg.value) * GHZ, F_FLOOR, scenario.f_max[:, None])
    if pin_devices:
        f = f_fix
    f_uav = np.clip(np.asarray(prog.fu.value) * GHZ, F_FLOOR, uav.f_max)
    t_up = scenario.model_size * gam / (share * ch.rb_bandwidth)
    eta = np.max(cyc / f + t_up, axis=0)
    obj = float(m * np.sum(eta) + m * np.sum(agg / f_uav) + np.sum(d_agg * gam_d / (share * ch.rb_bandwidth)))
    return PowerFreqSolution(
        f=f,
        f_uav=f_uav,
        gamma=gam,
        gamma_down=gam_d,
        xi=np.asarray(prog.xi.value),
        xi_down=np.asarray(prog.xi_d.value),
        p=p,
        p_uav=p_uav,
        eta=eta,
        objective=obj,
        status=status,
    )


def objective_check(scenario: Scenario, state: AllocationState, sol: PowerFreqSolution) -> float:
    """Relative gap between the gamma-form objective and the exact model at the recovered point."""
    exact = evaluate(scenario, sol.apply(state)).objective
    return abs(exact - sol.objective) / abs(exact)
