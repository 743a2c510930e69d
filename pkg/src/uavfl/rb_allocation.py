"""Resource-block allocation with frequencies, powers and trajectory held fixed.

All RBs in a slot share the same channel gain, so the relaxed program only
depends on the per-device RB total ``S[m, n] = sum_u alpha[m, u, n]``.  The
production solve works on ``S`` directly (``M N + N`` variables); any
per-RB ``alpha`` with those row sums and column sums at most one is optimal,
and the canonical one is the staircase layout in which lower device indices
fill lower RB indices.

The closed form follows from stationarity of the Lagrangian in ``S``::

    S* = sqrt(W / (phi - varpi)),
    W  = (mu + xi p) d / (B log2(1 + p g / B s2))
       + (1 + gamma p_u) d_agg / (B log2(1 + p_u g / B s2_down))

with ``xi`` the multiplier of the device energy budget and ``gamma`` that of
the UAV energy budget.  With a single RB, ``S`` is the RB fraction itself.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from . import _cvx
from .convex_engine import ConvexProgram, Functional, SolveReport, solve
from .scenario import Scenario
from .system_model import AllocationState, SubproblemError, channel_gains, evaluate, spectral_efficiency

__all__ = [
    "RbCoefficients",
    "RbMultipliers",
    "RbSolution",
    "BinaryAllocation",
    "rb_coefficients",
    "solve_relaxed",
    "closed_form_weights",
    "closed_form_shares",
    "closed_form_alpha",
    "staircase",
    "optimal_eta",
    "relaxed_objective",
    "nearest_counts",
    "reconstruct_binary",
    "layout_counts",
    "apply_binary",
    "reference_program",
    "solve_reference",
]

DEFAULT_CHI = 10

# Tight conic tolerances: the multipliers feed the closed form.
SOLVER_OPTS = {"tol_gap_abs": 1e-10, "tol_gap_rel": 1e-10, "tol_feas": 1e-10, "max_iter": 500}


@dataclass(frozen=True)
class RbCoefficients:
    """Everything the RB program needs once f, p and Q are fixed.

    ``up`` and ``down`` are upload/download times at one full RB
    (``d / (B log2(1 + SNR))``); dividing by ``S`` gives the actual time.
    """

    t_train: np.ndarray  # (M, N)
    up: np.ndarray  # (M, N)
    down: np.ndarray  # (M, N)
    p: np.ndarray  # (M, N)
    p_uav: np.ndarray  # (M, N)
    e_train: np.ndarray  # (M, N)
    t_agg: np.ndarray  # (N,)
    e_agg: np.ndarray  # (N,)
    rb_count: int
    device_budget: np.ndarray  # (M,)
    uav_budget: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.t_train.shape


def rb_coefficients(scenario: Scenario, state: AllocationState) -> RbCoefficients:
    ch = scenario.channel
    g = channel_gains(scenario, state.q)
    se_up = spectral_efficiency(state.p, g, ch.rb_bandwidth, ch.noise_density)
    se_dn = spectral_efficiency(state.p_uav, g, ch.rb_bandwidth, ch.noise_density_down)
    if np.any(se_up <= 0) or np.any(se_dn <= 0):
        raise SubproblemError("rb", "zero transmit power leaves a link without rate")
    b = evaluate(scenario, state)
    d_agg = np.broadcast_to(scenario.aggregate_size, se_dn.shape)
    return RbCoefficients(
        t_train=b.t_train,
        up=scenario.model_size / (ch.rb_bandwidth * se_up),
        down=d_agg / (ch.rb_bandwidth * se_dn),
        p=np.asarray(state.p, dtype=float),
        p_uav=np.asarray(state.p_uav, dtype=float),
        e_train=b.e_train,
        t_agg=b.t_agg,
        e_agg=b.e_agg,
        rb_count=ch.rb_count,
        device_budget=scenario.energy_budget,
        uav_budget=scenario.uav.energy_budget,
    )


@dataclass(frozen=True)
class RbMultipliers:
    """Dual variables of the relaxed program.

    ``phi`` (U, N) prices RB capacity, ``varpi`` (M, N) the one-RB minimum,
    ``xi`` (M,) the device energy budgets, ``gamma`` the UAV budget and
    ``mu`` (M, N) the epigraph coupling.  ``phi`` is identical across RBs of
    a slot because the RBs are interchangeable.
    """

    phi: np.ndarray
    varpi: np.ndarray
    xi: np.ndarray
    gamma: float
    mu: np.ndarray


@dataclass(frozen=True)
class RbSolution:
    shares: np.ndarray  # (M, N) relaxed RB totals
    alpha_relaxed: np.ndarray  # (M, U, N) staircase layout
    eta: np.ndarray  # (N,)
    objective: float
    multipliers: RbMultipliers
    status: str
    alpha_binary: np.ndarray | None = None  # (M, chi U, N)
    chi: int = DEFAULT_CHI


def relaxed_objective(coeffs: RbCoefficients, shares: np.ndarray, eta: np.ndarray | None = None) -> float:
    """Epigraph objective at RB totals ``shares``; ``eta`` defaults to the exact max."""
    m = coeffs.shape[0]
    if eta is None:
        eta = np.max(coeffs.t_train + coeffs.up / shares, axis=0)
    return float(m * np.sum(eta) + m * np.sum(coeffs.t_agg) + np.sum(coeffs.down / shares))


class _ReducedProgram:
    """DPP-compiled relaxed program for one (M, N) shape."""

    def __init__(self, m: int, n: int):
        self.s = cp.Variable((m, n), name="S")
        self.eta = cp.Variable(n, name="eta")
        self.t_train = cp.Parameter((m, n), name="t_train")
        self.up = cp.Parameter((m, n), nonneg=True, name="up")
        self.down = cp.Parameter((m, n), nonneg=True, name="down")
        self.e_up = cp.Parameter((m, n), nonneg=True, name="e_up")
        self.e_down = cp.Parameter((m, n), nonneg=True, name="e_down")
        self.dev_room = cp.Parameter(m, name="dev_room")
        self.uav_room = cp.Parameter(name="uav_room")
        self.rbs = cp.Parameter(nonneg=True, name="rbs")
        inv = cp.inv_pos(self.s)
        self.c_mu = cp.multiply(self.up, inv) + self.t_train <= np.ones((m, 1)) @ cp.reshape(self.eta, (1, n), order="C")
        self.c_cap = cp.sum(self.s, axis=0) <= self.rbs
        self.c_min = self.s >= 1
        self.c_dev = cp.sum(cp.multiply(self.e_up, inv), axis=1) <= self.dev_room
        self.c_uav = cp.sum(cp.multiply(self.e_down, inv)) <= self.uav_room
        obj = m * cp.sum(self.eta) + cp.sum(cp.multiply(self.down, inv))
        self.problem = cp.Problem(cp.Minimize(obj), [self.c_mu, self.c_cap, self.c_min, self.c_dev, self.c_uav])


_local = threading.local()


def _program(m: int, n: int) -> _ReducedProgram:
    cache = getattr(_local, "rb", None)
    if cache is None:
        cache = _local.rb = {}
    if (m, n) not in cache:
        cache[(m, n)] = _ReducedProgram(m, n)
    return cache[(m, n)]


def solve_relaxed(scenario: Scenario, state: AllocationState, *, coeffs: RbCoefficients | None = None) -> RbSolution:
    """Optimal relaxed RB totals, epigraph ``eta`` and all multipliers."""
    coeffs = coeffs or rb_coefficients(scenario, state)
    m, n = coeffs.shape
    u = coeffs.rb_count
    if m > u:
        raise SubproblemError("rb", f"M <= U violated: {m} devices, {u} RBs")
    dev_room = coeffs.device_budget - np.sum(coeffs.e_train, axis=1)
    uav_room = coeffs.uav_budget - float(np.sum(coeffs.e_agg))
    if np.any(dev_room <= 0):
        raise SubproblemError("rb", f"training energy alone exceeds the budget of devices {np.nonzero(dev_room <= 0)[0].tolist()}")
    if uav_room <= 0:
        raise SubproblemError("rb", "aggregation energy alone exceeds the UAV budget")

    prog = _program(m, n)
    prog.t_train.value = coeffs.t_train
    prog.up.value = coeffs.up
    prog.down.value = coeffs.down
    prog.e_up.value = coeffs.p * coeffs.up
    prog.e_down.value = coeffs.p_uav * coeffs.down
    prog.dev_room.value = dev_room
    prog.uav_room.value = uav_room
    prog.rbs.value = float(u)
    status = _cvx.solve(prog.problem, SOLVER_OPTS, "rb")
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise SubproblemError("rb", f"relaxed program {status} (energy budgets too tight for any RB split)")

    shares = np.clip(np.asarray(prog.s.value), 1.0, float(u))
    # Renormalize tiny over-allocation left by the interior-point tolerance.
    col = shares.sum(axis=0)
    over = col > u
    shares[:, over] *= u / col[over]
    eta = np.max(coeffs.t_train + coeffs.up / shares, axis=0)
    phi = np.maximum(np.asarray(prog.c_cap.dual_value, dtype=float), 0.0)
    mult = RbMultipliers(
        phi=np.broadcast_to(phi, (u, n)).copy(),
        varpi=np.maximum(np.asarray(prog.c_min.dual_value, dtype=float), 0.0),
        xi=np.maximum(np.asarray(prog.c_dev.dual_value, dtype=float), 0.0),
        gamma=max(float(prog.c_uav.dual_value), 0.0),
        mu=np.maximum(np.asarray(prog.c_mu.dual_value, dtype=float), 0.0),
    )
    return RbSolution(
        shares=shares,
        alpha_relaxed=staircase(shares, u),
        eta=eta,
        objective=relaxed_objective(coeffs, shares, eta),
        multipliers=mult,
        status=status,
    )


def closed_form_weights(mult: RbMultipliers, coeffs: RbCoefficients) -> np.ndarray:
    """``W[m, n]``: marginal value of bandwidth to device ``m`` in slot ``n``."""
    up_w = (mult.mu + mult.xi[:, None] * coeffs.p) * coeffs.up
    down_w = (1.0 + mult.gamma * coeffs.p_uav) * coeffs.down
    return up_w + down_w


def closed_form_shares(mult: RbMultipliers, coeffs: RbCoefficients) -> tuple[np.ndarray, np.ndarray]:
    """RB totals from stationarity, clipped to ``[0, U]``.

    Returns ``(shares, pinned)``; where ``phi - varpi <= 0`` the price gives
    no interior solution, the share is pinned to ``U`` and ``pinned`` marks
    the entry (the capacity price must rise there).
    """
    u = coeffs.rb_count
    w = closed_form_weights(mult, coeffs)
    phi = np.mean(np.asarray(mult.phi, dtype=float).reshape(-1, w.shape[1]), axis=0)
    den = phi[None, :] - mult.varpi
    pinned = den <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.sqrt(np.where(pinned, 0.0, w) / np.where(pinned, 1.0, den))
    s = np.where(pinned, float(u), s)
    return np.clip(s, 0.0, float(u)), pinned


def closed_form_alpha(mult: RbMultipliers, coeffs: RbCoefficients) -> np.ndarray:
    """Per-RB closed form, laid out as a staircase over the U RBs: (M, U, N)."""
    s, _ = closed_form_shares(mult, coeffs)
    return staircase(s, coeffs.rb_count)


def staircase(shares: np.ndarray, rb_count: int) -> np.ndarray:
    """Lay RB totals ``(M, N)`` onto ``rb_count`` RBs, lowest device first.

    Device ``m`` occupies ``[c_{m-1}, c_m)`` on the RB axis, where ``c`` are
    cumulative totals, so each RB carries at most one unit in total.
    """
    shares = np.asarray(shares, dtype=float)
    hi = np.cumsum(shares, axis=0)
    lo = hi - shares
    edges = np.arange(rb_count, dtype=float)
    # overlap of [lo, hi) with [u, u + 1)
    a = np.minimum(hi[:, None, :], edges[None, :, None] + 1.0) - np.maximum(lo[:, None, :], edges[None, :, None])
    return np.clip(a, 0.0, 1.0)


def optimal_eta(alpha: np.ndarray, scenario: Scenario, state: AllocationState, rb_scale: float | None = None) -> np.ndarray:
    """``eta[n] = max_m (T_train + d / R_up)`` for allocation ``alpha``."""
    scale = state.rb_scale if rb_scale is None else rb_scale
    b = evaluate(scenario, state.with_(alpha=np.asarray(alpha, dtype=float), rb_scale=scale))
    return np.max(b.t_train + b.t_up, axis=0)


@dataclass(frozen=True)
class BinaryAllocation:
    alpha: np.ndarray  # (M, chi U, N) in {0, 1}
    counts: np.ndarray  # (M, N) sub-RBs per device
    chi: int
    trimmed: tuple[int, ...] = field(default=())  # slots where rounding exceeded chi U

    @property
    def rb_scale(self) -> float:
        return 1.0 / self.chi


def nearest_counts(shares: np.ndarray, chi: int) -> np.ndarray:
    """Round-half-up of ``chi * shares``, e.g. 0.26 RB at chi = 10 gives 3 sub-RBs."""
    return np.floor(chi * np.asarray(shares, dtype=float) + 0.5 + 1e-9).astype(int)


def _largest_remainder(x: np.ndarray, total: int) -> np.ndarray:
    base = np.floor(x + 1e-9).astype(int)
    rem = x - base
    k = total - int(base.sum())
    order = sorted(range(x.size), key=lambda i: (-rem[i], i))
    if k > 0:
        for i in order[:k]:
            base[i] += 1
    elif k < 0:
        # trim the smallest remainders first, never below one sub-RB
        for i in reversed(order):
            if k == 0:
                break
            if base[i] > 1:
                base[i] -= 1
                k += 1
    return base


def reconstruct_binary(shares_or_alpha: np.ndarray, chi: int = DEFAULT_CHI, rb_count: int | None = None, *, balance: bool = True) -> BinaryAllocation:
    """Binary sub-RB allocation from relaxed RB totals (M, N) or alpha (M, U, N).

    Each RB is split into ``chi`` sub-RBs.  Device totals ``chi * S`` are
    rounded by largest remainder to a slot total of ``round(chi * sum S)``
    (capped at ``chi U``); with ``balance=False`` they are rounded to the
    nearest integer and only trimmed when they overflow.  Every device keeps
    at least one sub-RB.  Sub-RBs are laid out contiguously in device order.
    A relaxed alpha that is already binary maps each RB onto its ``chi``
    sub-RBs unchanged.
    """
    if int(chi) != chi or chi < 1:
        raise ValueError("chi must be a positive integer")
    chi = int(chi)
    arr = np.asarray(shares_or_alpha, dtype=float)
    if arr.ndim == 3:
        u = arr.shape[1] if rb_count is None else rb_count
        if np.all((np.abs(arr) < 1e-12) | (np.abs(arr - 1) < 1e-12)) and np.all(arr.sum(axis=0) <= 1 + 1e-12):
            alpha = np.repeat(np.rint(arr), chi, axis=1).astype(np.int8)
            return BinaryAllocation(alpha=alpha, counts=alpha.sum(axis=1).astype(int), chi=chi)
        shares = arr.sum(axis=1)
    else:
        if rb_count is None:
            raise ValueError("rb_count is required with (M, N) shares")
        u = rb_count
        shares = arr
    m, n = shares.shape
    cap = chi * u
    if m > cap:
        raise ValueError("more devices than sub-RBs")
    counts = np.empty((m, n), dtype=int)
    trimmed = []
    for k in range(n):
        x = chi * shares[:, k]
        if balance:
            total = min(cap, int(np.floor(x.sum() + 0.5 + 1e-9)))
            c = _largest_remainder(x, max(total, m))
        else:
            c = np.maximum(nearest_counts(shares[:, k], chi), 1)
            if c.sum() > cap:
                c = _largest_remainder(x, cap)
        c = np.maximum(c, 1)
        if c.sum() > cap:
            trimmed.append(k)
            c = _largest_remainder(x, cap)
        elif not balance and np.maximum(nearest_counts(shares[:, k], chi), 1).sum() > cap:
            trimmed.append(k)
        counts[:, k] = c
    return BinaryAllocation(alpha=layout_counts(counts, chi, u), counts=counts, chi=chi, trimmed=tuple(trimmed))


def layout_counts(counts: np.ndarray, chi: int, rb_count: int) -> np.ndarray:
    """Contiguous sub-RB layout in device order for integer ``counts`` (M, N)."""
    counts = np.asarray(counts, dtype=int)
    m, n = counts.shape
    cap = chi * rb_count
    if np.any(counts.sum(axis=0) > cap):
        raise ValueError("counts exceed the sub-RB capacity")
    alpha = np.zeros((m, cap, n), dtype=np.int8)
    for k in range(n):
        start = 0
        for i in range(m):
            alpha[i, start : start + counts[i, k], k] = 1
            start += counts[i, k]
    return alpha


def apply_binary(state: AllocationState, binary: BinaryAllocation) -> AllocationState:
    return state.with_(alpha=binary.alpha.astype(float), rb_scale=binary.rb_scale, eta=None)


def reference_program(coeffs: RbCoefficients) -> tuple[ConvexProgram, np.ndarray]:
    """Full per-RB relaxed program over ``(alpha, eta)`` for the dense engine.

    Meant for tiny instances: it has ``M U N + N`` variables and one
    inequality per RB capacity, minimum share, epigraph coupling and budget.
    Returns the program and a strictly feasible start.
    """
    m, n = coeffs.shape
    u = coeffs.rb_count
    na = m * u * n
    size = na + n
    blocks = {"alpha": (m, u, n), "eta": (n,)}

    def shares(x):
        return x[:na].reshape(m, u, n).sum(axis=1)

    def share_grad(w_mn: np.ndarray) -> np.ndarray:
        # d/d alpha of sum_{m,n} w[m, n] * S[m, n]
        out = np.zeros(size)
        out[:na] = np.broadcast_to(w_mn[:, None, :], (m, u, n)).ravel()
        return out

    def share_hess_outer(w_mn: np.ndarray) -> np.ndarray:
        # Hessian of sum w / S: diag over (m, n) of 2 w / S^3, spread over u x u
        h = np.zeros((size, size))
        idx = np.arange(na).reshape(m, u, n)
        for i in range(m):
            for k in range(n):
                ii = idx[i, :, k]
                h[np.ix_(ii, ii)] = w_mn[i, k]
        return h

    f_const = m * float(np.sum(coeffs.t_agg))

    def f_val(x):
        s = shares(x)
        return float(m * np.sum(x[na:]) + np.sum(coeffs.down / s) + f_const)

    def f_grad(x):
        g = share_grad(-coeffs.down / shares(x) ** 2)
        g[na:] = m
        return g

    def f_hess(x):
        return share_hess_outer(2 * coeffs.down / shares(x) ** 3)

    cons: list[Functional] = []
    idx = np.arange(na).reshape(m, u, n)
    for k in range(n):
        for r in range(u):
            rows = idx[:, r, k]

            def val(x, rows=rows):
                return float(np.sum(x[rows]) - 1.0)

            def grad(x, rows=rows):
                g = np.zeros(size)
                g[rows] = 1.0
                return g

            cons.append(Functional(val, grad, lambda x: np.zeros((size, size)), name=f"cap[{r},{k}]"))
    for i in range(m):
        for k in range(n):
            cols = idx[i, :, k]

            def val(x, cols=cols):
                return float(1.0 - np.sum(x[cols]))

            def grad(x, cols=cols):
                g = np.zeros(size)
                g[cols] = -1.0
                return g

            cons.append(Functional(val, grad, lambda x: np.zeros((size, size)), name=f"min[{i},{k}]"))
    for i in range(m):
        for k in range(n):
            cols = idx[i, :, k]
            a = coeffs.up[i, k]

            def val(x, cols=cols, a=a, i=i, k=k):
                return float(coeffs.t_train[i, k] + a / np.sum(x[cols]) - x[na + k])

            def grad(x, cols=cols, a=a, k=k):
                g = np.zeros(size)
                g[cols] = -a / np.sum(x[cols]) ** 2
                g[na + k] = -1.0
                return g

            def hess(x, cols=cols, a=a):
                h = np.zeros((size, size))
                h[np.ix_(cols, cols)] = 2 * a / np.sum(x[cols]) ** 3
                return h

            cons.append(Functional(val, grad, hess, name=f"mu[{i},{k}]"))
    for i in range(m):
        w = np.zeros((m, n))
        w[i] = coeffs.p[i] * coeffs.up[i]
        room = coeffs.device_budget[i] - float(np.sum(coeffs.e_train[i]))

        def val(x, w=w, room=room):
            return float(np.sum(w / shares(x)) - room)

        def grad(x, w=w):
            return share_grad(-w / shares(x) ** 2)

        def hess(x, w=w):
            return share_hess_outer(2 * w / shares(x) ** 3)

        cons.append(Functional(val, grad, hess, name=f"dev[{i}]"))
    w_u = coeffs.p_uav * coeffs.down
    room_u = coeffs.uav_budget - float(np.sum(coeffs.e_agg))
    cons.append(
        Functional(
            lambda x: float(np.sum(w_u / shares(x)) - room_u),
            lambda x: share_grad(-w_u / shares(x) ** 2),
            lambda x: share_hess_outer(2 * w_u / shares(x) ** 3),
            name="uav",
        )
    )
    lower = np.concatenate([np.zeros(na), np.full(n, -np.inf)])
    upper = np.concatenate([np.ones(na), np.full(n, np.inf)])
    program = ConvexProgram(blocks=blocks, objective=Functional(f_val, f_grad, f_hess, name="latency"),
                            inequalities=tuple(cons), lower=lower, upper=upper)
    # equal split just below capacity; phase one handles tight budgets
    a0 = np.full((m, u, n), min(0.99 / m, 1.0))
    s0 = a0.sum(axis=1)
    eta0 = np.max(coeffs.t_train + coeffs.up / s0, axis=0) * 1.5 + 1e-3
    return program, program.pack({"alpha": a0, "eta": eta0})


def solve_reference(coeffs: RbCoefficients, **tolerances) -> tuple[SolveReport, np.ndarray]:
    """Dense barrier solve of :func:`reference_program`; returns the report and RB totals."""
    program, x0 = reference_program(coeffs)
    report = solve(program, x0, **tolerances)
    shares = program.unpack(report.x)["alpha"].sum(axis=1)
    return report, shares
