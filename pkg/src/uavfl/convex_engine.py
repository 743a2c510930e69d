"""Small structured convex programs and a log-barrier interior-point solver.

The solver here is dense and meant for desk-scale programs (up to a few
hundred variables): independent reference solves of the subproblems and
small toy problems.  Production subproblems at experiment scale are handed
to cvxpy instead; see the subproblem modules.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Functional",
    "ConvexProgram",
    "SolveReport",
    "DualAscentResult",
    "InfeasibleProgramError",
    "solve",
    "dual_ascent",
    "finite_difference_gradient",
    "trace_to_csv",
]


class InfeasibleProgramError(RuntimeError):
    """Raised when no strictly feasible point can be found."""


@dataclass(frozen=True)
class Functional:
    """Smooth convex function with gradient (and optional Hessian) oracles."""

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = ""

    def hessian(self, x: np.ndarray) -> np.ndarray:
        if self.hess is not None:
            return np.asarray(self.hess(x), dtype=float)
        return _fd_hessian(self.grad, x)


def _fd_hessian(grad: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    n = x.size
    h = np.empty((n, n))
    for i in range(n):
        step = 1e-6 * max(1.0, abs(x[i]))
        e = np.zeros(n)
        e[i] = step
        h[:, i] = (grad(x + e) - grad(x - e)) / (2 * step)
    return 0.5 * (h + h.T)


def finite_difference_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient, used by tests to check gradient oracles."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        step = rel_step * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (fn(x + e) - fn(x - e)) / (2 * step)
    return g


@dataclass(frozen=True)
class ConvexProgram:
    """``min f0(x)  s.t.  g_i(x) <= 0,  A x = b,  lower <= x <= upper``.

    ``blocks`` names contiguous slices of the variable vector so callers can
    pack and unpack structured variables.
    """

    blocks: Mapping[str, tuple[int, ...]]
    objective: Functional
    inequalities: tuple[Functional, ...] = ()
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    eq_matrix: np.ndarray | None = None
    eq_rhs: np.ndarray | None = None

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for s in self.blocks.values())

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, shape in self.blocks.items():
            n = int(np.prod(shape))
            out[name] = slice(start, start + n)
            start += n
        return out

    def unpack(self, x: np.ndarray) -> dict[str, np.ndarray]:
        return {name: x[sl].reshape(self.blocks[name]) for name, sl in self.slices().items()}

    def pack(self, parts: Mapping[str, np.ndarray]) -> np.ndarray:
        x = np.empty(self.size)
        for name, sl in self.slices().items():
            x[sl] = np.asarray(parts[name], dtype=float).ravel()
        return x

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.size
        lo = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        hi = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        return lo, hi


@dataclass(frozen=True)
class SolveReport:
    x: np.ndarray
    objective: float
    max_violation: float
    kkt_residual: float
    iterations: int
    converged: bool
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lower_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    upper_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eq_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    trace: tuple[tuple[int, float, float, float], ...] = ()


def trace_to_csv(report: SolveReport) -> str:
    """Iteration trace as CSV: iteration, objective, duality-gap bound, Newton decrement."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "objective", "gap_bound", "newton_decrement"])
    for row in report.trace:
        w.writerow(row)
    return buf.getvalue()


class _Barrier:
    """Barrier-augmented objective ``t f0 - sum log(-g) - sum log(box slack)``."""

    def __init__(self, program: ConvexProgram, lo: np.ndarray, hi: np.ndarray):
        self.p = program
        self.lo, self.hi = lo, hi
        self.has_lo = np.isfinite(lo)
        self.has_hi = np.isfinite(hi)

    def strictly_feasible(self, x: np.ndarray) -> bool:
        if np.any(x[self.has_lo] <= self.lo[self.has_lo]) or np.any(x[self.has_hi] >= self.hi[self.has_hi]):
            return False
        for g in self.p.inequalities:
            v = g.value(x)
            if not (np.isfinite(v) and v < 0):
                return False
        return bool(np.isfinite(self.p.objective.value(x)))

    def value(self, x: np.ndarray, t: float) -> float:
        val = t * self.p.objective.value(x)
        for g in self.p.inequalities:
            val -= math.log(-g.value(x))
        val -= np.sum(np.log(x[self.has_lo] - self.lo[self.has_lo]))
        val -= np.sum(np.log(self.hi[self.has_hi] - x[self.has_hi]))
        return float(val)

    def derivatives(self, x: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
        f0 = self.p.objective
        grad = t * f0.grad(x)
        hess = t * f0.hessian(x)
        for g in self.p.inequalities:
            gv = g.value(x)
            gg = g.grad(x)
            grad += gg / (-gv)
            hess += np.outer(gg, gg) / gv**2 + g.hessian(x) / (-gv)
        dl = np.where(self.has_lo, x - self.lo, np.inf)
        dh = np.where(self.has_hi, self.hi - x, np.inf)
        grad += -1.0 / dl + 1.0 / dh
        hess[np.diag_indices_from(hess)] += 1.0 / dl**2 + 1.0 / dh**2
        return grad, hess


def _newton_step(hess: np.ndarray, grad: np.ndarray, a: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    n = grad.size
    if a is None or a.size == 0:
        try:
            dx = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            dx = -np.linalg.lstsq(hess, grad, rcond=None)[0]
        return dx, np.zeros(0)
    p = a.shape[0]
    kkt = np.zeros((n + p, n + p))
    kkt[:n, :n] = hess
    kkt[:n, n:] = a.T
    kkt[n:, :n] = a
    rhs = np.concatenate([-grad, np.zeros(p)])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _center(barrier: _Barrier, x: np.ndarray, t: float, a, max_steps: int) -> tuple[np.ndarray, int, float, np.ndarray, bool]:
    """Damped Newton on the barrier problem; last flag says the center was reached."""
    steps = 0
    dec = math.inf
    nu = np.zeros(0 if a is None else a.shape[0])
    while steps < max_steps:
        grad, hess = barrier.derivatives(x, t)
        dx, nu = _newton_step(hess, grad, a)
        dec = float(-grad @ dx)
        steps += 1
        if dec / 2 <= 1e-11:
            return x, steps, dec, nu, True
        # Backtracking line search that stays strictly feasible.
        s = 1.0
        f_x = barrier.value(x, t)
        while s > 1e-12:
            xn = x + s * dx
            if barrier.strictly_feasible(xn) and barrier.value(xn, t) <= f_x - 0.25 * s * dec:
                break
            s *= 0.5
        else:
            # no representable progress: centered as far as rounding allows
            return x, steps, dec, nu, dec / 2 <= 1e-6
        x = xn
    return x, steps, dec, nu, False


def _interior_start(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    x = x.astype(float).copy()
    span = np.where(np.isfinite(hi - lo), hi - lo, np.inf)
    pad = np.minimum(1e-6 * np.maximum(1.0, np.abs(x)), 0.01 * span)
    x = np.where(np.isfinite(lo) & (x <= lo + pad), lo + pad, x)
    x = np.where(np.isfinite(hi) & (x >= hi - pad), hi - pad, x)
    return x


def _phase_one(program: ConvexProgram, x0: np.ndarray, lo: np.ndarray, hi: np.ndarray, max_iter: int) -> np.ndarray:
    """Find a strictly feasible point by minimizing a common slack ``s``."""
    n = x0.size
    gs = program.inequalities

    def shifted(g: Functional) -> Functional:
        return Functional(
            value=lambda z, g=g: g.value(z[:n]) - z[n],
            grad=lambda z, g=g: np.append(g.grad(z[:n]), -1.0),
            hess=lambda z, g=g: np.pad(g.hessian(z[:n]), ((0, 1), (0, 1))),
        )

    s0 = max(g.value(x0) for g in gs) + 1.0
    aux = ConvexProgram(
        blocks={"x": (n,), "s": (1,)},
        objective=Functional(
            value=lambda z: float(z[n]),
            grad=lambda z: np.append(np.zeros(n), 1.0),
            hess=lambda z: np.zeros((n + 1, n + 1)),
        ),
        inequalities=tuple(shifted(g) for g in gs) + (
            # keeps the auxiliary program bounded below
            Functional(value=lambda z: -z[n] - 1.0, grad=lambda z: np.append(np.zeros(n), -1.0),
                       hess=lambda z: np.zeros((n + 1, n + 1))),
        ),
        lower=np.append(lo, -np.inf),
        upper=np.append(hi, np.inf),
        eq_matrix=None if program.eq_matrix is None else np.hstack([program.eq_matrix, np.zeros((program.eq_matrix.shape[0], 1))]),
        eq_rhs=program.eq_rhs,
    )
    barrier = _Barrier(aux, *aux.bounds())
    z = np.append(x0, s0)
    a = aux.eq_matrix
    t = 1.0
    for _ in range(60):
        z, _, _, _, _ = _center(barrier, z, t, a, max_iter)
        if z[n] < -1e-9:
            return z[:n]
        if (len(aux.inequalities) + np.sum(np.isfinite(lo)) + np.sum(np.isfinite(hi))) / t < 1e-10:
            break
        t *= 10.0
    raise InfeasibleProgramError(f"no strictly feasible point (best common slack {z[n]:.3g})")


def solve(
    program: ConvexProgram,
    x0: np.ndarray,
    *,
    feas_tol: float = 1e-6,
    kkt_tol: float = 1e-5,
    gap_tol: float = 1e-9,
    max_iter: int = 5000,
    mu: float = 10.0,
) -> SolveReport:
    """Solve ``program`` from ``x0`` (inside the box) with a barrier method.

    Deterministic given its inputs.  Raises :class:`InfeasibleProgramError`
    when phase one cannot find a strictly feasible point.
    """
    lo, hi = program.bounds()
    x = np.asarray(x0, dtype=float).ravel()
    if x.size != program.size:
        raise ValueError(f"x0 has {x.size} entries, program has {program.size}")
    if np.any(x < lo) or np.any(x > hi):
        raise ValueError("x0 must lie within the variable box")
    a = program.eq_matrix
    if a is not None and program.eq_rhs is not None:
        if np.max(np.abs(a @ x - program.eq_rhs)) > 1e-8 * max(1.0, np.max(np.abs(program.eq_rhs))):
            raise ValueError("x0 must satisfy the linear equalities")
    x = _interior_start(x, lo, hi)
    barrier = _Barrier(program, lo, hi)
    if not barrier.strictly_feasible(x):
        x = _phase_one(program, x, lo, hi, max_iter)

    n_barrier = len(program.inequalities) + int(np.sum(np.isfinite(lo)) + np.sum(np.isfinite(hi)))
    f_scale = max(1.0, abs(program.objective.value(x)))
    t = max(1.0, n_barrier / f_scale)
    iterations = 0
    trace = []
    nu = np.zeros(0 if a is None else a.shape[0])
    best = None
    while iterations < max_iter:
        xn, steps, dec, nun, centered = _center(barrier, x, t, a, min(200, max_iter - iterations))
        iterations += steps
        if not centered and best is not None:
            # ill-conditioned at this barrier weight: keep the last good center
            x, t, nu = best
            break
        x, nu = xn, nun
        fval = float(program.objective.value(x))
        trace.append((iterations, fval, n_barrier / t, dec))
        best = (x, t, nu)
        if n_barrier / t <= gap_tol * max(1.0, abs(fval)):
            break
        t *= mu

    gvals = np.array([g.value(x) for g in program.inequalities])
    lam = 1.0 / (t * -gvals) if gvals.size else np.zeros(0)
    z_lo = np.where(np.isfinite(lo), 1.0 / (t * np.maximum(x - lo, 1e-300)), 0.0)
    z_hi = np.where(np.isfinite(hi), 1.0 / (t * np.maximum(hi - x, 1e-300)), 0.0)
    eq_mult = nu / t if nu.size else nu
    g0 = program.objective.grad(x)
    stat = g0 - z_lo + z_hi
    for li, g in zip(lam, program.inequalities):
        stat = stat + li * g.grad(x)
    if a is not None and eq_mult.size:
        stat = stat + a.T @ eq_mult
    kkt = float(np.max(np.abs(stat))) / max(1.0, float(np.max(np.abs(g0))))
    viol = float(max(0.0, np.max(gvals))) if gvals.size else 0.0
    if a is not None and program.eq_rhs is not None:
        viol = max(viol, float(np.max(np.abs(a @ x - program.eq_rhs))))
    fval = float(program.objective.value(x))
    converged = viol <= feas_tol * max(1.0, abs(fval)) and kkt <= kkt_tol and n_barrier / t <= 1e-6 * max(1.0, abs(fval))
    return SolveReport(
        x=x,
        objective=fval,
        max_violation=viol,
        kkt_residual=kkt,
        iterations=iterations,
        converged=bool(converged),
        multipliers=lam,
        lower_multipliers=z_lo,
        upper_multipliers=z_hi,
        eq_multipliers=eq_mult,
        trace=tuple(trace),
    )


@dataclass(frozen=True)
class DualAscentResult:
    multipliers: np.ndarray
    primal: np.ndarray
    iterations: int
    converged: bool
    slackness: float
    infeasibility: float
    dual_values: tuple[float, ...]


def dual_ascent(
    primal_map: Callable[[np.ndarray], np.ndarray],
    constraints: Callable[[np.ndarray], np.ndarray],
    step: float | Callable[[int], float],
    lam0: Sequence[float] | np.ndarray,
    *,
    objective: Callable[[np.ndarray], float] | None = None,
    tol: float = 1e-6,
    max_iter: int = 10000,
) -> DualAscentResult:
    """Projected gradient ascent on the multipliers of ``constraints(x) <= 0``.

    ``primal_map`` must return the exact Lagrangian minimizer for the given
    multipliers.  Stops when both complementary slackness ``|lam . g|`` and
    primal infeasibility ``max(g, 0)`` drop below ``tol``.
    """
    lam = np.maximum(np.asarray(lam0, dtype=float), 0.0)
    schedule = step if callable(step) else (lambda k: float(step))
    duals = []
    x = primal_map(lam)
    g = np.asarray(constraints(x), dtype=float)
    for k in range(max_iter):
        slack = float(abs(lam @ g))
        infeas = float(max(0.0, np.max(g)))
        if objective is not None:
            duals.append(float(objective(x) + lam @ g))
        if slack <= tol and infeas <= tol:
            return DualAscentResult(lam, x, k, True, slack, infeas, tuple(duals))
        lam = np.maximum(lam + schedule(k) * g, 0.0)
        x = primal_map(lam)
        g = np.asarray(constraints(x), dtype=float)
    slack = float(abs(lam @ g))
    infeas = float(max(0.0, np.max(g)))
    if objective is not None:
        duals.append(float(objective(x) + lam @ g))
    return DualAscentResult(lam, x, max_iter, slack <= tol and infeas <= tol, slack, infeas, tuple(duals))
