"""Shared cvxpy/Clarabel call with fallbacks for badly scaled instances."""

from __future__ import annotations

import warnings

import cvxpy as cp
import numpy as np

from .system_model import SubproblemError

# Tried in order after the caller's options: solver defaults, shorter
# interior steps, more equilibration passes, no equilibration.
FALLBACKS = ({}, {"max_step_fraction": 0.8}, {"equilibrate_max_iter": 50}, {"equilibrate_enable": False})
FALLBACK_RESIDUAL = 1e-4  # largest constraint violation a fallback "optimal" may carry


def solve(problem: cp.Problem, opts: dict, stage: str) -> str:
    """Solve ``problem`` and return its status; raise once every attempt failed.

    The tight tolerances occasionally stall Clarabel on badly scaled
    instances, so a failure is retried with the settings in ``FALLBACKS``.
    Callers accept a solution only after checking it against the exact
    model, so an inaccurate fallback can never worsen the objective.  A
    fallback that reports optimality with constraint residuals above
    ``FALLBACK_RESIDUAL`` (unequilibrated runs can claim optimality on
    infeasible programs) counts as a failure.
    cvxpy's "inaccurate" warning is dropped because the status already
    carries it.  Warm starts are off: cvxpy would otherwise reuse the
    previous Clarabel instance, which makes results depend on solve history.
    """
    last = None
    for attempt in (opts,) + FALLBACKS:
        try:
            with warnings.catch_warnings():
                warnings.filterwarnings("ignore", message="Solution may be inaccurate")
                problem.solve(solver=cp.CLARABEL, warm_start=False, **attempt)
            status = problem.status
            if status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) and attempt is not opts and _residual(problem) > FALLBACK_RESIDUAL:
                last = f"{status} with residual {_residual(problem):.3g}"
                continue
            if status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE, cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
                return status
            last = problem.status
        except cp.SolverError as exc:
            last = str(exc)
    raise SubproblemError(stage, f"solver failure: {last}")


def _residual(problem: cp.Problem) -> float:
    worst = 0.0
    for c in problem.constraints:
        v = c.violation()
        if v is None:
            return np.inf
        v = float(np.max(v)) if np.size(v) else 0.0
        if not np.isfinite(v):
            return np.inf
        worst = max(worst, v)
    return worst
