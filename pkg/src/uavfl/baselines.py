"""Benchmark schemes: the alternating optimization with one block pinned.

* FDMA: every device gets an equal bandwidth share on the sub-RB grid.
* FixedTrajectory: the UAV flies the straight line.
* FixedUserAllocation: device frequencies and powers stay at a fixed
  fraction of their maxima (one half by default).
* Thresholding: the relaxed RB shares are binarized per RB with a threshold
  and repaired so each RB has one owner and each device at least one RB.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import rb_allocation as rb
from .ao import AoConfig, AoResult, initial_state, repair_energy, run_ao
from .scenario import Scenario
from .system_model import AllocationState, LatencyBreakdown

__all__ = [
    "BaselineKind",
    "FDMA",
    "FIXED_TRAJECTORY",
    "FIXED_USER_ALLOCATION",
    "thresholding",
    "ALL_BASELINES",
    "equal_split",
    "threshold_alpha",
    "run_baseline",
    "run_scheme",
    "SCHEMES",
]


@dataclass(frozen=True)
class BaselineKind:
    tag: str
    delta: float = 0.5  # thresholding only
    fraction: float = 0.5  # fixed user allocation only

    def __post_init__(self) -> None:
        if self.tag not in ("FDMA", "FixedTrajectory", "FixedUserAllocation", "Thresholding"):
            raise ValueError(f"unknown baseline {self.tag!r}")
        if self.tag == "Thresholding" and not 0.0 <= self.delta < 1.0:
            raise ValueError("thresholding delta must lie in [0, 1)")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fixed allocation fraction must lie in (0, 1]")

    @property
    def label(self) -> str:
        return f"Thresholding({self.delta:g})" if self.tag == "Thresholding" else self.tag


FDMA = BaselineKind("FDMA")
FIXED_TRAJECTORY = BaselineKind("FixedTrajectory")
FIXED_USER_ALLOCATION = BaselineKind("FixedUserAllocation")


def thresholding(delta: float = 0.5) -> BaselineKind:
    return BaselineKind("Thresholding", delta=delta)


ALL_BASELINES = (FDMA, FIXED_TRAJECTORY, FIXED_USER_ALLOCATION, thresholding())


def equal_split(m: int, u: int, n: int, chi: int = rb.DEFAULT_CHI) -> rb.BinaryAllocation:
    """``U / M`` RBs per device on the sub-RB grid, largest-remainder rounded."""
    return rb.reconstruct_binary(np.full((m, n), u / m), chi, u)


def threshold_alpha(alpha: np.ndarray, delta: float) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Binarize ``alpha`` (M, U, N) by ``alpha >= delta`` (``> 0`` when ``delta = 0``).

    Repairs: an RB claimed by several devices goes to the largest entry
    (lowest index on ties); a device left without RBs takes the lowest unused
    RB, or failing that the highest-index RB of the device holding the most.
    Returns the binary allocation and the forced ``(device, slot)`` pairs.
    """
    alpha = np.asarray(alpha, dtype=float)
    m, u, n = alpha.shape
    keep = alpha > 0 if delta == 0 else alpha >= delta
    out = np.zeros_like(alpha)
    forced = []
    for k in range(n):
        for r in range(u):
            cand = np.nonzero(keep[:, r, k])[0]
            if cand.size:
                best = cand[np.argmax(alpha[cand, r, k])]  # argmax picks the lowest index on ties
                out[best, r, k] = 1.0
        for i in range(m):
            if out[i, :, k].sum() == 0:
                unused = np.nonzero(out[:, :, k].sum(axis=0) == 0)[0]
                counts = out[:, :, k].sum(axis=1)
                donor = int(np.argmax(counts))
                if unused.size:
                    r = int(unused[0])
                elif counts[donor] >= 2:
                    r = int(np.nonzero(out[donor, :, k])[0][-1])
                    out[donor, r, k] = 0.0
                else:
                    raise ValueError("cannot give every device an RB")
                out[i, r, k] = 1.0
                forced.append((i, k))
    return out, forced


def _threshold_stage(delta: float, flags: list):
    def stage(scenario: Scenario, state: AllocationState) -> AllocationState:
        sol = rb.solve_relaxed(scenario, state)
        alpha, forced = threshold_alpha(sol.alpha_relaxed, delta)
        if forced:
            flags.extend(forced)
        cand = state.with_(alpha=alpha, rb_scale=1.0, eta=None)
        # rounding can push a budget over; scale the offending side back in
        cand, notes = repair_energy(scenario, cand)
        flags.extend(notes)
        return cand

    return stage


def run_baseline(kind: BaselineKind, scenario: Scenario, cfg: AoConfig = AoConfig()) -> AoResult:
    """Run one benchmark; the result's notes record any forced repairs."""
    m, n, u = scenario.n_devices, scenario.slots, scenario.channel.rb_count
    if kind.tag == "FDMA":
        split = equal_split(m, u, n, cfg.chi)
        init, notes = initial_state(scenario, alpha=split.alpha.astype(float), rb_scale=split.rb_scale)
        run_cfg = replace(cfg, optimize_rb=False)
    elif kind.tag == "FixedTrajectory":
        init, notes = initial_state(scenario)
        run_cfg = replace(cfg, optimize_trajectory=False)
    elif kind.tag == "FixedUserAllocation":
        init, notes = initial_state(scenario, device_fraction=kind.fraction)
        run_cfg = replace(cfg, pin_devices=True)
    else:
        flags: list = []
        init, notes = initial_state(scenario)
        run_cfg = replace(cfg, rb_override=_threshold_stage(kind.delta, flags))
    res = run_ao(scenario, init, run_cfg)
    extra = tuple(notes)
    if kind.tag == "Thresholding" and flags:
        forced = sorted({f for f in flags if isinstance(f, tuple)})
        if forced:
            extra += (f"forced single-RB assignments: {forced}",)
        extra += tuple(dict.fromkeys(f for f in flags if isinstance(f, str)))
    if extra:
        res = replace(res, trace=replace(res.trace, notes=extra + res.trace.notes))
    return res


SCHEMES = ("AO",) + tuple(k.label for k in ALL_BASELINES)


def run_scheme(label: str, scenario: Scenario, cfg: AoConfig = AoConfig()) -> tuple[AllocationState, LatencyBreakdown, AoResult]:
    """Run ``"AO"`` or a baseline by label (``"Thresholding(0.3)"`` sets delta)."""
    if label == "AO":
        res = run_ao(scenario, cfg=cfg)
    elif label.startswith("Thresholding"):
        delta = float(label[label.index("(") + 1 : -1]) if "(" in label else 0.5
        res = run_baseline(thresholding(delta), scenario, cfg)
    else:
        res = run_baseline(BaselineKind(label), scenario, cfg)
    return res.state, res.breakdown, res
