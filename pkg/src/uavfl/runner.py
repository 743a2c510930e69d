"""Batch experiments: sweep one scenario parameter over seeds and schemes.

A plan is a small YAML document::

    scenario: {profile: desk}        # any build_scenario overrides
    sweep: {axis: U, values: [8, 10, 12]}
    seeds: [0, 1, 2]
    schemes: [AO, FDMA]
    output: results/rb_sweep
    ao: {eps: 1.0e-3}                # optional AoConfig overrides
    trajectory_every: 10

Outputs (all deterministic given the plan):

* ``cells.csv``: one row per (value, seed, scheme) with the latency breakdown
* ``summary.csv``: mean and standard deviation of the latency per (value, scheme)
* ``traces.json``: AO traces and notes per cell
* ``trajectories/<scheme>_<value>_<seed>.csv``: sampled UAV path plus devices
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .ao import AoConfig
from .baselines import run_scheme
from .scenario import Scenario, ScenarioError, build_scenario

log = logging.getLogger(__name__)

__all__ = [
    "AXES",
    "ExperimentPlan",
    "PlanError",
    "CellResult",
    "PlanResult",
    "apply_axis",
    "load_plan",
    "run_cell",
    "run_plan",
    "export_trajectory",
    "read_trajectory",
]

AXES = ("U", "E_UAV", "samples", "d_m")
_AO_KEYS = {"eps", "l_max", "chi", "sca_iters", "sca_tol", "balance_rounding"}


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentPlan:
    scenario: dict
    axis: str
    values: tuple
    seeds: tuple[int, ...]
    schemes: tuple[str, ...]
    output: str
    ao: dict = field(default_factory=dict)
    trajectory_every: int = 10

    def __post_init__(self) -> None:
        if self.axis not in AXES:
            raise PlanError(f"sweep axis must be one of {AXES}, got {self.axis!r}")
        if not self.values:
            raise PlanError("sweep values must be nonempty")
        if not self.seeds:
            raise PlanError("seed list must be nonempty")
        if not self.schemes:
            raise PlanError("scheme list must be nonempty")
        bad = set(self.ao) - _AO_KEYS
        if bad:
            raise PlanError(f"unknown ao settings: {sorted(bad)}")
        if self.trajectory_every < 1:
            raise PlanError("trajectory_every must be >= 1")

    def check_output(self) -> Path:
        out = Path(self.output)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise PlanError(f"cannot create output directory {out}: {exc}") from exc
        if not os.access(out, os.W_OK):
            raise PlanError(f"output directory {out} is not writable")
        return out

    def cells(self) -> list[tuple[Any, int, str]]:
        return [(v, s, k) for v in self.values for s in self.seeds for k in self.schemes]


def load_plan(text: str, output: str | None = None) -> ExperimentPlan:
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise PlanError(f"plan is not valid YAML: {exc}") from exc
    if not isinstance(raw, Mapping):
        raise PlanError("plan must be a mapping")
    known = {"scenario", "sweep", "seeds", "schemes", "output", "ao", "trajectory_every"}
    bad = set(raw) - known
    if bad:
        raise PlanError(f"unknown plan fields: {sorted(bad)}")
    sweep = raw.get("sweep") or {}
    try:
        return ExperimentPlan(
            scenario=dict(raw.get("scenario") or {}),
            axis=str(sweep.get("axis", "")),
            values=tuple(sweep.get("values") or ()),
            seeds=tuple(int(s) for s in raw.get("seeds") or ()),
            schemes=tuple(str(s) for s in raw.get("schemes") or ("AO",)),
            output=str(output or raw.get("output") or "results"),
            ao=dict(raw.get("ao") or {}),
            trajectory_every=int(raw.get("trajectory_every", 10)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, PlanError):
            raise
        raise PlanError(f"malformed plan: {exc}") from exc


def apply_axis(config: Mapping[str, Any], axis: str, value: Any) -> dict:
    """Scenario config with the sweep parameter set to ``value``.

    ``samples`` moves the initial dataset size and scales the allowed band
    around it by the same factor; ``d_m`` fixes every device model size.
    """
    cfg = copy.deepcopy(dict(config))

    def sub(key: str) -> dict:
        cfg[key] = dict(cfg.get(key) or {})
        return cfg[key]

    if axis == "U":
        sub("channel")["rb_count"] = int(value)
    elif axis == "E_UAV":
        sub("uav")["energy_budget"] = float(value)
    elif axis == "samples":
        v = int(value)
        sub("dataset").update({"initial": v, "lower": int(round(0.6 * v)), "upper": int(round(1.4 * v))})
    elif axis == "d_m":
        sub("devices")["model_size"] = float(value)
    else:
        raise PlanError(f"unknown sweep axis {axis!r}")
    return cfg


@dataclass(frozen=True)
class CellResult:
    value: Any
    seed: int
    scheme: str
    ok: bool
    objective: float = math.nan
    parts: dict = field(default_factory=dict)  # summed latency terms
    trace: dict = field(default_factory=dict)
    trajectory: str = ""
    error: str = ""


def _latency_parts(scenario: Scenario, b) -> dict:
    m = scenario.n_devices
    return {
        "train_upload": float(m * np.sum(np.max(b.t_train + b.t_up, axis=0))),
        "aggregation": float(m * np.sum(b.t_agg)),
        "download": float(np.sum(b.t_down)),
    }


def run_cell(plan: ExperimentPlan, value: Any, seed: int, scheme: str) -> CellResult:
    """Run one cell; failures are caught and reported, never raised."""
    try:
        cfg = apply_axis(plan.scenario, plan.axis, value)
        cfg["seed"] = int(seed)
        scenario = build_scenario(cfg)
        state, breakdown, res = run_scheme(scheme, scenario, AoConfig(**plan.ao))
        trace = res.trace.to_dict()
        for it in trace["iterations"]:
            it.pop("seconds", None)  # wall time would break byte determinism
        trace["audits"] = {k: v for k, v in res.audits.items() if k != "boxes"}
        ok = bool(res.audits.get("energy_ok")) and bool(res.audits.get("kinematics_ok"))
        return CellResult(
            value, seed, scheme, ok, breakdown.objective, _latency_parts(scenario, breakdown), trace,
            export_trajectory(state.q, scenario, every=plan.trajectory_every),
            "" if ok else "final state failed an energy or kinematics audit",
        )
    except (ScenarioError, ValueError, RuntimeError, ArithmeticError) as exc:
        return CellResult(value, seed, scheme, False, error=f"{type(exc).__name__}: {exc}")
    except Exception as exc:  # keep the plan running; the traceback goes to the log
        log.debug("cell (%s, %s, %s) crashed\n%s", value, seed, scheme, traceback.format_exc())
        return CellResult(value, seed, scheme, False, error=f"{type(exc).__name__}: {exc}")


def _cell_job(args):
    plan, value, seed, scheme = args
    return run_cell(plan, value, seed, scheme)


@dataclass(frozen=True)
class PlanResult:
    cells: tuple[CellResult, ...]
    output: Path

    @property
    def failed(self) -> list[CellResult]:
        return [c for c in self.cells if not c.ok]


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _cells_csv(plan: ExperimentPlan, cells) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["axis", "value", "seed", "scheme", "status", "latency",
                 "train_upload", "aggregation", "download", "iterations", "error"])
    for c in cells:
        iters = len(c.trace.get("iterations", [])) - 1 if c.trace else ""
        wr.writerow([plan.axis, c.value, c.seed, c.scheme, "ok" if c.ok else "failed", _fmt(c.objective),
                     _fmt(c.parts.get("train_upload")), _fmt(c.parts.get("aggregation")),
                     _fmt(c.parts.get("download")), iters, c.error])
    return buf.getvalue()


def _summary_csv(plan: ExperimentPlan, cells) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["axis", "value", "scheme", "n_ok", "n_failed", "mean_latency", "std_latency"])
    for v in plan.values:
        for k in plan.schemes:
            group = [c for c in cells if c.value == v and c.scheme == k]
            vals = np.array([c.objective for c in group if c.ok])
            mean = float(vals.mean()) if vals.size else math.nan
            std = float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else math.nan)
            wr.writerow([plan.axis, v, k, vals.size, len(group) - vals.size, _fmt(mean), _fmt(std)])
    return buf.getvalue()


def run_plan(plan: ExperimentPlan, workers: int = 1) -> PlanResult:
    """Run every cell of ``plan`` on up to ``workers`` processes and write the outputs."""
    out = plan.check_output()
    jobs = [(plan, v, s, k) for v, s, k in plan.cells()]
    if workers <= 1:
        results = [_cell_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_job, jobs))  # map keeps plan order
    for c in results:
        if c.ok:
            log.info("%s=%s seed=%d %s: %.6g", plan.axis, c.value, c.seed, c.scheme, c.objective)
        else:
            log.warning("%s=%s seed=%d %s failed: %s", plan.axis, c.value, c.seed, c.scheme, c.error)

    (out / "cells.csv").write_text(_cells_csv(plan, results))
    (out / "summary.csv").write_text(_summary_csv(plan, results))
    traces = [{"axis": plan.axis, "value": c.value, "seed": c.seed, "scheme": c.scheme, "ok": c.ok,
               "error": c.error, "trace": c.trace} for c in results]
    (out / "traces.json").write_text(json.dumps(traces, indent=1, sort_keys=True, default=_json_default) + "\n")
    tdir = out / "trajectories"
    tdir.mkdir(exist_ok=True)
    for c in results:
        if c.trajectory:
            (tdir / f"{c.scheme}_{c.value}_{c.seed}.csv").write_text(c.trajectory)
    return PlanResult(tuple(results), out)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def export_trajectory(q: np.ndarray, scenario: Scenario, every: int = 10) -> str:
    """CSV polyline ``kind, index, x, y``: UAV waypoints every ``every`` slots
    (the last slot always included), then the device positions."""
    if every < 1:
        raise ValueError("every must be >= 1")
    q = np.asarray(q, dtype=float)
    n = q.shape[0]
    idx = list(range(0, n, every))
    if idx[-1] != n - 1:
        idx.append(n - 1)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["kind", "index", "x", "y"])
    for i in idx:
        wr.writerow(["uav", i, repr(float(q[i, 0])), repr(float(q[i, 1]))])
    for d in scenario.devices:
        wr.writerow(["device", d.id, repr(float(d.position[0])), repr(float(d.position[1]))])
    return buf.getvalue()


def read_trajectory(text: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`export_trajectory`: (slot indices, waypoints, device positions)."""
    rows = list(csv.DictReader(io.StringIO(text)))
    uav = [r for r in rows if r["kind"] == "uav"]
    dev = [r for r in rows if r["kind"] == "device"]
    idx = np.array([int(r["index"]) for r in uav], dtype=int)
    q = np.array([[float(r["x"]), float(r["y"])] for r in uav]).reshape(-1, 2)
    pos = np.array([[float(r["x"]), float(r["y"])] for r in dev]).reshape(-1, 2)
    return idx, q, pos


def plan_fields() -> list[str]:
    return [f.name for f in fields(ExperimentPlan)]
