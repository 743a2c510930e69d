"""Scenario construction: devices, UAV limits, channel constants and datasets.

A :class:`Scenario` is immutable once built.  Everything random (device
layout, per-device model sizes and CPU limits, Poisson dataset dynamics) is
drawn from a single seeded generator in a fixed order, so two scenarios built
from the same config text are equal field by field and serialize to the same
bytes.  Draws are made as unit variates and scaled afterwards; changing a
scalar parameter (say the sample count) therefore moves every device in the
same direction for a fixed seed, which is what paired parameter sweeps rely
on.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Any, Mapping

import numpy as np
import yaml

__all__ = [
    "ScenarioError",
    "DeviceSpec",
    "UavSpec",
    "ChannelSpec",
    "DatasetState",
    "Scenario",
    "PROFILES",
    "dbm_per_hz_to_watts",
    "random_layout",
    "step_dataset",
    "build_scenario",
    "load_scenario",
    "scenario_to_json",
    "scenario_from_json",
]


class ScenarioError(ValueError):
    """Invalid configuration or violated scenario invariant."""


def dbm_per_hz_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class DeviceSpec:
    id: int
    position: tuple[float, float]
    cycles_per_bit: float
    capacitance: float
    model_size: tuple[float, ...]
    samples: tuple[int, ...]
    sample_bits: float
    local_rounds: int
    energy_budget: float
    f_max: float
    p_max: float

    def __post_init__(self) -> None:
        for name in ("cycles_per_bit", "capacitance", "sample_bits", "energy_budget", "f_max", "p_max"):
            if not getattr(self, name) > 0:
                raise ScenarioError(f"device {self.id}: {name} must be positive")
        if self.local_rounds < 0:
            raise ScenarioError(f"device {self.id}: local_rounds must be nonnegative")
        if any(d <= 0 for d in self.model_size):
            raise ScenarioError(f"device {self.id}: model_size must be positive")
        if any(s < 0 for s in self.samples):
            raise ScenarioError(f"device {self.id}: samples must be nonnegative")

    @property
    def dataset_bits(self) -> np.ndarray:
        return np.asarray(self.samples, dtype=float) * self.sample_bits


@dataclass(frozen=True)
class UavSpec:
    start: tuple[float, float]
    end: tuple[float, float]
    altitude: float
    v_min: float
    v_max: float
    a_max: float
    f_max: float
    capacitance: float
    energy_budget: float
    p_max: float
    cycles_per_bit: float
    aggregate_size: tuple[float, ...]

    def __post_init__(self) -> None:
        if not 0 < self.v_min < self.v_max:
            raise ScenarioError("uav: require 0 < v_min < v_max")
        for name in ("altitude", "a_max", "f_max", "capacitance", "energy_budget", "p_max", "cycles_per_bit"):
            if not getattr(self, name) > 0:
                raise ScenarioError(f"uav: {name} must be positive")
        if any(d < 0 for d in self.aggregate_size):
            raise ScenarioError("uav: aggregate_size must be nonnegative")


@dataclass(frozen=True)
class ChannelSpec:
    ref_gain: float
    rb_bandwidth: float
    rb_count: int
    noise_density: float
    noise_density_down: float

    def __post_init__(self) -> None:
        for name in ("ref_gain", "rb_bandwidth", "noise_density", "noise_density_down"):
            if not getattr(self, name) > 0:
                raise ScenarioError(f"channel: {name} must be positive")
        if self.rb_count < 1:
            raise ScenarioError("channel: rb_count must be >= 1")


@dataclass(frozen=True)
class DatasetState:
    samples: tuple[int, ...]
    lower: int
    upper: int
    rate_sensed: float
    rate_dropped: float

    def __post_init__(self) -> None:
        if not 0 <= self.lower <= self.upper:
            raise ScenarioError("dataset: require 0 <= lower <= upper")
        if self.rate_sensed < 0 or self.rate_dropped < 0:
            raise ScenarioError("dataset: Poisson rates must be nonnegative")


def step_dataset(state: DatasetState, rng: np.random.Generator) -> DatasetState:
    """Advance every device's sample count by one slot.

    New count = clamp(old + Poisson(sensed) - Poisson(dropped), lower, upper).
    """
    n = len(state.samples)
    sensed = rng.poisson(state.rate_sensed, size=n)
    dropped = rng.poisson(state.rate_dropped, size=n)
    nxt = np.clip(np.asarray(state.samples) + sensed - dropped, state.lower, state.upper)
    return DatasetState(
        samples=tuple(int(v) for v in nxt),
        lower=state.lower,
        upper=state.upper,
        rate_sensed=state.rate_sensed,
        rate_dropped=state.rate_dropped,
    )


def random_layout(count: int, region: float, rng: np.random.Generator) -> list[tuple[float, float]]:
    """``count`` i.i.d. uniform positions in ``[0, region]^2``."""
    if count < 1:
        raise ScenarioError("layout: count must be >= 1")
    pts = rng.random((count, 2)) * region
    return [(float(x), float(y)) for x, y in pts]


@dataclass(frozen=True)
class Scenario:
    devices: tuple[DeviceSpec, ...]
    uav: UavSpec
    channel: ChannelSpec
    slots: int
    rng_seed: int
    region: float = 1000.0

    def __post_init__(self) -> None:
        m = len(self.devices)
        if m < 1:
            raise ScenarioError("scenario: need at least one device")
        if self.slots < 1:
            raise ScenarioError("scenario: slots must be >= 1")
        if m > self.channel.rb_count:
            raise ScenarioError(
                f"scenario: M <= U violated (M={m}, U={self.channel.rb_count}); "
                "every device needs at least one RB"
            )
        for dev in self.devices:
            if len(dev.model_size) != self.slots or len(dev.samples) != self.slots:
                raise ScenarioError(f"device {dev.id}: per-slot arrays must have length {self.slots}")
            x, y = dev.position
            if not (0 <= x <= self.region and 0 <= y <= self.region):
                raise ScenarioError(f"device {dev.id}: position outside region")
        if len(self.uav.aggregate_size) != self.slots:
            raise ScenarioError(f"uav: aggregate_size must have length {self.slots}")

    # Vectorized views used by every formula.  Shapes: (M,), (M, 2) or (M, N).
    @property
    def n_devices(self) -> int:
        return len(self.devices)

    @property
    def n_rbs(self) -> int:
        return self.channel.rb_count

    @cached_property
    def positions(self) -> np.ndarray:
        return np.array([d.position for d in self.devices], dtype=float)

    @cached_property
    def cycles_per_bit(self) -> np.ndarray:
        return np.array([d.cycles_per_bit for d in self.devices])

    @cached_property
    def capacitance(self) -> np.ndarray:
        return np.array([d.capacitance for d in self.devices])

    @cached_property
    def model_size(self) -> np.ndarray:
        return np.array([d.model_size for d in self.devices], dtype=float)

    @cached_property
    def dataset_bits(self) -> np.ndarray:
        return np.array([d.dataset_bits for d in self.devices])

    @cached_property
    def local_rounds(self) -> np.ndarray:
        return np.array([d.local_rounds for d in self.devices], dtype=float)

    @cached_property
    def energy_budget(self) -> np.ndarray:
        return np.array([d.energy_budget for d in self.devices])

    @cached_property
    def f_max(self) -> np.ndarray:
        return np.array([d.f_max for d in self.devices])

    @cached_property
    def p_max(self) -> np.ndarray:
        return np.array([d.p_max for d in self.devices])

    @cached_property
    def aggregate_size(self) -> np.ndarray:
        return np.array(self.uav.aggregate_size, dtype=float)

    @cached_property
    def train_cycles(self) -> np.ndarray:
        """CPU cycles of local training per (m, n): D_m[n] * phi_m * R_m."""
        return self.dataset_bits * (self.cycles_per_bit * self.local_rounds)[:, None]

    def straight_line(self) -> np.ndarray:
        """Uniformly spaced straight trajectory from start to end, shape (N, 2)."""
        t = np.linspace(0.0, 1.0, self.slots)[:, None]
        start = np.asarray(self.uav.start, dtype=float)
        end = np.asarray(self.uav.end, dtype=float)
        return start + t * (end - start)

    def replace(self, **changes: Any) -> "Scenario":
        data = {f: getattr(self, f) for f in ("devices", "uav", "channel", "slots", "rng_seed", "region")}
        data.update(changes)
        return Scenario(**data)


# Default profiles.  "full" is the full-size reference setting; the "desk"
# profile shrinks M, U, N so the full AO + baseline suite runs in minutes.
# Values with no reference setting are marked "open" in the comments.
_FULL: dict[str, Any] = {
    "slots": 200,
    "seed": 0,
    "region": 1000.0,
    "devices": {
        "count": 20,
        "cycles_per_bit": 100.0,
        "capacitance": 1e-28,
        "sample_bits": 200.0,  # open
        "local_rounds": 5,  # open
        "energy_budget": 100.0,
        "f_max": [0.5e9, 2.0e9],  # open; per-device uniform range
        "p_max": 0.2,  # open
        "model_size": [3.5e5, 4.5e5],
        "positions": None,
    },
    "dataset": {"initial": 500, "lower": 300, "upper": 700, "rate_sensed": 50.0, "rate_dropped": 50.0},
    "uav": {
        "start": [100.0, 500.0],
        "end": [900.0, 500.0],
        "altitude": 100.0,
        "v_min": 3.0,
        "v_max": 60.0,
        "a_max": 200.0,
        "f_max": 10e9,
        "capacitance": 1e-28,
        "energy_budget": 2000.0,
        "p_max": 1.0,
        "cycles_per_bit": 100.0,
        "aggregate_size": None,  # default: mean of device model sizes per slot
    },
    "channel": {
        "ref_gain": 1e-3,
        "rb_bandwidth": 1e6,
        "rb_count": 30,
        "noise_dbm_per_hz": -174.0,
        "noise_down_dbm_per_hz": -174.0,
    },
}

_DESK = copy.deepcopy(_FULL)
_DESK["slots"] = 20
_DESK["devices"]["count"] = 8
_DESK["devices"]["energy_budget"] = 2.0
_DESK["devices"]["local_rounds"] = 1  # keeps upload a sizeable share of each slot
_DESK["channel"]["rb_count"] = 12
# Slots last about 0.1 s at this scale, so a short path leaves the UAV room to detour.
_DESK["uav"].update({"start": [480.0, 500.0], "end": [520.0, 500.0], "energy_budget": 60.0})

PROFILES: dict[str, dict[str, Any]] = {"full": _FULL, "desk": _DESK}


def _merge(base: dict[str, Any], over: Mapping[str, Any], path: str = "") -> dict[str, Any]:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in out:
            raise ScenarioError(f"unknown config field '{where}'")
        if isinstance(out[key], dict) and isinstance(val, Mapping):
            out[key] = _merge(out[key], val, where + ".")
        else:
            out[key] = val
    return out


def _as_range(value: Any, name: str) -> tuple[float, float]:
    if isinstance(value, (int, float)):
        return float(value), float(value)
    try:
        lo, hi = (float(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{name}: expected a number or [lo, hi]") from exc
    if lo > hi:
        raise ScenarioError(f"{name}: lo > hi")
    return lo, hi


def build_scenario(config: Mapping[str, Any] | None = None, profile: str = "desk") -> Scenario:
    """Build a scenario from a (partial) config mapping over a named profile."""
    config = dict(config or {})
    profile = config.pop("profile", profile)
    if profile not in PROFILES:
        raise ScenarioError(f"unknown profile '{profile}'")
    cfg = _merge(PROFILES[profile], config)
    try:
        seed = int(cfg["seed"])
        slots = int(cfg["slots"])
        region = float(cfg["region"])
        dev = cfg["devices"]
        count = int(dev["count"])
        ds = cfg["dataset"]
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"malformed config: {exc}") from exc
    if slots < 1:
        raise ScenarioError("slots must be >= 1")
    if count < 1:
        raise ScenarioError("devices.count must be >= 1")
    if region < 0:
        raise ScenarioError("region must be nonnegative")

    rng = np.random.default_rng(seed)
    # Fixed draw order: layout, CPU limits, model sizes, dataset increments.
    layout = random_layout(count, region, rng)
    u_f = rng.random(count)
    u_d = rng.random(count)
    if dev["positions"] is not None:
        layout = [tuple(float(c) for c in p) for p in dev["positions"]]
        if len(layout) != count:
            raise ScenarioError("devices.positions must list one point per device")

    f_lo, f_hi = _as_range(dev["f_max"], "devices.f_max")
    d_lo, d_hi = _as_range(dev["model_size"], "devices.model_size")
    f_max = f_lo + u_f * (f_hi - f_lo)
    model = d_lo + u_d * (d_hi - d_lo)

    state = DatasetState(
        samples=tuple([int(ds["initial"])] * count),
        lower=int(ds["lower"]),
        upper=int(ds["upper"]),
        rate_sensed=float(ds["rate_sensed"]),
        rate_dropped=float(ds["rate_dropped"]),
    )
    if not state.lower <= ds["initial"] <= state.upper:
        raise ScenarioError("dataset.initial must lie within [lower, upper]")
    history = [state.samples]
    for _ in range(slots - 1):
        state = step_dataset(state, rng)
        history.append(state.samples)
    samples = np.array(history).T  # (M, N)

    devices = tuple(
        DeviceSpec(
            id=m,
            position=layout[m],
            cycles_per_bit=float(dev["cycles_per_bit"]),
            capacitance=float(dev["capacitance"]),
            model_size=tuple([float(model[m])] * slots),
            samples=tuple(int(s) for s in samples[m]),
            sample_bits=float(dev["sample_bits"]),
            local_rounds=int(dev["local_rounds"]),
            energy_budget=float(dev["energy_budget"]),
            f_max=float(f_max[m]),
            p_max=float(dev["p_max"]),
        )
        for m in range(count)
    )
    u = cfg["uav"]
    agg = u["aggregate_size"]
    if agg is None:
        agg = [float(np.mean(model))] * slots
    elif isinstance(agg, (int, float)):
        agg = [float(agg)] * slots
    uav = UavSpec(
        start=(float(u["start"][0]), float(u["start"][1])),
        end=(float(u["end"][0]), float(u["end"][1])),
        altitude=float(u["altitude"]),
        v_min=float(u["v_min"]),
        v_max=float(u["v_max"]),
        a_max=float(u["a_max"]),
        f_max=float(u["f_max"]),
        capacitance=float(u["capacitance"]),
        energy_budget=float(u["energy_budget"]),
        p_max=float(u["p_max"]),
        cycles_per_bit=float(u["cycles_per_bit"]),
        aggregate_size=tuple(float(a) for a in agg),
    )
    ch = cfg["channel"]
    channel = ChannelSpec(
        ref_gain=float(ch["ref_gain"]),
        rb_bandwidth=float(ch["rb_bandwidth"]),
        rb_count=int(ch["rb_count"]),
        noise_density=dbm_per_hz_to_watts(float(ch["noise_dbm_per_hz"])),
        noise_density_down=dbm_per_hz_to_watts(float(ch["noise_down_dbm_per_hz"])),
    )
    return Scenario(devices=devices, uav=uav, channel=channel, slots=slots, rng_seed=seed, region=region)


def load_scenario(config_text: str) -> Scenario:
    """Parse YAML config text and build the scenario it describes.

    An empty document yields the desk profile.  Unknown keys, malformed values
    and violated invariants raise :class:`ScenarioError`.
    """
    try:
        data = yaml.safe_load(config_text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"config does not parse: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ScenarioError("config must be a mapping at top level")
    if "scenario" in data and len(data) == 1:
        data = data["scenario"]
    return build_scenario(data)


def scenario_to_json(scenario: Scenario) -> str:
    """Canonical, self-describing serialization (sorted keys, repr floats)."""
    payload = {
        "format": "uavfl.scenario/1",
        "slots": scenario.slots,
        "rng_seed": scenario.rng_seed,
        "region": scenario.region,
        "channel": asdict(scenario.channel),
        "uav": asdict(scenario.uav),
        "devices": [asdict(d) for d in scenario.devices],
    }
    return json.dumps(payload, sort_keys=True, indent=1)


def scenario_from_json(text: str) -> Scenario:
    data = json.loads(text)
    if data.get("format") != "uavfl.scenario/1":
        raise ScenarioError("not a serialized scenario")

    def tup(v: Any) -> Any:
        return tuple(v) if isinstance(v, list) else v

    devices = tuple(DeviceSpec(**{k: tup(v) for k, v in d.items()}) for d in data["devices"])
    uav = UavSpec(**{k: tup(v) for k, v in data["uav"].items()})
    channel = ChannelSpec(**data["channel"])
    return Scenario(
        devices=devices,
        uav=uav,
        channel=channel,
        slots=int(data["slots"]),
        rng_seed=int(data["rng_seed"]),
        region=float(data["region"]),
    )


