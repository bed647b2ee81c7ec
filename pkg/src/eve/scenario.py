"""Scenario configuration: loading, validation and seeded generation."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import IoFailure, ScenarioError, UnknownTemplate
from .grid.matpower import CASE141X7_SHARED_SENSORS, load_case, load_case141
from .grid.regions import SensorPlan, place_sensors
from .grid.topology import GridTopology, Line, validate_radial
from .market import PricingConfig, Prosumer
from .resources import Budget, Kind, build_asset

log = logging.getLogger(__name__)

TEMPLATES = ("case141x7", "toy3")


@dataclass
class ScenarioConfig:
    name: str
    grid: dict
    prosumers: list[dict]
    T: int = 6
    interval_minutes: float = 10.0
    windows: int = 3
    seed: int = 0
    sensors: dict = field(default_factory=lambda: {"interior_fraction": 0.5, "seed": 0, "shared": []})
    noise: dict = field(default_factory=lambda: {"variance": 1.0})
    attack: dict | None = None
    pricing: dict = field(default_factory=dict)
    verification: dict = field(default_factory=dict)
    penalty: dict = field(default_factory=lambda: {"rate": 1.0, "deadband_sigma": 3.0})
    power_factor: float = 0.85

    def __post_init__(self):
        if self.T < 1:
            raise ScenarioError("horizon T must be at least 1")
        if self.windows < 1:
            raise ScenarioError("window count must be at least 1")
        if not 0 < self.power_factor <= 1:
            raise ScenarioError("power factor must lie in (0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1, default=_np_default)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, separators=(",", ":"),
                                         default=_np_default).encode()).hexdigest()

    @classmethod
    def from_dict(cls, obj: dict) -> ScenarioConfig:
        known = set(cls.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise ScenarioError(f"unknown scenario fields: {sorted(extra)}")
        for req in ("name", "grid", "prosumers"):
            if req not in obj:
                raise ScenarioError(f"scenario is missing {req!r}")
        return cls(**copy.deepcopy(obj))


def _np_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def load_scenario(path: str | Path, seed: int | None = None) -> ScenarioConfig:
    """Read a scenario file; ``{"template": name, "seed": s}`` expands a built-in.

    ``seed`` replaces the file's seed; for templates it also re-draws the roster.
    """
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read scenario {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario {path} is not valid JSON: {exc}") from exc
    if "template" in obj:
        overrides = {k: v for k, v in obj.items() if k not in ("template", "seed")}
        if seed is not None:
            obj["seed"] = seed
        sc = generate_scenario(obj["template"], int(obj.get("seed", 0)), **obj.get("options", {}))
        for k, v in overrides.items():
            if k == "options":
                continue
            if not hasattr(sc, k):
                raise ScenarioError(f"unknown scenario field {k!r}")
            cur = getattr(sc, k)
            setattr(sc, k, {**cur, **v} if isinstance(cur, dict) and isinstance(v, dict) else v)
        return sc
    sc = ScenarioConfig.from_dict(obj)
    if seed is not None:
        sc.seed = seed
    return sc


def save_scenario(sc: ScenarioConfig, path: str | Path) -> None:
    try:
        Path(path).write_text(sc.to_json())
    except OSError as exc:
        raise IoFailure(f"cannot write scenario {path}: {exc}") from exc


# ----------------------------------------------------------------------------
# materialization

def build_topology(grid: dict) -> GridTopology:
    if grid.get("builtin") == "case141x7":
        return load_case141()
    if "builtin" in grid:
        raise UnknownTemplate(f"unknown built-in grid {grid['builtin']!r}")
    regions = {int(k): int(v) for k, v in grid.get("regions", {}).items()}
    if "matpower" in grid:
        return load_case(grid["matpower"], ohms_base_kv=grid.get("ohms_base_kv"),
                         loads_kva_pf=grid.get("loads_kva_pf"), region_of=regions or None)
    try:
        lines = tuple(Line(int(l["from"]), int(l["to"]), float(l["r"]), float(l["x"])) for l in grid["lines"])
        buses = tuple(int(b) for b in grid["buses"])
        topo = GridTopology(buses=buses, lines=lines, root=int(grid["root"]),
                            region_of=regions or {b: 0 for b in buses},
                            base_mva=float(grid.get("base_mva", 1.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"malformed grid block: {exc}") from exc
    return validate_radial(topo)


def build_sensor_plan(sc: ScenarioConfig, topo: GridTopology) -> SensorPlan:
    s = sc.sensors
    if "measured" in s:
        return SensorPlan.from_json(s)
    shared = tuple((int(a), int(b)) for a, b in s.get("shared", ()))
    return place_sensors(topo, interior_fraction=float(s.get("interior_fraction", 0.5)),
                         seed=int(s.get("seed", 0)), shared=shared)


def build_prosumers(sc: ScenarioConfig, topo: GridTopology) -> list[Prosumer]:
    out = []
    seen_bus: set[int] = set()
    slack_count = 0
    for entry in sc.prosumers:
        bus = int(entry["bus"])
        if bus not in topo.region_of:
            raise ScenarioError(f"prosumer {entry.get('id')} sits on unknown bus {bus}")
        if bus in seen_bus:
            raise ScenarioError(f"bus {bus} hosts more than one prosumer")
        seen_bus.add(bus)
        kind = Kind(entry["kind"])
        if kind == Kind.SLACK:
            slack_count += 1
            if bus != topo.root:
                raise ScenarioError("the slack asset must sit at the root bus")
        asset = build_asset(kind, entry.get("params", {}), sc.T)
        pid = str(entry.get("id", f"b{bus}"))
        budget = float(entry.get("budget", 1e9))
        out.append(Prosumer(pid, bus, topo.region_of[bus], asset, Budget(pid, budget)))
    if slack_count != 1:
        raise ScenarioError(f"expected exactly one slack asset, found {slack_count}")
    return out


def pricing_config(sc: ScenarioConfig) -> PricingConfig:
    return PricingConfig(**sc.pricing)


# ----------------------------------------------------------------------------
# built-in templates

DEFAULT_MIX = {
    "InflexibleLoad": 0.3, "Renewable": 0.2, "EV": 0.15, "TCL": 0.15,
    "Storage": 0.1, "DeferrableAppliance": 0.1,
}


def _solar(T: int, peak: float) -> list[float]:
    t = np.arange(T)
    return list(peak * (0.6 + 0.4 * np.sin(np.pi * (t + 0.5) / T)))


def random_asset(kind: str, T: int, rng: np.random.Generator, scale: float = 1.0) -> tuple[dict, float]:
    """Parameters drawn uniformly from documented ranges; returns (params, budget)."""
    price = rng.uniform(25.0, 40.0)
    budget = float(rng.uniform(20.0, 100.0))
    if kind == "InflexibleLoad":
        base = rng.uniform(0.02, 0.15) * scale
        return {"load": list(base * rng.uniform(0.8, 1.2, T))}, budget
    if kind == "Renewable":
        return {"forecast": _solar(T, rng.uniform(0.02, 0.1) * scale)}, budget
    if kind == "EV":
        rho = rng.uniform(0.007, 0.02) * scale
        t_a = int(rng.integers(0, max(1, T // 2)))
        t_d = int(rng.integers(t_a + 2, T + 3))
        window = min(t_d, T) - t_a
        need = rho * rng.uniform(0.3, 0.8) * window
        cap = float(need / rng.uniform(0.5, 0.9))
        c1 = list(np.linspace(price + 5.0, price - 5.0, T))
        return {"rho": rho, "capacity": cap, "u_init": cap - need, "t_a": t_a, "t_d": t_d,
                "c1": c1, "c_d": float(rng.uniform(0.3, 0.8) * (price - 5.0))}, budget
    if kind == "TCL":
        R = rng.uniform(1500.0, 2500.0) / scale
        tau = rng.uniform(1.0, 3.0)
        eta = -rng.uniform(2.0, 3.5)
        theta_r = rng.uniform(19.0, 22.0)
        theta_o = list(theta_r - rng.uniform(6.0, 12.0) + rng.uniform(-1, 1, T))
        band = rng.uniform(1.0, 2.0) / (R * abs(eta))
        demand = max(theta_r - min(theta_o), 0.0) / (R * abs(eta))
        weight = rng.uniform(0.002, 0.01)
        return {"R": R, "C": tau / R, "eta": eta, "rho": float(1.6 * demand + 2 * band),
                "theta_r": theta_r, "theta_o": theta_o, "u_lo": -band, "u_hi": band,
                "c2": float(weight * (R * eta) ** 2)}, budget
    if kind == "Storage":
        rho = rng.uniform(0.01, 0.05) * scale
        cap = rho * rng.uniform(2.0, 4.0)
        return {"rho": rho, "capacity": cap, "u_init": cap * rng.uniform(0.2, 0.8),
                "c1_pos": rng.uniform(0.5, 1.5), "c1_neg": rng.uniform(0.1, 0.5)}, budget
    if kind == "DeferrableAppliance":
        L = int(rng.integers(2, 4))
        h = list(rng.uniform(0.005, 0.02, L) * scale)
        return {"h": h, "tau_s": int(rng.integers(0, T - L + 1)), "c1": rng.uniform(0.2, 1.0)}, budget
    raise ScenarioError(f"no generator for asset kind {kind}")


def _expected_net(kind: str, params: dict, T: int) -> np.ndarray:
    """Rough net injection used to anchor the wholesale schedule."""
    if kind == "InflexibleLoad":
        return -np.asarray(params["load"])
    if kind == "Renewable":
        return np.asarray(params["forecast"])
    if kind == "EV":
        return np.full(T, -(params["capacity"] - params["u_init"]) / T)
    if kind == "TCL":
        a = build_asset("TCL", params, T)
        return a.ell_T
    if kind == "DeferrableAppliance":
        return np.full(T, -sum(params["h"]) / T)
    return np.zeros(T)


def generate_scenario(template: str, seed: int = 0, *, n_prosumers: int | None = None,
                      mix: dict[str, float] | None = None, T: int = 6) -> ScenarioConfig:
    if template == "case141x7":
        return _case141x7(seed, n_prosumers or 100, mix or DEFAULT_MIX, T)
    if template == "toy3":
        return _toy3(seed, T)
    raise UnknownTemplate(f"unknown template {template!r}; choose from {TEMPLATES}")


def _allocate(n: int, mix: dict[str, float]) -> list[str]:
    """Largest-remainder rounding of the configured fractions."""
    kinds = sorted(mix)
    total = sum(mix.values())
    raw = {k: n * mix[k] / total for k in kinds}
    counts = {k: int(math.floor(raw[k])) for k in kinds}
    rest = sorted(kinds, key=lambda k: (-(raw[k] - counts[k]), k))
    for k in rest[: n - sum(counts.values())]:
        counts[k] += 1
    return [k for k in kinds for _ in range(counts[k])]


def _slack_entry(root: int, T: int, net: np.ndarray, c2: float) -> dict:
    return {"id": "slack", "bus": root, "kind": "Slack", "budget": 1e9,
            "params": {"p_s": list(np.round(-net, 6)), "c2": c2, "c1": 30.0}}


def _case141x7(seed: int, n: int, mix: dict[str, float], T: int) -> ScenarioConfig:
    rng = np.random.default_rng(seed)
    topo = load_case141()
    candidates = [b for b in topo.buses if b != topo.root]
    if n > len(candidates):
        raise ScenarioError(f"case141x7 holds at most {len(candidates)} prosumers")
    kinds = _allocate(n, mix)
    rng.shuffle(kinds)
    buses = sorted(rng.choice(candidates, size=n, replace=False).tolist())
    prosumers = []
    net = np.zeros(T)
    for bus, kind in zip(buses, kinds):
        params, budget = random_asset(kind, T, rng)
        net += _expected_net(kind, params, T)
        prosumers.append({"id": f"b{bus}", "bus": int(bus), "kind": kind, "params": params,
                          "budget": budget})
    c2 = 0.5
    prosumers.insert(0, _slack_entry(topo.root, T, net, c2))
    return ScenarioConfig(
        name="case141x7", grid={"builtin": "case141x7"}, prosumers=_plain(prosumers), T=T,
        seed=seed,
        sensors={"interior_fraction": 0.5, "seed": seed,
                 "shared": [list(s) for s in CASE141X7_SHARED_SENSORS]},
        pricing={"alpha_hat": 3.0 * 2 * c2, "smoothing": 0.1},
    )


def _toy3(seed: int, T: int) -> ScenarioConfig:
    rng = np.random.default_rng(seed)
    grid = {"buses": [1, 2, 3], "root": 1, "base_mva": 1.0,
            "lines": [{"from": 1, "to": 2, "r": 0.01, "x": 0.01},
                      {"from": 2, "to": 3, "r": 0.01, "x": 0.01}],
            "regions": {"1": 0, "2": 0, "3": 1}}
    flexible = ["EV", "TCL", "Storage", "DeferrableAppliance"]
    prosumers = []
    net = np.zeros(T)
    for bus in (2, 3):
        kind = flexible[int(rng.integers(len(flexible)))]
        params, _ = random_asset(kind, T, rng, scale=10.0)
        net += _expected_net(kind, params, T)
        prosumers.append({"id": f"b{bus}", "bus": bus, "kind": kind, "params": params, "budget": 1e6})
    c2 = 0.5
    prosumers.insert(0, _slack_entry(1, T, net, c2))
    return ScenarioConfig(name="toy3", grid=grid, prosumers=_plain(prosumers), T=T, seed=seed,
                          sensors={"interior_fraction": 1.0, "seed": seed, "shared": []},
                          pricing={"alpha_hat": 3.0 * 2 * c2, "smoothing": 0.01, "eps": 1e-6, "balance_tol": 1e-5})


def _plain(obj):
    """Round-trip through JSON so the roster holds only plain Python values."""
    return json.loads(json.dumps(obj, default=_np_default))
