"""Scenario files: TOML parsing with strict key checking, and the preset library."""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .domain import (CoefficientField, ControlRegion, RadialMetric, ZoneCoefficients, ZoneLayout,
                     build_zone_map, transmission_coefficients)
from .errors import ConfigError, InvalidCoefficients
from .geometry import shape_from_dict
from .propagator import DataPair, ExactBox, SolverConfig, SpongeLayer, bump, random_pair

PRESETS = ("fig1a", "fig1b", "fig2", "fig3", "fig4a", "fig4b", "fig5", "free_space", "convex_obstacle",
           "two_disc", "unit_box")


@dataclass
class ControlSettings:
    T: Optional[float] = None          # None: search T_ladder
    T_ladder: tuple = (2.0, 3.0, 4.0)
    alpha: float = 1.0
    beta: float = 1.0
    tol: float = 1e-6
    max_iter: int = 200
    rho_target: float = 0.9
    power_steps: int = 20
    filter_fraction: float = 0.5
    seed: int = 0
    verify_threshold: float = 1e-2


@dataclass
class DecaySettings:
    n_draws: int = 16
    seed: int = 0
    t_max: Optional[float] = None      # None: the clean horizon
    n_samples: int = 40
    region: str = "ball"
    parity: str = "even"
    bump_radius: Optional[float] = None


@dataclass
class RaySettings:
    n_rays: int = 2000
    t_max: Optional[float] = None      # None: twice the chord bound
    max_splits: int = 12
    weights: str = "equal"
    seed: int = 0
    probes: tuple = ()                 # extra rays (x, y, angle_deg) traced alongside the Sobol launch


@dataclass
class DataSettings:
    kind: str = "bump"                 # bump | random | eigenmode
    center: tuple = (0.0, 0.0)
    radius: float = 0.3
    amplitude: float = 1.0
    velocity_amplitude: float = 0.0
    mode: tuple = (1, 1)
    seed: int = 0
    n_bumps: int = 2
    T: float = 1.0                     # duration of a plain simulation


@dataclass
class Scenario:
    name: str
    description: str
    layout: ZoneLayout
    coeffs: CoefficientField
    region: Optional[ControlRegion]
    solver: SolverConfig
    control: ControlSettings = field(default_factory=ControlSettings)
    decay: DecaySettings = field(default_factory=DecaySettings)
    rays: RaySettings = field(default_factory=RaySettings)
    data: DataSettings = field(default_factory=DataSettings)
    source: str = ""
    raw: dict = field(default_factory=dict)

    @property
    def grid_spacing(self):
        return self.solver.grid_spacing

    def zone_map(self, grid_spacing=None):
        return build_zone_map(self.layout, self.coeffs, grid_spacing or self.solver.grid_spacing, self.region)

    def with_grid(self, h):
        return replace(self, solver=replace(self.solver, grid_spacing=float(h)))

    def initial_data(self, zone_map):
        d = self.data
        X, Y = zone_map.X, zone_map.Y
        support = getattr(zone_map, "star", zone_map.fluid) if self.region is not None else zone_map.fluid
        if d.kind == "bump":
            b = bump(X, Y, d.center, d.radius)
            pair = DataPair(d.amplitude * b, d.velocity_amplitude * b)
        elif d.kind == "random":
            pair = random_pair(zone_map, np.random.default_rng(d.seed), support=support, n_bumps=d.n_bumps,
                               radius=d.radius)
        elif d.kind == "eigenmode":
            (x0, x1, y0, y1) = zone_map.grid.box
            p, q = d.mode
            m = np.sin(p * np.pi * (X - x0) / (x1 - x0)) * np.sin(q * np.pi * (Y - y0) / (y1 - y0))
            pair = DataPair(d.amplitude * m, d.velocity_amplitude * m)
        else:
            raise ConfigError(f"unknown data kind {d.kind!r}", "data.kind")
        return pair.masked(support & zone_map.fluid)

    def resolved(self):
        """Plain-dict view of every parameter, for manifests."""
        def dc(obj):
            return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
        s = self.solver
        return {
            "name": self.name,
            "source": self.source,
            "grid": {"spacing": s.grid_spacing, "box": list(self.layout.box),
                     "measurement_radius": self.layout.measurement_radius},
            "solver": {"time_step": s.time_step, "cfl_safety": s.cfl_safety, "obstacle_bc": s.obstacle_bc,
                       "truncation": type(s.truncation).__name__,
                       **({"sponge_width": s.truncation.width, "sponge_strength": s.truncation.strength}
                          if isinstance(s.truncation, SpongeLayer) else {})},
            "control_region_delta": None if self.region is None else self.region.delta,
            "control": dc(self.control),
            "decay": dc(self.decay),
            "rays": dc(self.rays),
            "data": dc(self.data),
            "raw": _plain(self.raw),
        }


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


# --------------------------------------------------------------------------
# strict parsing
# --------------------------------------------------------------------------

TOP_KEYS = {"name", "description", "obstacle", "zones", "control_region", "grid", "coefficients", "solver",
            "control", "decay", "rays", "data"}
SHAPE_KEYS = {"disc": {"kind", "center", "radius"},
              "ellipse": {"kind", "center", "semi_axes", "angle_deg"},
              "polygon": {"kind", "vertices"},
              "rectangle": {"kind", "center", "width", "height"},
              "union": {"kind", "parts"}}
GRID_KEYS = {"spacing", "box", "measurement_radius", "ball_center"}
SOLVER_KEYS = {"time_step", "cfl_safety", "obstacle_bc", "truncation", "sponge_width", "sponge_strength"}
COEFF_KEYS = {"family", "speeds", "zone"}
ZONE_COEFF_KEYS = {"c", "g", "speed", "radial_gain"}


def _check_keys(table, allowed, prefix):
    if not isinstance(table, dict):
        raise ConfigError(f"expected a table at {prefix}", prefix)
    for k in table:
        if k not in allowed:
            raise ConfigError("unknown configuration key", f"{prefix}.{k}" if prefix else k)


def _shape(table, prefix):
    kind = table.get("kind")
    if kind not in SHAPE_KEYS:
        raise ConfigError(f"unknown or missing shape kind {kind!r}", f"{prefix}.kind")
    _check_keys(table, SHAPE_KEYS[kind], prefix)
    if kind == "union":
        for i, p in enumerate(table.get("parts", [])):
            _shape(p, f"{prefix}.parts[{i}]")
    try:
        return shape_from_dict(table)
    except KeyError as e:
        raise ConfigError("missing shape parameter", f"{prefix}.{e.args[0]}") from None
    except ValueError as e:
        raise ConfigError(str(e), prefix) from None


def _settings(cls, table, prefix):
    names = {f.name: f for f in fields(cls)}
    _check_keys(table, set(names), prefix)
    kw = {}
    for k, v in table.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kw)
    except TypeError as e:
        raise ConfigError(str(e), prefix) from None


def _coefficients(table, n_zones):
    _check_keys(table, COEFF_KEYS, "coefficients")
    family = table.get("family", "transmission" if "speeds" in table else "general")
    if family == "transmission":
        speeds = table.get("speeds", [])
        if len(speeds) != n_zones:
            raise ConfigError(f"need {n_zones} speeds, got {len(speeds)}", "coefficients.speeds")
        try:
            return transmission_coefficients(speeds)
        except InvalidCoefficients as e:
            raise ConfigError(str(e), "coefficients.speeds") from None
    if family != "general":
        raise ConfigError(f"unknown coefficient family {family!r}", "coefficients.family")
    entries = table.get("zone", [])
    if len(entries) != n_zones:
        raise ConfigError(f"need {n_zones} [[coefficients.zone]] entries, got {len(entries)}", "coefficients.zone")
    zones = []
    for i, e in enumerate(entries):
        pre = f"coefficients.zone[{i}]"
        _check_keys(e, ZONE_COEFF_KEYS, pre)
        if "speed" in e:
            if "c" in e:
                raise ConfigError("give either speed or c", f"{pre}.speed")
            c = 1.0 / float(e["speed"]) ** 2
        else:
            c = float(e.get("c", 1.0))
        g = np.asarray(e.get("g", [[1.0, 0.0], [0.0, 1.0]]), dtype=float)
        if g.shape != (2, 2) or abs(g[0, 1] - g[1, 0]) > 0:
            raise ConfigError("metric must be a symmetric 2x2 matrix", f"{pre}.g")
        gain = float(e.get("radial_gain", 0.0))
        gval = RadialMetric(g, gain) if gain != 0.0 else tuple(map(tuple, g))
        zones.append(ZoneCoefficients(c=c, g=gval))
    return CoefficientField(tuple(zones))


def parse_scenario(doc: dict, source="") -> Scenario:
    _check_keys(doc, TOP_KEYS, "")
    obstacle = None
    if "obstacle" in doc and doc["obstacle"].get("kind", "none") != "none":
        obstacle = _shape(doc["obstacle"], "obstacle")
    zones = [_shape(z, f"zones[{i}]") for i, z in enumerate(doc.get("zones", []))]
    if "grid" not in doc:
        raise ConfigError("missing [grid] section", "grid")
    grid = doc["grid"]
    _check_keys(grid, GRID_KEYS, "grid")
    for k in ("spacing", "box", "measurement_radius"):
        if k not in grid:
            raise ConfigError("missing grid parameter", f"grid.{k}")
    layout = ZoneLayout(obstacle, zones, float(grid["measurement_radius"]), tuple(float(b) for b in grid["box"]),
                        tuple(grid.get("ball_center", (0.0, 0.0))))
    coeffs = _coefficients(doc.get("coefficients", {}), len(zones))
    region = None
    if "control_region" in doc:
        cr = dict(doc["control_region"])
        delta = cr.pop("delta", None)
        region = ControlRegion(_shape(cr, "control_region"), None if delta is None else float(delta))
    sv = doc.get("solver", {})
    _check_keys(sv, SOLVER_KEYS, "solver")
    trunc_name = sv.get("truncation", "exact_box")
    if trunc_name == "exact_box":
        trunc = ExactBox()
    elif trunc_name == "sponge":
        trunc = SpongeLayer(float(sv.get("sponge_width", 1.0)), float(sv.get("sponge_strength", 5.0)))
    else:
        raise ConfigError(f"unknown truncation {trunc_name!r}", "solver.truncation")
    try:
        solver = SolverConfig(grid_spacing=float(grid["spacing"]), time_step=sv.get("time_step"),
                              obstacle_bc=sv.get("obstacle_bc", "dirichlet"), truncation=trunc,
                              cfl_safety=float(sv.get("cfl_safety", 0.9)))
    except ValueError as e:
        raise ConfigError(str(e), "solver") from None
    sc = Scenario(
        name=str(doc.get("name", Path(source).stem if source else "scenario")),
        description=str(doc.get("description", "")),
        layout=layout, coeffs=coeffs, region=region, solver=solver,
        control=_settings(ControlSettings, doc.get("control", {}), "control"),
        decay=_settings(DecaySettings, doc.get("decay", {}), "decay"),
        rays=_settings(RaySettings, doc.get("rays", {}), "rays"),
        data=_settings(DataSettings, doc.get("data", {}), "data"),
        source=str(source), raw=doc)
    return sc


def preset_path(name):
    return resources.files("wavectl") / "presets" / f"{name}.toml"


def load_scenario(spec) -> Scenario:
    """Load a scenario from a file path or a preset name."""
    p = Path(str(spec))
    if p.suffix == ".toml" or p.exists():
        if not p.exists():
            raise ConfigError(f"scenario file {p} not found", "scenario")
        text, source = p.read_text(), str(p)
    else:
        if spec not in PRESETS:
            raise ConfigError(f"unknown preset {spec!r}; presets: {', '.join(PRESETS)}", "scenario")
        text, source = preset_path(spec).read_text(), f"preset:{spec}"
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse scenario: {e}", "scenario") from None
    return parse_scenario(doc, source)
