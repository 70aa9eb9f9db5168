"""Geometric-optics rays in piecewise-constant layered media.

Straight segments inside zones, specular reflection at the obstacle, and
splitting at zone interfaces into a refracted and a reflected branch (or a
single reflected branch under total internal reflection).  Incidence within
GLANCE_DEG of tangency is reported as a glancing event and the ray continues
undeviated.  Branch amplitudes are bookkeeping weights, not wave amplitudes.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import qmc

from .domain import CoefficientField, ZoneLayout
from .errors import UnsupportedVariableMetric
from .geometry import Disc

GLANCE_DEG = 0.5
AMPLITUDE_FLOOR = 1e-3
EVENT_TYPES = ("launch", "reflect", "refract", "TIR", "glance", "escape", "prune", "horizon")
RAY_COLUMNS = ["ray_id", "branch_id", "event_index", "t", "x", "y", "event_type", "zone", "amplitude"]
_EPS = 1e-9


class _TIR:
    """Sentinel returned by snell_refract when no transmitted angle exists."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "TotalInternalReflection"

    def __bool__(self):
        return False


TotalInternalReflection = _TIR()


def snell_refract(theta_i, c_i, c_t):
    """Transmitted angle from sin(theta_t) = (c_t / c_i) sin(theta_i), or TotalInternalReflection."""
    if not (0.0 <= theta_i < 0.5 * math.pi):
        raise ValueError("incidence angle must lie in [0, pi/2)")
    if c_i <= 0 or c_t <= 0:
        raise ValueError("speeds must be positive")
    s = (c_t / c_i) * math.sin(theta_i)
    if s > 1.0:
        return TotalInternalReflection
    return math.asin(s)


def split_weights(theta_i, theta_t, c_i, c_t, rule="equal"):
    """(reflected, transmitted) fractions of the parent amplitude; they sum to 1."""
    if rule == "equal":
        return 0.5, 0.5
    if rule == "acoustic":
        # continuity of u and its normal derivative: r = (k_i cos_i - k_t cos_t) / (k_i cos_i + k_t cos_t)
        a = math.cos(theta_i) / c_i
        b = math.cos(theta_t) / c_t
        R = ((a - b) / (a + b)) ** 2
        return R, 1.0 - R
    raise ValueError(f"unknown split rule {rule!r}")


@dataclass
class Ray:
    position: np.ndarray
    direction: np.ndarray
    zone: int
    t: float = 0.0
    amplitude: float = 1.0
    generation: int = 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        self.direction = d / np.hypot(*d)

    @classmethod
    def launch(cls, layout: ZoneLayout, x, y, angle):
        zone = int(layout.zone_of(x, y))
        if zone == 0:
            raise ValueError(f"launch point ({x}, {y}) lies inside the obstacle")
        return cls(np.array([x, y]), np.array([math.cos(angle), math.sin(angle)]), zone)


@dataclass
class PathEvent:
    branch_id: int
    event_index: int
    t: float
    x: float
    y: float
    event_type: str
    zone: int
    amplitude: float
    incoming: tuple = None     # refract events: direction before the crossing
    outgoing: tuple = None     # refract events: transmitted direction
    normal: tuple = None       # refract events: interface normal


@dataclass
class RayOutcome:
    ray_id: int
    branch_id: int
    kind: str              # escaped | trapped | negligible
    t: float
    amplitude: float


@dataclass
class EscapeReport:
    outcomes: list
    n_rays: int
    t_max: float
    chord_bound: float
    events: list = field(default_factory=list)

    @property
    def escaped(self):
        return [o for o in self.outcomes if o.kind == "escaped"]

    @property
    def trapped(self):
        return [o for o in self.outcomes if o.kind == "trapped"]

    @property
    def max_escape_time(self):
        e = self.escaped
        return max(o.t for o in e) if e else float("nan")

    @property
    def trapped_census(self):
        """Per ray: total amplitude still alive at the horizon."""
        census = {}
        for o in self.trapped:
            census[o.ray_id] = census.get(o.ray_id, 0.0) + o.amplitude
        return census

    @property
    def surviving_weight(self):
        return float(sum(o.amplitude for o in self.trapped))

    @property
    def census_fraction(self):
        """Amplitude alive at the horizon as a fraction of the total launch weight."""
        return self.surviving_weight / max(self.n_rays, 1)

    @property
    def nontrapping_consistent(self):
        return not any(o.amplitude > AMPLITUDE_FLOOR for o in self.trapped)

    def to_dict(self):
        kinds = {}
        for o in self.outcomes:
            kinds[o.kind] = kinds.get(o.kind, 0) + 1
        return {
            "n_rays": self.n_rays, "t_max": self.t_max, "chord_bound": self.chord_bound,
            "max_escape_time": self.max_escape_time, "outcome_counts": kinds,
            "nontrapping_consistent": self.nontrapping_consistent,
            "surviving_weight": self.surviving_weight, "census_fraction": self.census_fraction,
            "trapped_rays": sorted(self.trapped_census),
            "trapped_census": {str(k): v for k, v in sorted(self.trapped_census.items())},
        }


def zone_speeds(layout: ZoneLayout, coeffs: CoefficientField):
    """Speed per zone index 1..N0+1; raises for non-constant or anisotropic zones."""
    speeds = {}
    for k in range(1, layout.n_zones + 2):
        v = coeffs.for_zone(k).isotropic_speed()
        if v is None:
            raise UnsupportedVariableMetric(f"zone {k} has a variable or anisotropic metric; rays need constant speeds")
        speeds[k] = v
    return speeds


def chord_bound(layout: ZoneLayout, coeffs: CoefficientField):
    """(2a + pi r_K) / c_min with r_K half the obstacle diameter."""
    a = layout.measurement_radius
    r_k = 0.5 * layout.obstacle.diameter if layout.obstacle is not None else 0.0
    c_min = min(zone_speeds(layout, coeffs).values())
    return (2 * a + math.pi * r_k) / c_min


def _next_hit(p, d, layout: ZoneLayout, ball: Disc):
    """Nearest crossing: (t, kind, normal) with kind 'obstacle', 'interface' or 'ball'."""
    best = (math.inf, None, None)
    if layout.obstacle is not None:
        h = layout.obstacle.first_hit(p, d, _EPS)
        if h is not None and h[0] < best[0]:
            best = (h[0], "obstacle", h[1])
    for k in range(1, layout.n_zones + 1):
        h = layout.zone_shape(k).first_hit(p, d, _EPS)
        if h is not None and h[0] < best[0]:
            best = (h[0], "interface", h[1])
    h = ball.first_hit(p, d, _EPS)
    if h is not None and h[0] <= best[0]:
        best = (h[0], "ball", h[1])
    return best


def trace(ray: Ray, layout: ZoneLayout, coeffs: CoefficientField, t_max, max_splits=12, weights="equal",
          amplitude_floor=AMPLITUDE_FLOOR):
    """Trace a ray and all its branches up to path time t_max.

    Returns (events, outcomes); outcomes have one entry per terminal branch.
    """
    speeds = zone_speeds(layout, coeffs)
    ball = Disc(layout.ball_center, layout.measurement_radius)
    cos_glance = math.cos(math.radians(90.0 - GLANCE_DEG))
    events, outcomes = [], []
    next_branch = [1]
    stack = [(0, ray, 0)]   # (branch id, ray, next event index)

    def emit(bid, idx, r, kind):
        events.append(PathEvent(bid, idx, r.t, float(r.position[0]), float(r.position[1]), kind, r.zone,
                                r.amplitude))
        return idx + 1

    first = True
    while stack:
        bid, r, idx = stack.pop()
        if first:
            idx = emit(bid, idx, r, "launch")
            first = False
        while True:
            v = speeds[r.zone]
            s, kind, n = _next_hit(r.position, r.direction, layout, ball)
            if not math.isfinite(s):
                # outside the ball and heading away
                idx = emit(bid, idx, r, "escape")
                outcomes.append(RayOutcome(-1, bid, "escaped", r.t, r.amplitude))
                break
            t_hit = r.t + s / v
            if t_hit >= t_max:
                r = replace(r, position=r.position + (t_max - r.t) * v * r.direction, t=t_max)
                idx = emit(bid, idx, r, "horizon")
                outcomes.append(RayOutcome(-1, bid, "trapped", t_max, r.amplitude))
                break
            p = r.position + s * r.direction
            r = replace(r, position=p, t=t_hit)
            n = np.asarray(n, float)
            dn = float(r.direction @ n)
            if kind == "ball":
                if dn > 0:
                    idx = emit(bid, idx, r, "escape")
                    outcomes.append(RayOutcome(-1, bid, "escaped", t_hit, r.amplitude))
                    break
                r = replace(r, position=p + _EPS * r.direction)
                continue
            if abs(dn) < cos_glance:
                idx = emit(bid, idx, r, "glance")
                r = replace(r, position=p + _EPS * r.direction)
                continue
            if kind == "obstacle":
                r = replace(r, direction=r.direction - 2 * dn * n)
                idx = emit(bid, idx, r, "reflect")
                continue
            # interface between two zones
            nt = n if dn > 0 else -n            # normal pointing along travel
            other = int(layout.zone_of(*(p + 1e-7 * nt)))
            if other == r.zone or other == 0:
                r = replace(r, position=p + _EPS * r.direction)
                continue
            v_t = speeds[other]
            cos_i = abs(dn)
            theta_i = math.acos(min(1.0, cos_i))
            reflected = r.direction - 2 * dn * n
            theta_t = snell_refract(theta_i, v, v_t)
            if theta_t is TotalInternalReflection:
                r = replace(r, direction=reflected)
                idx = emit(bid, idx, r, "TIR")
                continue
            if r.generation >= max_splits:
                idx = emit(bid, idx, r, "prune")
                outcomes.append(RayOutcome(-1, bid, "negligible", t_hit, r.amplitude))
                break
            w_r, w_t = split_weights(theta_i, theta_t, v, v_t, weights)
            a_r = r.amplitude * w_r
            a_t = r.amplitude - a_r
            tang = r.direction - (r.direction @ nt) * nt
            d_t = (v_t / v) * tang + math.cos(theta_t) * nt
            child_t = Ray(p + _EPS * d_t, d_t, other, t_hit, a_t, r.generation + 1)
            child_r = Ray(p, reflected, r.zone, t_hit, a_r, r.generation + 1)
            idx = emit(bid, idx, r, "refract")
            events[-1].incoming = tuple(r.direction)
            events[-1].outgoing = tuple(d_t)
            events[-1].normal = tuple(nt)
            kids = []
            for child in (child_r, child_t):
                cb = next_branch[0]
                next_branch[0] += 1
                if child.amplitude < amplitude_floor:
                    events.append(PathEvent(cb, 0, child.t, float(p[0]), float(p[1]), "prune", child.zone,
                                            child.amplitude))
                    outcomes.append(RayOutcome(-1, cb, "negligible", child.t, child.amplitude))
                else:
                    kids.append((cb, child, 0))
            stack.extend(reversed(kids))
            break
    return events, outcomes


def launch_points(layout: ZoneLayout, n_rays, seed=0):
    """Scrambled Sobol launch points (x, y, angle) in the fluid part of the measurement ball."""
    sob = qmc.Sobol(d=3, scramble=True, seed=seed)
    a = layout.measurement_radius
    cx, cy = layout.ball_center
    out = np.zeros((0, 3))
    m = max(4, int(math.ceil(math.log2(max(n_rays, 2)))))
    while out.shape[0] < n_rays:
        u = sob.random_base2(m)
        r = a * np.sqrt(u[:, 0]) * (1 - 1e-9)
        phi = 2 * np.pi * u[:, 1]
        x, y = cx + r * np.cos(phi), cy + r * np.sin(phi)
        keep = layout.zone_of(x, y) > 0
        out = np.vstack([out, np.stack([x[keep], y[keep], 2 * np.pi * u[keep, 2]], axis=1)])
    return out[:n_rays]


def escape_time_survey(layout: ZoneLayout, coeffs: CoefficientField, n_rays, t_max=None, max_splits=12,
                       weights="equal", seed=0, probes=()):
    """Launch n_rays Sobol-stratified rays plus explicit probe rays (x, y, angle_deg)."""
    bound = chord_bound(layout, coeffs)
    t_max = 2.0 * bound if t_max is None else float(t_max)
    pts = launch_points(layout, n_rays, seed) if n_rays > 0 else np.zeros((0, 3))
    if len(probes):
        pr = np.array([[p[0], p[1], math.radians(p[2])] for p in probes], dtype=float)
        pts = np.vstack([pts, pr])
    outcomes, events = [], []
    for rid, (x, y, ang) in enumerate(pts):
        ev, oc = trace(Ray.launch(layout, x, y, ang), layout, coeffs, t_max, max_splits, weights)
        for o in oc:
            o.ray_id = rid
        outcomes.extend(oc)
        events.append(ev)
    return EscapeReport(outcomes, len(pts), t_max, bound, events)


def write_rays_csv(path, report: EscapeReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RAY_COLUMNS)
        for rid, evs in enumerate(report.events):
            for e in sorted(evs, key=lambda e: (e.branch_id, e.event_index)):
                w.writerow([rid, e.branch_id, e.event_index, f"{e.t:.17g}", f"{e.x:.17g}", f"{e.y:.17g}",
                            e.event_type, e.zone, f"{e.amplitude:.17g}"])
