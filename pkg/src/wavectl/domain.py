"""Exterior domain description and its rasterization on a vertex-centred grid.

Zone numbering: the obstacle K is surrounded by bounded shells O_1 (touching
K), O_2, ..., O_N0, and the unbounded exterior (index N0 + 1) where c = 1 and
g = I.  Zone shapes are listed outermost first: ``zones[0]`` is the outer
boundary of O_N0 and ``zones[-1]`` the outer boundary of O_1.

Grid nodes sit strictly inside the box; the box edges carry homogeneous
Dirichlet walls.  Obstacle nodes are inactive and hold zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union as TUnion

import numpy as np

from .errors import (DegenerateCollar, InvalidCoefficients, InvalidNesting, PointInObstacle,
                     UnresolvedGeometry)
from .geometry import Disc, Polygon, Shape, boundary_gap

MIN_GAP_CELLS = 4
MIN_BAND_CELLS = 3


# --------------------------------------------------------------------------
# grid
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Uniform node grid of spacing h strictly inside ``box = (x0, x1, y0, y1)``.

    The box is snapped so that its width is an integer multiple of h; wall
    nodes sit on the snapped box edges and carry u = 0.
    """

    box: tuple
    h: float

    def __post_init__(self):
        x0, x1, y0, y1 = (float(b) for b in self.box)
        if not (x1 > x0 and y1 > y0):
            raise ValueError("box must have positive extent")
        if self.h <= 0:
            raise ValueError("grid spacing must be positive")
        mx = max(int(round((x1 - x0) / self.h)), 2)
        my = max(int(round((y1 - y0) / self.h)), 2)
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        snapped = (cx - mx * self.h / 2, cx + mx * self.h / 2, cy - my * self.h / 2, cy + my * self.h / 2)
        object.__setattr__(self, "box", snapped)

    @property
    def nx(self):
        return int(round((self.box[1] - self.box[0]) / self.h)) - 1

    @property
    def ny(self):
        return int(round((self.box[3] - self.box[2]) / self.h)) - 1

    @property
    def shape(self):
        return (self.nx, self.ny)

    @property
    def x(self):
        return self.box[0] + self.h * np.arange(1, self.nx + 1)

    @property
    def y(self):
        return self.box[2] + self.h * np.arange(1, self.ny + 1)

    def mesh(self):
        return np.meshgrid(self.x, self.y, indexing="ij")

    def index_of(self, px, py):
        """Nearest node indices of a point."""
        i = int(round((px - self.box[0]) / self.h)) - 1
        j = int(round((py - self.box[2]) / self.h)) - 1
        return i, j

    def wall_distance(self):
        X, Y = self.mesh()
        return np.minimum.reduce([X - self.box[0], self.box[1] - X, Y - self.box[2], self.box[3] - Y])


# --------------------------------------------------------------------------
# coefficients
# --------------------------------------------------------------------------

class RadialMetric:
    """g(x) = g0 * (1 + gain * |x - center|^2), a smooth variable metric."""

    def __init__(self, g0, gain, center=(0.0, 0.0)):
        self.g0 = np.asarray(g0, dtype=float)
        self.gain = float(gain)
        self.center = np.asarray(center, dtype=float)

    def __call__(self, x, y):
        r2 = (np.asarray(x) - self.center[0]) ** 2 + (np.asarray(y) - self.center[1]) ** 2
        s = 1.0 + self.gain * r2
        return self.g0[0, 0] * s, self.g0[0, 1] * s, self.g0[1, 1] * s

    def __repr__(self):
        return f"RadialMetric(g0={self.g0.tolist()}, gain={self.gain})"


@dataclass(frozen=True)
class ZoneCoefficients:
    """Speed weight c and metric g of one zone.

    ``c`` is a positive number or a callable ``c(x, y)``; ``g`` is a symmetric
    2x2 matrix or a callable ``g(x, y) -> (g11, g12, g22)``.
    """

    c: TUnion[float, Callable] = 1.0
    g: TUnion[Sequence, Callable] = ((1.0, 0.0), (0.0, 1.0))

    @classmethod
    def from_speed(cls, v):
        return cls(c=1.0 / float(v) ** 2)

    @property
    def constant(self):
        return not callable(self.c) and not callable(self.g)

    def evaluate(self, x, y):
        x = np.asarray(x, dtype=float)
        c = self.c(x, y) if callable(self.c) else np.full(x.shape, float(self.c))
        if callable(self.g):
            g11, g12, g22 = self.g(x, y)
        else:
            G = np.asarray(self.g, dtype=float)
            g11, g12, g22 = G[0, 0], G[0, 1], G[1, 1]
        g11, g12, g22 = (np.broadcast_to(np.asarray(v, dtype=float), x.shape) for v in (g11, g12, g22))
        return np.asarray(c, dtype=float), g11, g12, g22

    def isotropic_speed(self):
        """Wave speed for constant isotropic zones, None otherwise."""
        if not self.constant:
            return None
        G = np.asarray(self.g, dtype=float)
        if abs(G[0, 1]) > 0 or abs(G[0, 0] - G[1, 1]) > 1e-14 * abs(G[0, 0]):
            return None
        return float(np.sqrt(G[0, 0] / float(self.c)))


EXTERIOR = ZoneCoefficients()


@dataclass(frozen=True)
class CoefficientField:
    """Per-zone coefficients, ``zones[k-1]`` for zone k = 1 (innermost) .. N0."""

    zones: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "zones", tuple(self.zones))

    def for_zone(self, k):
        if k == len(self.zones) + 1:
            return EXTERIOR
        if not 1 <= k <= len(self.zones):
            raise IndexError(f"no zone {k}")
        return self.zones[k - 1]

    def speeds(self):
        """Speeds of constant isotropic zones (innermost first, exterior last)."""
        return [z.isotropic_speed() for z in self.zones] + [1.0]


def transmission_coefficients(speeds):
    """Coefficients of the layered transmission family from zone speeds.

    ``speeds[k-1]`` is the speed in zone k (innermost first); the exterior
    speed is 1.  The family requires v_1 > v_2 > ... > v_N0 > 1.
    """
    v = [float(s) for s in speeds]
    chain = v + [1.0]
    if any(a <= b for a, b in zip(chain[:-1], chain[1:])):
        raise InvalidCoefficients(f"transmission speeds must strictly decrease outward to 1, got {v}")
    return CoefficientField(tuple(ZoneCoefficients.from_speed(s) for s in v))


# --------------------------------------------------------------------------
# layout and control region
# --------------------------------------------------------------------------

@dataclass
class ZoneLayout:
    obstacle: Optional[Shape]
    zones: list = field(default_factory=list)   # outermost first
    measurement_radius: float = 1.0
    box: tuple = (-1.0, 1.0, -1.0, 1.0)
    ball_center: tuple = (0.0, 0.0)

    @property
    def n_zones(self):
        return len(self.zones)

    def zone_shape(self, k):
        """Outer boundary shape of zone k (1 = innermost)."""
        return self.zones[self.n_zones - k]

    def boundary_chain(self):
        """Shapes from the obstacle outward: [K, S_1, ..., S_N0] (K omitted when absent)."""
        chain = [self.zone_shape(k) for k in range(1, self.n_zones + 1)]
        return ([self.obstacle] if self.obstacle is not None else []) + chain

    def validate(self):
        chain = self.boundary_chain()
        for inner, outer in zip(chain[:-1], chain[1:]):
            gap, inside = boundary_gap(outer, inner)
            if not inside or gap <= 0:
                raise InvalidNesting(f"{inner!r} is not strictly inside {outer!r}")
        a = self.measurement_radius
        ball = Disc(self.ball_center, a)
        for sh in chain:
            pts = sh.boundary_points(360)
            if not ball.contains(pts[:, 0], pts[:, 1]).all():
                raise InvalidNesting(f"measurement ball of radius {a} does not contain {sh!r}")
        x0, x1, y0, y1 = self.box
        cx, cy = self.ball_center
        if not (x0 < cx - a and cx + a < x1 and y0 < cy - a and cy + a < y1):
            raise InvalidNesting("box must contain the measurement ball")
        return self

    def zone_of(self, x, y):
        """Zone index at points (0 inside the obstacle, N0 + 1 in the exterior)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        zone = np.full(np.broadcast(x, y).shape, self.n_zones + 1, dtype=int)
        for k in range(self.n_zones, 0, -1):
            zone[self.zone_shape(k).contains(x, y)] = k
        if self.obstacle is not None:
            zone[self.obstacle.contains(x, y)] = 0
        return zone


def coefficient_at(layout: ZoneLayout, coeffs: CoefficientField, x):
    """(c, g) at point x; raises PointInObstacle inside K."""
    px, py = float(x[0]), float(x[1])
    k = int(layout.zone_of(px, py))
    if k == 0:
        raise PointInObstacle(f"point {(px, py)} lies inside the obstacle")
    c, g11, g12, g22 = coeffs.for_zone(k).evaluate(np.array(px), np.array(py))
    return float(c), np.array([[float(g11), float(g12)], [float(g12), float(g22)]])


@dataclass
class ControlRegion:
    """Control region: the part of ``shape`` outside the obstacle, plus collar width delta."""

    shape: Shape
    delta: Optional[float] = None

    def __post_init__(self):
        if self.delta is None:
            self.delta = 0.1 * self.shape.diameter
        if self.delta <= 0:
            raise ValueError("collar width must be positive")
        if isinstance(self.shape, Polygon):
            ang = self.shape.interior_angles()
            tiny = np.deg2rad(5.0)
            if (ang < tiny).any() or (ang > 2 * np.pi - tiny).any():
                raise InvalidNesting("control region has a cusp-like corner")

    def segments(self):
        return self.shape.segments()

    def corners(self):
        return self.shape.corners()

    def segment_tags(self, layout: ZoneLayout, n=64):
        """Per segment: zone index, "obstacle" (lies on the obstacle) or "crossing".

        When the region overlaps the obstacle, part of its effective boundary
        is an arc of the obstacle boundary; that arc gets one extra trailing
        "obstacle" entry.
        """
        tags = []
        for sg in self.segments():
            s = np.linspace(0.0, sg.length, n, endpoint=not sg.closed)
            px, py = sg.point(s)
            z = layout.zone_of(px, py)
            if layout.obstacle is not None:
                on_k = layout.obstacle.distance(px, py) < 1e-9 * max(1.0, self.shape.diameter)
                z = z[(z > 0) & ~on_k]
            if z.size == 0:
                tags.append("obstacle")
                continue
            z = np.unique(z)
            tags.append(int(z[0]) if len(z) == 1 else "crossing")
        if layout.obstacle is not None:
            pts = layout.obstacle.boundary_points(720)
            if self.shape.contains(pts[:, 0], pts[:, 1]).any():
                tags.append("obstacle")
        return tags

    def check_inside(self, layout: ZoneLayout):
        """Collar Omega*_delta must stay in B_a."""
        pts = self.shape.boundary_points(720)
        cx, cy = layout.ball_center
        r = np.hypot(pts[:, 0] - cx, pts[:, 1] - cy)
        if (r + self.delta >= layout.measurement_radius).any():
            raise InvalidNesting("collar of the control region leaves the measurement ball")
        return self


# --------------------------------------------------------------------------
# rasterized field
# --------------------------------------------------------------------------

def _harmonic(a, b):
    s = a + b
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(s > 0, 2 * a * b / np.where(s > 0, s, 1.0), 0.0)


class ZoneIndexField:
    """Rasterized layout: zone indices, node coefficients, face coefficients and masks.

    Arrays have shape (nx, ny) and are indexed [i, j] with x along i.  Face
    arrays: ``gx[i, j]`` couples nodes (i-1, j) and (i, j) (i = 0 and i = nx
    are wall faces); ``gy`` likewise along y.
    """

    def __init__(self, layout, coeffs, grid, region=None):
        self.layout = layout
        self.coeffs = coeffs
        self.grid = grid
        self.region = region
        self.h = grid.h
        X, Y = grid.mesh()
        self.X, self.Y = X, Y
        self.zone = layout.zone_of(X, Y)
        self.obstacle = self.zone == 0
        self.fluid = ~self.obstacle
        nb = np.zeros_like(self.obstacle)
        f = self.fluid
        nb[1:, :] |= f[:-1, :]
        nb[:-1, :] |= f[1:, :]
        nb[:, 1:] |= f[:, :-1]
        nb[:, :-1] |= f[:, 1:]
        self.obstacle_boundary = self.obstacle & nb
        cx, cy = layout.ball_center
        self.ball = self.fluid & (np.hypot(X - cx, Y - cy) < layout.measurement_radius)

        c = np.ones(X.shape)
        g11 = np.ones(X.shape)
        g12 = np.zeros(X.shape)
        g22 = np.ones(X.shape)
        for k in range(1, layout.n_zones + 2):
            sel = self.zone == k
            if not sel.any():
                continue
            ck, a, b, d = coeffs.for_zone(k).evaluate(X[sel], Y[sel])
            c[sel], g11[sel], g12[sel], g22[sel] = ck, a, b, d
        if (c[self.fluid] <= 0).any():
            raise InvalidCoefficients("speed weight c must be positive")
        det = g11 * g22 - g12 ** 2
        if ((g11 <= 0) | (det <= 0))[self.fluid].any():
            raise InvalidCoefficients("metric g must be positive definite")
        for arr in (g11, g12, g22):
            arr[self.obstacle] = 0.0
        c[self.obstacle] = 1.0
        self.c, self.g11, self.g12, self.g22 = c, g11, g12, g22
        self._cache = {}
        self._gx, self._gy = self._faces()
        if region is not None:
            self._rasterize_region(region)

    # faces ---------------------------------------------------------------
    def _faces(self):
        nx, ny = self.grid.shape
        f = self.fluid
        gx = np.zeros((nx + 1, ny))
        gy = np.zeros((nx, ny + 1))
        a, b = self.g11[:-1, :], self.g11[1:, :]
        fa, fb = f[:-1, :], f[1:, :]
        gx[1:-1, :] = np.where(fa & fb, _harmonic(a, b), np.where(fa, a, np.where(fb, b, 0.0)))
        gx[0, :] = np.where(f[0, :], self.g11[0, :], 0.0)
        gx[-1, :] = np.where(f[-1, :], self.g11[-1, :], 0.0)
        a, b = self.g22[:, :-1], self.g22[:, 1:]
        fa, fb = f[:, :-1], f[:, 1:]
        gy[:, 1:-1] = np.where(fa & fb, _harmonic(a, b), np.where(fa, a, np.where(fb, b, 0.0)))
        gy[:, 0] = np.where(f[:, 0], self.g22[:, 0], 0.0)
        gy[:, -1] = np.where(f[:, -1], self.g22[:, -1], 0.0)
        return gx, gy

    def faces(self, obstacle_bc="dirichlet"):
        """Face coefficients; Neumann obstacles get zero flux through obstacle faces."""
        if obstacle_bc == "dirichlet":
            return self._gx, self._gy
        if obstacle_bc != "neumann":
            raise ValueError(f"unknown obstacle condition {obstacle_bc!r}")
        key = ("faces", "neumann")
        if key not in self._cache:
            f = self.fluid
            gx, gy = self._gx.copy(), self._gy.copy()
            gx[1:-1, :][~(f[:-1, :] & f[1:, :])] = 0.0
            gy[:, 1:-1][~(f[:, :-1] & f[:, 1:])] = 0.0
            self._cache[key] = (gx, gy)
        return self._cache[key]

    def dual_g12(self):
        """Cross-term coefficient on dual cells whose four nodes are fluid (else 0)."""
        f = self.fluid
        all4 = f[:-1, :-1] & f[1:, :-1] & f[:-1, 1:] & f[1:, 1:]
        g = 0.25 * (self.g12[:-1, :-1] + self.g12[1:, :-1] + self.g12[:-1, 1:] + self.g12[1:, 1:])
        return np.where(all4, g, 0.0)

    # region --------------------------------------------------------------
    def _rasterize_region(self, region):
        sd = region.shape.signed_distance(self.X, self.Y)
        self.star_distance = sd
        self.star = self.fluid & (sd < 0)
        self.collar = self.fluid & (sd < region.delta)
        if not self.star.any():
            raise UnresolvedGeometry("control region contains no fluid nodes")
        if (self.collar & ~self.ball).any():
            raise InvalidNesting("collar of the control region leaves the measurement ball")

    def coefficient_at(self, x):
        return coefficient_at(self.layout, self.coeffs, x)

    def zone_area(self, k):
        return float((self.zone == k).sum()) * self.h ** 2

    def max_speed(self):
        """max over fluid nodes of sqrt(lambda_max(g) / c)."""
        tr = self.g11 + self.g22
        disc = np.sqrt(np.maximum((self.g11 - self.g22) ** 2 + 4 * self.g12 ** 2, 0.0))
        lam = 0.5 * (tr + disc)
        return float(np.sqrt(lam[self.fluid] / self.c[self.fluid]).max())

    def speed_field(self):
        tr = self.g11 + self.g22
        disc = np.sqrt(np.maximum((self.g11 - self.g22) ** 2 + 4 * self.g12 ** 2, 0.0))
        return np.where(self.fluid, np.sqrt(0.5 * (tr + disc) / self.c), 0.0)


ZoneMap = ZoneIndexField


def build_zone_map(layout: ZoneLayout, coeffs: CoefficientField, grid_spacing: float, region=None):
    """Rasterize layout and coefficients on a grid of the given spacing."""
    layout.validate()
    if len(coeffs.zones) != layout.n_zones:
        raise InvalidCoefficients(
            f"{layout.n_zones} zone shapes but {len(coeffs.zones)} coefficient entries")
    h = float(grid_spacing)
    chain = layout.boundary_chain()
    for inner, outer in zip(chain[:-1], chain[1:]):
        gap, _ = boundary_gap(outer, inner)
        if gap < MIN_GAP_CELLS * h:
            raise UnresolvedGeometry(
                f"gap {gap:.4g} between {inner!r} and {outer!r} is under {MIN_GAP_CELLS} cells of {h}")
    if region is not None:
        region.check_inside(layout)
    return ZoneIndexField(layout, coeffs, Grid(layout.box, h), region)


def smoothstep5(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (10.0 + t * (-15.0 + 6.0 * t))


def cutoff_field(region: ControlRegion, inner_fraction, outer_fraction, grid: Grid, signed_distance=None):
    """Smooth cutoff: 1 within inner_fraction*delta of Omega*, 0 beyond outer_fraction*delta."""
    if not 0.0 <= inner_fraction < outer_fraction <= 1.0:
        raise ValueError("need 0 <= inner_fraction < outer_fraction <= 1")
    band = (outer_fraction - inner_fraction) * region.delta
    if band < MIN_BAND_CELLS * grid.h:
        raise DegenerateCollar(f"cutoff band {band:.4g} is thinner than {MIN_BAND_CELLS} cells")
    if signed_distance is None:
        X, Y = grid.mesh()
        signed_distance = region.shape.signed_distance(X, Y)
    return 1.0 - smoothstep5((signed_distance - inner_fraction * region.delta) / band)
