"""Closed planar shapes: inside tests, signed distance, boundary segments, ray hits.

Shapes are discs, ellipses, polygons and unions of those (the union is only
meant for obstacles made of several disjoint pieces).  Every shape exposes
its boundary as a list of smooth segments; signed distance is the brute-force
minimum over those segments, negative inside.
"""
from __future__ import annotations

import numpy as np

_CHUNK = 4096


def _as_xy(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x, y = np.broadcast_arrays(x, y)
    return x, y


# --------------------------------------------------------------------------
# boundary segments
# --------------------------------------------------------------------------

class Segment:
    """Smooth piece of a boundary, parametrized by arclength s in [0, length]."""

    closed = False
    length = 0.0

    def project(self, x, y):
        """Nearest boundary point: returns (s, distance, nu_x, nu_y) with nu the outward normal."""
        raise NotImplementedError

    def point(self, s):
        raise NotImplementedError

    def corners(self):
        """End points of an open segment (possible corners); empty for closed curves."""
        return []


class LineSegment(Segment):
    def __init__(self, p0, p1, normal):
        self.p0 = np.asarray(p0, dtype=float)
        self.p1 = np.asarray(p1, dtype=float)
        d = self.p1 - self.p0
        self.length = float(np.hypot(*d))
        self.tangent = d / self.length
        self.normal = np.asarray(normal, dtype=float)

    def project(self, x, y):
        x, y = _as_xy(x, y)
        rx, ry = x - self.p0[0], y - self.p0[1]
        s = np.clip(rx * self.tangent[0] + ry * self.tangent[1], 0.0, self.length)
        qx = self.p0[0] + s * self.tangent[0]
        qy = self.p0[1] + s * self.tangent[1]
        dist = np.hypot(x - qx, y - qy)
        nx = np.full_like(s, self.normal[0])
        ny = np.full_like(s, self.normal[1])
        return s, dist, nx, ny

    def point(self, s):
        s = np.asarray(s, dtype=float)
        return (self.p0[0] + s * self.tangent[0], self.p0[1] + s * self.tangent[1])

    def corners(self):
        return [self.p0, self.p1]


class CircleCurve(Segment):
    closed = True

    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.length = 2 * np.pi * self.radius

    def project(self, x, y):
        x, y = _as_xy(x, y)
        rx, ry = x - self.center[0], y - self.center[1]
        r = np.hypot(rx, ry)
        theta = np.mod(np.arctan2(ry, rx), 2 * np.pi)
        safe = np.where(r > 0, r, 1.0)
        nx = np.where(r > 0, rx / safe, 1.0)
        ny = np.where(r > 0, ry / safe, 0.0)
        return theta * self.radius, np.abs(r - self.radius), nx, ny

    def point(self, s):
        th = np.asarray(s, dtype=float) / self.radius
        return (self.center[0] + self.radius * np.cos(th), self.center[1] + self.radius * np.sin(th))


class EllipseCurve(Segment):
    """Ellipse boundary; projection uses a fine polyline, normals are analytic."""

    closed = True

    def __init__(self, ellipse, n=1024):
        self.ellipse = ellipse
        th = np.linspace(0.0, 2 * np.pi, n + 1)
        px, py = ellipse.param_point(th)
        self._px, self._py = px, py
        seg = np.hypot(np.diff(px), np.diff(py))
        self._s0 = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(self._s0[-1])

    def project(self, x, y):
        x, y = _as_xy(x, y)
        shape = x.shape
        xf, yf = x.ravel(), y.ravel()
        ax, ay = self._px[:-1], self._py[:-1]
        dx, dy = np.diff(self._px), np.diff(self._py)
        L2 = dx * dx + dy * dy
        s_out = np.empty(xf.size)
        d_out = np.empty(xf.size)
        qx_out = np.empty(xf.size)
        qy_out = np.empty(xf.size)
        for lo in range(0, xf.size, _CHUNK // 4):
            hi = min(lo + _CHUNK // 4, xf.size)
            rx = xf[lo:hi, None] - ax[None, :]
            ry = yf[lo:hi, None] - ay[None, :]
            tt = np.clip((rx * dx + ry * dy) / L2, 0.0, 1.0)
            ex = rx - tt * dx
            ey = ry - tt * dy
            d2 = ex * ex + ey * ey
            k = np.argmin(d2, axis=1)
            rows = np.arange(hi - lo)
            t_k = tt[rows, k]
            d_out[lo:hi] = np.sqrt(d2[rows, k])
            s_out[lo:hi] = self._s0[k] + t_k * np.sqrt(L2[k])
            qx_out[lo:hi] = ax[k] + t_k * dx[k]
            qy_out[lo:hi] = ay[k] + t_k * dy[k]
        nx, ny = self.ellipse.normal_at(qx_out, qy_out)
        return (s_out.reshape(shape), d_out.reshape(shape), nx.reshape(shape), ny.reshape(shape))

    def point(self, s):
        s = np.asarray(s, dtype=float)
        return (np.interp(s, self._s0, self._px), np.interp(s, self._s0, self._py))


# --------------------------------------------------------------------------
# shapes
# --------------------------------------------------------------------------

class Shape:
    kind = "shape"

    def contains(self, x, y):
        raise NotImplementedError

    def segments(self):
        raise NotImplementedError

    def intersect_ray(self, p, d):
        """All crossings of the line p + t d (t > 0): list of (t, outward normal)."""
        raise NotImplementedError

    def bbox(self):
        raise NotImplementedError

    def boundary_points(self, n=400):
        pts = []
        segs = self.segments()
        total = sum(sg.length for sg in segs)
        for sg in segs:
            m = max(8, int(np.ceil(n * sg.length / total)))
            s = np.linspace(0.0, sg.length, m, endpoint=not sg.closed)
            pts.append(np.stack(sg.point(s), axis=-1))
        return np.concatenate(pts)

    @property
    def centroid(self):
        pts = self.boundary_points(512)
        return pts.mean(axis=0)

    @property
    def diameter(self):
        pts = self.boundary_points(256)
        diff = pts[:, None, :] - pts[None, :, :]
        return float(np.sqrt((diff ** 2).sum(-1)).max())

    def project(self, x, y):
        """Nearest-segment projection: (segment index, s, distance, nu_x, nu_y)."""
        x, y = _as_xy(x, y)
        best = None
        for k, sg in enumerate(self.segments()):
            s, dist, nx, ny = sg.project(x, y)
            if best is None:
                best = [np.zeros(x.shape, dtype=int), s, dist, nx, ny]
                continue
            closer = dist < best[2]
            best[0] = np.where(closer, k, best[0])
            best[1] = np.where(closer, s, best[1])
            best[2] = np.where(closer, dist, best[2])
            best[3] = np.where(closer, nx, best[3])
            best[4] = np.where(closer, ny, best[4])
        return tuple(best)

    def distance(self, x, y):
        x, y = _as_xy(x, y)
        return self.project(x, y)[2]

    def signed_distance(self, x, y):
        x, y = _as_xy(x, y)
        d = self.distance(x, y)
        return np.where(self.contains(x, y), -d, d)

    def corners(self):
        pts = []
        for sg in self.segments():
            pts.extend(sg.corners())
        if not pts:
            return np.zeros((0, 2))
        return np.unique(np.round(np.array(pts), 12), axis=0)

    def first_hit(self, p, d, eps=1e-12):
        hits = [(t, n) for t, n in self.intersect_ray(p, d) if t > eps]
        if not hits:
            return None
        return min(hits, key=lambda h: h[0])


class Disc(Shape):
    kind = "disc"

    def __init__(self, center=(0.0, 0.0), radius=1.0):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        if self.radius <= 0:
            raise ValueError("disc radius must be positive")
        self._segs = [CircleCurve(self.center, self.radius)]

    def contains(self, x, y):
        x, y = _as_xy(x, y)
        return np.hypot(x - self.center[0], y - self.center[1]) < self.radius

    def signed_distance(self, x, y):
        x, y = _as_xy(x, y)
        return np.hypot(x - self.center[0], y - self.center[1]) - self.radius

    def segments(self):
        return self._segs

    def bbox(self):
        c, r = self.center, self.radius
        return (c[0] - r, c[0] + r, c[1] - r, c[1] + r)

    @property
    def centroid(self):
        return self.center.copy()

    @property
    def diameter(self):
        return 2 * self.radius

    def intersect_ray(self, p, d):
        p = np.asarray(p, float) - self.center
        d = np.asarray(d, float)
        b = p @ d
        c = p @ p - self.radius ** 2
        disc = b * b - c
        if disc < 0:
            return []
        sq = np.sqrt(disc)
        out = []
        for t in (-b - sq, -b + sq):
            q = p + t * d
            out.append((float(t), q / self.radius))
        return out

    def __repr__(self):
        return f"Disc(center={tuple(self.center)}, radius={self.radius})"


class Ellipse(Shape):
    kind = "ellipse"

    def __init__(self, center=(0.0, 0.0), semi_axes=(1.0, 1.0), angle=0.0):
        self.center = np.asarray(center, dtype=float)
        self.a, self.b = (float(v) for v in semi_axes)
        if self.a <= 0 or self.b <= 0:
            raise ValueError("ellipse semi-axes must be positive")
        self.angle = float(angle)
        self._cos, self._sin = np.cos(self.angle), np.sin(self.angle)
        self._segs = [EllipseCurve(self)]

    def _local(self, x, y):
        rx, ry = x - self.center[0], y - self.center[1]
        return self._cos * rx + self._sin * ry, -self._sin * rx + self._cos * ry

    def param_point(self, th):
        lx, ly = self.a * np.cos(th), self.b * np.sin(th)
        return (self.center[0] + self._cos * lx - self._sin * ly,
                self.center[1] + self._sin * lx + self._cos * ly)

    def normal_at(self, x, y):
        lx, ly = self._local(np.asarray(x, float), np.asarray(y, float))
        gx, gy = lx / self.a ** 2, ly / self.b ** 2
        nx = self._cos * gx - self._sin * gy
        ny = self._sin * gx + self._cos * gy
        nrm = np.hypot(nx, ny)
        nrm = np.where(nrm > 0, nrm, 1.0)
        return nx / nrm, ny / nrm

    def contains(self, x, y):
        x, y = _as_xy(x, y)
        lx, ly = self._local(x, y)
        return (lx / self.a) ** 2 + (ly / self.b) ** 2 < 1.0

    def segments(self):
        return self._segs

    def bbox(self):
        hx = np.hypot(self.a * self._cos, self.b * self._sin)
        hy = np.hypot(self.a * self._sin, self.b * self._cos)
        return (self.center[0] - hx, self.center[0] + hx, self.center[1] - hy, self.center[1] + hy)

    @property
    def centroid(self):
        return self.center.copy()

    def intersect_ray(self, p, d):
        p = np.asarray(p, float)
        d = np.asarray(d, float)
        lx, ly = self._local(p[0], p[1])
        dx = self._cos * d[0] + self._sin * d[1]
        dy = -self._sin * d[0] + self._cos * d[1]
        # scale to the unit circle
        px, py, ex, ey = lx / self.a, ly / self.b, dx / self.a, dy / self.b
        A = ex * ex + ey * ey
        B = px * ex + py * ey
        C = px * px + py * py - 1.0
        disc = B * B - A * C
        if disc < 0:
            return []
        sq = np.sqrt(disc)
        out = []
        for t in ((-B - sq) / A, (-B + sq) / A):
            q = p + t * d
            nx, ny = self.normal_at(q[0], q[1])
            out.append((float(t), np.array([float(nx), float(ny)])))
        return out

    def __repr__(self):
        return f"Ellipse(center={tuple(self.center)}, semi_axes=({self.a}, {self.b}), angle={self.angle})"


class Polygon(Shape):
    kind = "polygon"

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ValueError("polygon needs at least three (x, y) vertices")
        area = 0.5 * np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        if abs(area) < 1e-14:
            raise ValueError("degenerate polygon")
        if area < 0:
            v = v[::-1].copy()
        self.vertices = v
        self._segs = []
        for k in range(len(v)):
            a, b = v[k], v[(k + 1) % len(v)]
            t = (b - a) / np.hypot(*(b - a))
            self._segs.append(LineSegment(a, b, (t[1], -t[0])))
        self._check_simple()

    def _check_simple(self):
        n = len(self.vertices)
        for i in range(n):
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue
                if _segments_cross(self.vertices[i], self.vertices[(i + 1) % n],
                                   self.vertices[j], self.vertices[(j + 1) % n]):
                    raise ValueError("self-intersecting polygon")

    def contains(self, x, y):
        x, y = _as_xy(x, y)
        inside = np.zeros(x.shape, dtype=bool)
        v = self.vertices
        n = len(v)
        for k in range(n):
            (x0, y0), (x1, y1) = v[k], v[(k + 1) % n]
            cond = (y0 > y) != (y1 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            inside ^= cond & (x < xc)
        return inside

    def segments(self):
        return self._segs

    def bbox(self):
        v = self.vertices
        return (v[:, 0].min(), v[:, 0].max(), v[:, 1].min(), v[:, 1].max())

    @property
    def centroid(self):
        v = self.vertices
        x, y = v[:, 0], v[:, 1]
        xs, ys = np.roll(x, -1), np.roll(y, -1)
        cross = x * ys - xs * y
        a = cross.sum() / 2
        return np.array([((x + xs) * cross).sum() / (6 * a), ((y + ys) * cross).sum() / (6 * a)])

    @property
    def diameter(self):
        v = self.vertices
        diff = v[:, None, :] - v[None, :, :]
        return float(np.sqrt((diff ** 2).sum(-1)).max())

    def interior_angles(self):
        v = self.vertices
        out = []
        n = len(v)
        for k in range(n):
            a = v[k - 1] - v[k]
            b = v[(k + 1) % n] - v[k]
            ang = np.arctan2(a[0] * b[1] - a[1] * b[0], a @ b)
            # counter-clockwise polygon: the interior angle is measured from b to a
            out.append(float(np.mod(-ang, 2 * np.pi)))
        return np.array(out)

    def intersect_ray(self, p, d):
        p = np.asarray(p, float)
        d = np.asarray(d, float)
        out = []
        for sg in self._segs:
            e = sg.p1 - sg.p0
            den = d[0] * (-e[1]) - d[1] * (-e[0])
            if abs(den) < 1e-15:
                continue
            r = sg.p0 - p
            t = (r[0] * (-e[1]) - r[1] * (-e[0])) / den
            u = (d[0] * r[1] - d[1] * r[0]) / den
            if -1e-12 <= u <= 1 + 1e-12:
                out.append((float(t), sg.normal.copy()))
        return out

    def __repr__(self):
        return f"Polygon({self.vertices.tolist()})"


def rectangle(center, width, height):
    cx, cy = center
    w, h = width / 2, height / 2
    return Polygon([(cx - w, cy - h), (cx + w, cy - h), (cx + w, cy + h), (cx - w, cy + h)])


class Union(Shape):
    """Disjoint union of shapes (multi-piece obstacles)."""

    kind = "union"

    def __init__(self, parts):
        self.parts = list(parts)
        if not self.parts:
            raise ValueError("empty union")

    def contains(self, x, y):
        x, y = _as_xy(x, y)
        out = np.zeros(x.shape, dtype=bool)
        for p in self.parts:
            out |= p.contains(x, y)
        return out

    def signed_distance(self, x, y):
        return np.min([p.signed_distance(x, y) for p in self.parts], axis=0)

    def segments(self):
        return [sg for p in self.parts for sg in p.segments()]

    def bbox(self):
        b = np.array([p.bbox() for p in self.parts])
        return (b[:, 0].min(), b[:, 1].max(), b[:, 2].min(), b[:, 3].max())

    def intersect_ray(self, p, d):
        return [h for part in self.parts for h in part.intersect_ray(p, d)]

    def __repr__(self):
        return f"Union({self.parts!r})"


def _segments_cross(a, b, c, d):
    def orient(p, q, r):
        return np.sign((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]))
    return (orient(a, b, c) * orient(a, b, d) < 0) and (orient(c, d, a) * orient(c, d, b) < 0)


def boundary_gap(outer: Shape, inner: Shape, n=720):
    """Smallest distance from inner's boundary to outer's boundary, and whether inner sits inside outer."""
    pts = inner.boundary_points(n)
    inside = outer.contains(pts[:, 0], pts[:, 1])
    gap = float(outer.distance(pts[:, 0], pts[:, 1]).min())
    return gap, bool(inside.all())


def shape_from_dict(d):
    """Build a shape from a plain mapping (the config-file representation)."""
    kind = d.get("kind", d.get("type"))
    if kind == "disc":
        return Disc(d.get("center", (0.0, 0.0)), d["radius"])
    if kind == "ellipse":
        return Ellipse(d.get("center", (0.0, 0.0)), d["semi_axes"], np.deg2rad(d.get("angle_deg", 0.0)))
    if kind == "polygon":
        return Polygon(d["vertices"])
    if kind == "rectangle":
        return rectangle(d.get("center", (0.0, 0.0)), d["width"], d["height"])
    if kind == "union":
        return Union([shape_from_dict(p) for p in d["parts"]])
    raise ValueError(f"unknown shape kind {kind!r}")
