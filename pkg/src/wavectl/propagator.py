"""Leapfrog solver for u_tt + P u = 0 with P = -c^{-1} div(g grad).

The spatial operator is the sparse matrix A = M^{-1} K where K is the
symmetric stiffness of the face-based energy and M = h^2 diag(c).  Time
stepping is velocity Verlet (kick-drift-kick), which is symmetric, hence
exactly reversible, and conserves the modified energy

    v'Mv + u'Ku - (dt^2/4) (Ku)' M^{-1} (Ku).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .domain import ZoneIndexField, ZoneLayout, CoefficientField
from .errors import (BoxContaminationWarning, CflViolation, InvalidCoefficients,
                     TooLargeForOracle)

ORACLE_MAX_UNKNOWNS = 2500


@dataclass(frozen=True)
class ExactBox:
    pass


@dataclass(frozen=True)
class SpongeLayer:
    width: float
    strength: float


@dataclass
class SolverConfig:
    grid_spacing: float
    time_step: Optional[float] = None      # None: cfl_safety * stability limit
    horizon: float = 1.0
    obstacle_bc: str = "dirichlet"
    truncation: object = field(default_factory=ExactBox)
    cfl_safety: float = 0.9

    def __post_init__(self):
        if self.obstacle_bc not in ("dirichlet", "neumann"):
            raise ValueError(f"obstacle_bc must be dirichlet or neumann, got {self.obstacle_bc!r}")
        if not 0.0 < self.cfl_safety <= 1.0:
            raise ValueError("cfl_safety must lie in (0, 1]")


@dataclass
class State:
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0

    @classmethod
    def zeros(cls, shape, t=0.0):
        return cls(np.zeros(shape), np.zeros(shape), t)

    def copy(self):
        return State(self.u.copy(), self.v.copy(), self.t)

    def __add__(self, other):
        return State(self.u + other.u, self.v + other.v, self.t)

    def __sub__(self, other):
        return State(self.u - other.u, self.v - other.v, self.t)

    def scaled(self, a):
        return State(a * self.u, a * self.v, self.t)


@dataclass
class SolutionHistory:
    """Recorded u on a fixed node subset at every step, plus optional snapshots."""

    times: np.ndarray
    slab_nodes: np.ndarray            # flat node indices
    slab_u: np.ndarray                # (n_steps + 1, n_nodes)
    snapshots: list = field(default_factory=list)   # (t, u, v)

    @property
    def dt(self):
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def reversed(self):
        return SolutionHistory(self.times[::-1].copy(), self.slab_nodes, self.slab_u[::-1].copy(),
                               self.snapshots[::-1])


# --------------------------------------------------------------------------
# operator assembly
# --------------------------------------------------------------------------

def _difference_matrices(zone_map: ZoneIndexField):
    nx, ny = zone_map.grid.shape
    fluid = zone_map.fluid.ravel()
    idx = np.arange(nx * ny).reshape(nx, ny)

    def build(n_faces, plus, minus):
        rows, cols, vals = [], [], []
        for sign, (frow, node) in ((1.0, plus), (-1.0, minus)):
            keep = fluid[node]
            rows.append(frow[keep])
            cols.append(node[keep])
            vals.append(np.full(keep.sum(), sign))
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n_faces, nx * ny))

    fx = np.arange((nx + 1) * ny).reshape(nx + 1, ny)
    Dx = build((nx + 1) * ny, (fx[:-1, :].ravel(), idx.ravel()), (fx[1:, :].ravel(), idx.ravel()))
    fy = np.arange(nx * (ny + 1)).reshape(nx, ny + 1)
    Dy = build(nx * (ny + 1), (fy[:, :-1].ravel(), idx.ravel()), (fy[:, 1:].ravel(), idx.ravel()))
    return Dx, Dy


def _cross_matrices(zone_map: ZoneIndexField):
    """Dual-cell sums of x and y differences, rows = dual cells (nx-1)(ny-1)."""
    nx, ny = zone_map.grid.shape
    idx = np.arange(nx * ny).reshape(nx, ny)
    a, b, c, d = idx[:-1, :-1], idx[1:, :-1], idx[:-1, 1:], idx[1:, 1:]
    nd = (nx - 1) * (ny - 1)
    r = np.arange(nd)
    rows = np.concatenate([r] * 4)
    Sx = sp.csr_matrix((np.concatenate([-np.ones(nd), np.ones(nd), -np.ones(nd), np.ones(nd)]),
                        (rows, np.concatenate([a.ravel(), b.ravel(), c.ravel(), d.ravel()]))),
                       shape=(nd, nx * ny))
    Sy = sp.csr_matrix((np.concatenate([-np.ones(nd), -np.ones(nd), np.ones(nd), np.ones(nd)]),
                        (rows, np.concatenate([a.ravel(), b.ravel(), c.ravel(), d.ravel()]))),
                       shape=(nd, nx * ny))
    return Sx, Sy


def stiffness(zone_map: ZoneIndexField, obstacle_bc="dirichlet"):
    """Symmetric stiffness K on all nodes (rows/columns of obstacle nodes are empty)."""
    key = ("K", obstacle_bc)
    if key in zone_map._cache:
        return zone_map._cache[key]
    gx, gy = zone_map.faces(obstacle_bc)
    Dx, Dy = _difference_matrices(zone_map)
    K = Dx.T @ sp.diags(gx.ravel()) @ Dx + Dy.T @ sp.diags(gy.ravel()) @ Dy
    g12 = zone_map.dual_g12()
    if np.any(g12 != 0):
        gxmin = np.minimum(gx[1:-1, :-1], gx[1:-1, 1:])
        gymin = np.minimum(gy[:-1, 1:-1], gy[1:, 1:-1])
        bad = (g12 != 0) & (g12 ** 2 >= gxmin * gymin)
        if bad.any():
            raise InvalidCoefficients("off-diagonal metric too strong for the discrete stencil "
                                      "(need g12^2 < g11*g22 face-wise)")
        Sx, Sy = _cross_matrices(zone_map)
        W = sp.diags(g12.ravel() / 4.0)
        K = K + Sx.T @ W @ Sy + Sy.T @ W @ Sx
    K = sp.csr_matrix(K)
    K.eliminate_zeros()
    zone_map._cache[key] = K
    return K


def mass_diagonal(zone_map: ZoneIndexField):
    """Lumped mass h^2 c on fluid nodes, 0 on obstacle nodes."""
    return np.where(zone_map.fluid, zone_map.h ** 2 * zone_map.c, 0.0).ravel()


def acceleration_operator(zone_map: ZoneIndexField, obstacle_bc="dirichlet"):
    key = ("A", obstacle_bc)
    if key not in zone_map._cache:
        m = mass_diagonal(zone_map)
        minv = np.where(m > 0, 1.0 / np.where(m > 0, m, 1.0), 0.0)
        zone_map._cache[key] = sp.csr_matrix(sp.diags(minv) @ stiffness(zone_map, obstacle_bc))
    return zone_map._cache[key]


def cfl_limit(zone_map: ZoneIndexField, obstacle_bc="dirichlet"):
    """Leapfrog stability limit 2 / sqrt(lambda_max(A)), with lambda_max bounded by Gershgorin.

    For constant isotropic media this is h / (sqrt(2) v).
    """
    key = ("cfl", obstacle_bc)
    if key not in zone_map._cache:
        A = acceleration_operator(zone_map, obstacle_bc)
        lam = float(np.asarray(abs(A).sum(axis=1)).max())
        zone_map._cache[key] = 2.0 / math.sqrt(lam)
    return zone_map._cache[key]


def resolve_time_step(config: SolverConfig, zone_map: ZoneIndexField):
    limit = cfl_limit(zone_map, config.obstacle_bc)
    if config.time_step is None:
        return config.cfl_safety * limit
    if config.time_step <= 0:
        raise CflViolation("time step must be positive")
    if config.time_step > config.cfl_safety * limit * (1 + 1e-12):
        raise CflViolation(f"time step {config.time_step:.6g} exceeds cfl_safety * limit = "
                           f"{config.cfl_safety:.3g} * {limit:.6g}")
    return float(config.time_step)


# --------------------------------------------------------------------------
# horizon bookkeeping
# --------------------------------------------------------------------------

def support_mask(state: State, rel=1e-12):
    amp = np.abs(state.u) + np.abs(state.v)
    m = amp.max()
    return amp > rel * m if m > 0 else np.zeros(amp.shape, dtype=bool)


def _band_speed(zone_map, dist):
    wd = zone_map.grid.wall_distance()
    sel = zone_map.fluid & (wd <= dist + 1e-12)
    if not sel.any():
        return zone_map.max_speed()
    return float(zone_map.speed_field()[sel].max())


def clean_horizon(zone_map: ZoneIndexField, source_mask, target_mask=None):
    """Time before a wall reflection from source_mask can re-enter target_mask.

    A path from the source to the wall only visits nodes no farther from the
    wall than the source, so each leg uses the largest speed in that band.
    """
    wd = zone_map.grid.wall_distance()
    if not np.any(source_mask):
        return math.inf
    d1 = float(wd[source_mask].min())
    t = d1 / _band_speed(zone_map, d1)
    if target_mask is None:
        return t
    d2 = float(wd[target_mask].min())
    return t + d2 / _band_speed(zone_map, d2)


# --------------------------------------------------------------------------
# time stepping
# --------------------------------------------------------------------------

def _sponge_profile(zone_map, sponge: SpongeLayer):
    wd = zone_map.grid.wall_distance()
    s = np.clip((sponge.width - wd) / sponge.width, 0.0, 1.0)
    return (sponge.strength * s ** 2).ravel()


def step_count(t0, t1, dt):
    n = max(1, int(math.ceil((t1 - t0) / dt - 1e-9)))
    return n, (t1 - t0) / n


def evolve(state: State, t0, t1, config: SolverConfig, zone_map: ZoneIndexField,
           record=None, snapshot_every=None, warn=True):
    """Advance state from t0 to t1.

    record: flat node indices whose u is stored after every step.
    snapshot_every: store full (u, v) every that many steps (and at the end).
    """
    if t1 <= t0:
        raise ValueError("evolve needs t1 > t0")
    dt = resolve_time_step(config, zone_map)
    n, d = step_count(t0, t1, dt)
    A = acceleration_operator(zone_map, config.obstacle_bc)
    fluid = zone_map.fluid.ravel()
    u = np.where(fluid, state.u.ravel(), 0.0)
    v = np.where(fluid, state.v.ravel(), 0.0)
    shape = zone_map.grid.shape

    if isinstance(config.truncation, ExactBox) and warn:
        src = support_mask(state)
        if src.any() and (t1 - t0) > clean_horizon(zone_map, src):
            warnings.warn(f"wavefront reaches the box wall before t = {t1:.4g}", BoxContaminationWarning,
                          stacklevel=2)
    damp = None
    if isinstance(config.truncation, SpongeLayer):
        damp = np.exp(-0.5 * d * _sponge_profile(zone_map, config.truncation))

    rec = None if record is None else np.asarray(record, dtype=int)
    slab = None
    if rec is not None:
        slab = np.empty((n + 1, rec.size))
        slab[0] = u[rec]
    snaps = []
    if snapshot_every:
        snaps.append((t0, u.reshape(shape).copy(), v.reshape(shape).copy()))

    a = -(A @ u)
    half = 0.5 * d
    for k in range(1, n + 1):
        if damp is not None:
            v *= damp
        v += half * a
        u += d * v
        a = -(A @ u)
        v += half * a
        if damp is not None:
            v *= damp
        if slab is not None:
            slab[k] = u[rec]
        if snapshot_every and (k % snapshot_every == 0 or k == n):
            snaps.append((t0 + k * d, u.reshape(shape).copy(), v.reshape(shape).copy()))
    out = State(u.reshape(shape), v.reshape(shape), t1)
    times = t0 + d * np.arange(n + 1)
    hist = SolutionHistory(times, rec if rec is not None else np.zeros(0, dtype=int),
                           slab if slab is not None else np.zeros((n + 1, 0)), snaps)
    return out, hist


def evolve_backward(terminal: State, T, config: SolverConfig, zone_map: ZoneIndexField, record=None,
                    snapshot_every=None, warn=True):
    """Adjoint flow: negate velocity, evolve forward for T, negate again."""
    if isinstance(config.truncation, SpongeLayer):
        raise ValueError("backward evolution needs a conservative truncation (ExactBox)")
    t_end = terminal.t
    flipped = State(terminal.u, -terminal.v, 0.0)
    out, hist = evolve(flipped, 0.0, T, config, zone_map, record=record, snapshot_every=snapshot_every,
                       warn=warn)
    hist.times = t_end - hist.times
    hist.snapshots = [(t_end - t, u, -v) for (t, u, v) in hist.snapshots]
    return State(out.u, -out.v, t_end - T), hist


# --------------------------------------------------------------------------
# energy
# --------------------------------------------------------------------------

def _face_masks(zone_map: ZoneIndexField, mask):
    """Faces counted for a mask: both ends in mask, or one in mask and the other a Dirichlet node."""
    nx, ny = zone_map.grid.shape
    dirichlet_node = zone_map.obstacle
    mx = np.zeros((nx + 1, ny), dtype=bool)
    my = np.zeros((nx, ny + 1), dtype=bool)
    L, R = mask[:-1, :], mask[1:, :]
    dL, dR = dirichlet_node[:-1, :], dirichlet_node[1:, :]
    mx[1:-1, :] = (L & R) | (L & dR) | (R & dL)
    mx[0, :] = mask[0, :]
    mx[-1, :] = mask[-1, :]
    B, T = mask[:, :-1], mask[:, 1:]
    dB, dT = dirichlet_node[:, :-1], dirichlet_node[:, 1:]
    my[:, 1:-1] = (B & T) | (B & dT) | (T & dB)
    my[:, 0] = mask[:, 0]
    my[:, -1] = mask[:, -1]
    return mx, my


def potential_energy(u, zone_map: ZoneIndexField, mask=None, obstacle_bc="dirichlet"):
    u = np.where(zone_map.fluid, u, 0.0)
    gx, gy = zone_map.faces(obstacle_bc)
    nx, ny = zone_map.grid.shape
    up = np.zeros((nx + 2, ny + 2))
    up[1:-1, 1:-1] = u
    dx = np.diff(up[:, 1:-1], axis=0)
    dy = np.diff(up[1:-1, :], axis=1)
    if mask is None:
        mask = zone_map.fluid
    mask = np.asarray(mask, dtype=bool) & zone_map.fluid
    mx, my = _face_masks(zone_map, mask)
    e = float(np.sum(gx[mx] * dx[mx] ** 2) + np.sum(gy[my] * dy[my] ** 2))
    g12 = zone_map.dual_g12()
    if np.any(g12 != 0):
        all4 = mask[:-1, :-1] & mask[1:, :-1] & mask[:-1, 1:] & mask[1:, 1:]
        X = (u[1:, :-1] - u[:-1, :-1]) + (u[1:, 1:] - u[:-1, 1:])
        Y = (u[:-1, 1:] - u[:-1, :-1]) + (u[1:, 1:] - u[1:, :-1])
        e += float(np.sum((g12 * X * Y)[all4]) / 2.0)
    return e


def kinetic_energy(v, zone_map: ZoneIndexField, mask=None):
    if mask is None:
        mask = zone_map.fluid
    mask = np.asarray(mask, dtype=bool) & zone_map.fluid
    return float(zone_map.h ** 2 * np.sum((zone_map.c * v * v)[mask]))


def energy(state: State, mask, zone_map: ZoneIndexField, obstacle_bc="dirichlet", time_step=None):
    """Discrete energy sum_faces g |grad u|^2 h^2 + sum_nodes c |v|^2 h^2 restricted to mask.

    With ``time_step`` (full domain only) the leapfrog correction
    -(dt^2/4)(Ku)'M^{-1}(Ku) is added, giving the quantity the scheme
    conserves to roundoff.
    """
    e = potential_energy(state.u, zone_map, mask, obstacle_bc) + kinetic_energy(state.v, zone_map, mask)
    if time_step is not None:
        if mask is not None and np.any(np.asarray(mask, bool) != zone_map.fluid):
            raise ValueError("the leapfrog-corrected energy is only defined on the full domain")
        K = stiffness(zone_map, obstacle_bc)
        m = mass_diagonal(zone_map)
        Ku = K @ np.where(zone_map.fluid, state.u, 0.0).ravel()
        minv = np.where(m > 0, 1.0 / np.where(m > 0, m, 1.0), 0.0)
        e -= 0.25 * time_step ** 2 * float(Ku @ (minv * Ku))
    return e


# --------------------------------------------------------------------------
# spectral oracle
# --------------------------------------------------------------------------

@dataclass
class DiscreteOperator:
    """Dense A = M^{-1} K on fluid unknowns, with its c-weighted inner product."""

    matrix: np.ndarray
    stiffness: np.ndarray
    mass: np.ndarray            # diagonal, h^2 c
    index: np.ndarray           # flat node indices of the unknowns
    shape: tuple
    _eig: Optional[tuple] = None

    def inner(self, u, w):
        """c-weighted inner product of unknown vectors."""
        return float(np.sum(self.mass * u * w))

    def restrict(self, field):
        return np.asarray(field, dtype=float).ravel()[self.index]

    def prolong(self, vec):
        out = np.zeros(int(np.prod(self.shape)))
        out[self.index] = vec
        return out.reshape(self.shape)

    def eig(self):
        if self._eig is None:
            mu, X = scipy.linalg.eigh(self.stiffness, np.diag(self.mass))
            self._eig = (mu, X)
        return self._eig


def assemble_discrete_operator(zone_map: ZoneIndexField, config: SolverConfig = None):
    bc = config.obstacle_bc if config is not None else "dirichlet"
    index = np.flatnonzero(zone_map.fluid.ravel())
    if index.size > ORACLE_MAX_UNKNOWNS:
        raise TooLargeForOracle(f"{index.size} unknowns exceed the dense limit {ORACLE_MAX_UNKNOWNS}")
    K = stiffness(zone_map, bc)[index][:, index].toarray()
    m = mass_diagonal(zone_map)[index]
    return DiscreteOperator(K / m[:, None], K, m, index, zone_map.grid.shape)


def propagate_oracle(A: DiscreteOperator, f1, f2, t):
    """Exact-in-time solution u(t) = cos(t sqrt A) f1 + A^{-1/2} sin(t sqrt A) f2."""
    if A.index.size > ORACLE_MAX_UNKNOWNS:
        raise TooLargeForOracle(f"{A.index.size} unknowns exceed the dense limit")
    mu, X = A.eig()
    w = np.sqrt(np.maximum(mu, 0.0))
    a = X.T @ (A.mass * A.restrict(f1))
    b = X.T @ (A.mass * A.restrict(f2))
    cw, sw = np.cos(w * t), np.sin(w * t)
    with np.errstate(divide="ignore", invalid="ignore"):
        sinc = np.where(w > 0, sw / np.where(w > 0, w, 1.0), t)
    u = X @ (cw * a + sinc * b)
    v = X @ (-w * sw * a + cw * b)
    return State(A.prolong(u), A.prolong(v), float(t))


def oracle_errors(zone_map: ZoneIndexField, pair, times, cfl_fraction=0.25, obstacle_bc="dirichlet"):
    """Relative L2 error of the leapfrog solution against the spectral oracle at each time.

    The time step is cfl_fraction times the stability limit.
    """
    dt = cfl_fraction * cfl_limit(zone_map, obstacle_bc)
    cfg = SolverConfig(grid_spacing=zone_map.h, time_step=dt, cfl_safety=1.0, obstacle_bc=obstacle_bc)
    A = assemble_discrete_operator(zone_map, cfg)
    errs = []
    state, t_prev = pair.to_state(), 0.0
    for t in times:
        state, _ = evolve(state, t_prev, t, cfg, zone_map, warn=False)
        t_prev = t
        ref = propagate_oracle(A, pair.w0, pair.w1, t)
        errs.append(float(np.linalg.norm(state.u - ref.u) / np.linalg.norm(ref.u)))
    return np.array(errs)


# --------------------------------------------------------------------------
# harnesses
# --------------------------------------------------------------------------

def unit_box_map(n):
    """Constant-coefficient unit box [0, 1]^2 with n x n interior nodes and Dirichlet walls."""
    from .domain import build_zone_map
    layout = ZoneLayout(obstacle=None, zones=[], measurement_radius=0.45, box=(0.0, 1.0, 0.0, 1.0),
                        ball_center=(0.5, 0.5))
    return build_zone_map(layout, CoefficientField(()), 1.0 / (n + 1))


# --------------------------------------------------------------------------
# data pairs
# --------------------------------------------------------------------------

@dataclass
class DataPair:
    """Position/velocity data (w0, w1) living on a masked region of the grid."""

    w0: np.ndarray
    w1: np.ndarray

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))

    def to_state(self, t=0.0):
        return State(self.w0.copy(), self.w1.copy(), t)

    def masked(self, mask):
        return DataPair(np.where(mask, self.w0, 0.0), np.where(mask, self.w1, 0.0))

    def __add__(self, other):
        return DataPair(self.w0 + other.w0, self.w1 + other.w1)

    def __sub__(self, other):
        return DataPair(self.w0 - other.w0, self.w1 - other.w1)

    def scaled(self, a):
        return DataPair(a * self.w0, a * self.w1)

    def is_zero(self):
        return not (np.any(self.w0) or np.any(self.w1))


def bump(X, Y, center, radius):
    """Compactly supported C^3 bump (1 - r^2/R^2)^4."""
    rr = ((X - center[0]) ** 2 + (Y - center[1]) ** 2) / radius ** 2
    return np.where(rr < 1.0, (1.0 - rr) ** 4, 0.0)


def random_pair(zone_map: ZoneIndexField, rng, support=None, radius=None, n_bumps=2, clearance=None):
    """Random smooth data: a few compact bumps whose discs fit inside ``support``.

    support: boolean node mask (default: the control region, else B_a).
    radius: bump radius (default: a third of the largest disc fitting the support).
    clearance: extra distance kept from the support edge and the obstacle.
    """
    from scipy.ndimage import distance_transform_edt
    if support is None:
        support = getattr(zone_map, "star", None)
        if support is None:
            support = zone_map.ball
    support = np.asarray(support, bool) & zone_map.fluid
    inside = distance_transform_edt(np.pad(support, 1)) [1:-1, 1:-1] * zone_map.h
    if radius is None:
        radius = inside.max() / 3.0
    need = radius + (clearance if clearance is not None else zone_map.h)
    cand = np.argwhere(inside >= need)
    if cand.size == 0:
        raise ValueError("support region is too small for the requested bump radius")
    X, Y = zone_map.X, zone_map.Y
    out = []
    for _ in range(2):
        f = np.zeros(X.shape)
        for _ in range(n_bumps):
            i, j = cand[rng.integers(len(cand))]
            f += rng.standard_normal() * bump(X, Y, (X[i, j], Y[i, j]), radius)
        out.append(np.where(support, f, 0.0))
    return DataPair(out[0], out[1])
