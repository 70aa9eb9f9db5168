"""Boundary control by a contraction/fixed-point construction.

Pipeline for data f on the control region O* (all operators linear):

    E      extend data from O* to the whole domain (collar-harmonic + cutoff)
    S_T    forward flow for time T;  S_T* the time-reversed flow
    Pi     spectral low-pass on the grid (removes grid-scale modes, see below)
    M_phi  multiply by a cutoff equal to 1 near O*
    K_T  = R S_T* M_phi Pi S_T E          R = restriction to O*

    w = f + K_T w                        (Neumann iteration)
    f~ = E w - S_T* M_phi Pi S_T E w     (f~ = f on O*)

The solution started from f~ vanishes on O* at time T up to the filtered
remainder, and its Robin trace alpha*u + beta*du/dnu on the boundary of O*
is the control.

Why the filter: on a staircase grid the modes near the Nyquist frequency
have vanishing group velocity, so they never leave O* and the unfiltered
discrete K_T has norm close to 1 for every T.  Removing them before the
cutoff restores the contraction; the price is a terminal residue made of
those grid-scale modes, which shrinks under refinement.
"""
from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.fft import dstn, idstn

from .domain import ControlRegion, ZoneIndexField, cutoff_field
from .errors import (BoxContamination, IncompatibleSignal, MaxIterExceeded, NotAContraction, RobinSingular,
                     RobinSingularWarning, SingularCollarSolve, TraceExtractionFailure)
from .propagator import (DataPair, SolverConfig, State, acceleration_operator, clean_horizon, energy, evolve,
                         evolve_backward, random_pair, resolve_time_step, step_count)

EXTENSION_BAND = (0.0, 0.5)      # cutoff used by the extension: 1 on O*, 0 beyond delta/2
MULTIPLIER_BAND = (0.5, 0.75)    # M_phi: 1 on O*_{delta/2}, 0 beyond 3 delta/4
CORNER_CELLS = 2.0


# --------------------------------------------------------------------------
# data types
# --------------------------------------------------------------------------

@dataclass
class ExtendedPair:
    u: np.ndarray
    v: np.ndarray
    supported: bool          # support inside the delta-collar of O*

    def to_state(self, t=0.0):
        return State(self.u.copy(), self.v.copy(), t)


@dataclass
class SynthesisReport:
    iterations: int = 0
    residuals: list = field(default_factory=list)
    rho_estimate: float = float("nan")
    rho_power: Optional[float] = None
    terminal_rel_energy: float = float("nan")
    control_l2_norm: float = 0.0
    T: float = 0.0
    alpha: float = 1.0
    beta: float = 1.0
    grid: float = 0.0
    timings: dict = field(default_factory=dict)
    T_ladder: list = field(default_factory=list)
    rho_ladder: list = field(default_factory=list)
    filter_fraction: float = 0.5

    def to_dict(self):
        return {
            "iterations": self.iterations, "residuals": list(map(float, self.residuals)),
            "rho_estimate": float(self.rho_estimate), "rho_power": self.rho_power,
            "terminal_rel_energy": float(self.terminal_rel_energy),
            "control_l2_norm": float(self.control_l2_norm), "T": float(self.T),
            "alpha": float(self.alpha), "beta": float(self.beta), "grid": float(self.grid),
            "timings": {k: float(v) for k, v in self.timings.items()},
            "T_ladder": list(map(float, self.T_ladder)), "rho_ladder": list(map(float, self.rho_ladder)),
            "filter_fraction": float(self.filter_fraction),
        }


@dataclass
class TracePlan:
    """Staircase faces between an O* node (inside) and a fluid node outside O*.

    Each face carries the outward normal of the boundary segment it is
    assigned to, its arclength position, and the stencil needed for u and the
    conormal derivative at the face midpoint.
    """

    inside: np.ndarray
    outside: np.ndarray
    axis: np.ndarray           # 0: x-face, 1: y-face
    sign: np.ndarray           # outside = inside + sign * e_axis
    nu: np.ndarray             # (n, 2) outward normal of the assigned segment
    segment_id: np.ndarray
    s: np.ndarray
    controlled: np.ndarray     # False for faces dropped near corners
    tang: np.ndarray           # (n, 2) flat indices of inside +/- e_b (-1 = outside the grid)
    g_aa: np.ndarray
    g_ab: np.ndarray
    g_bb: np.ndarray
    h: float
    slab_nodes: np.ndarray

    @property
    def n(self):
        return self.inside.size


@dataclass
class ControlSignal:
    alpha: float
    beta: float
    times: np.ndarray               # (n_t,)
    segment_id: np.ndarray          # (n_sites,)
    s: np.ndarray                   # (n_sites,)
    u: np.ndarray                   # (n_t, n_sites)
    dnu: np.ndarray
    g: np.ndarray
    h: float = 1.0

    def segment(self, k):
        sel = self.segment_id == k
        order = np.argsort(self.s[sel], kind="stable")
        return self.s[sel][order], self.times, self.g[:, sel][:, order]

    def l2_norm(self):
        """Discrete L2 norm over boundary x (0, T): face length h, trapezoid in t."""
        if self.g.size == 0 or self.times.size < 2:
            return 0.0
        w = np.full(self.times.size, self.times[1] - self.times[0])
        w[0] *= 0.5
        w[-1] *= 0.5
        return float(np.sqrt(self.h * np.sum(w[:, None] * self.g ** 2)))

    def scaled(self, a):
        return ControlSignal(self.alpha, self.beta, self.times, self.segment_id, self.s, a * self.u, a * self.dnu,
                             a * self.g, self.h)


# --------------------------------------------------------------------------
# the operator bundle for one (zone map, region, solver) triple
# --------------------------------------------------------------------------

class ControlProblem:
    def __init__(self, zone_map: ZoneIndexField, region: ControlRegion, config: SolverConfig,
                 filter_fraction=0.5):
        if getattr(zone_map, "region", None) is not region or not hasattr(zone_map, "star"):
            zone_map._rasterize_region(region)
            zone_map.region = region
        self.zone_map = zone_map
        self.region = region
        self.config = config
        self.filter_fraction = float(filter_fraction)
        self.h = zone_map.h
        self.star = zone_map.star
        self.sd = zone_map.star_distance
        grid = zone_map.grid
        self.phi_E = cutoff_field(region, *EXTENSION_BAND, grid, self.sd) * zone_map.fluid
        self.phi_M = cutoff_field(region, *MULTIPLIER_BAND, grid, self.sd) * zone_map.fluid
        self.collar_half = zone_map.fluid & ~self.star & (self.sd < 0.5 * region.delta)
        self._collar_lu = None
        self._filter_mask = None
        self._plan = None
        nb_dirichlet = np.zeros_like(self.star)
        obst = np.pad(zone_map.obstacle, 1, constant_values=True)
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nb_dirichlet |= obst[1 + di:obst.shape[0] - 1 + di, 1 + dj:obst.shape[1] - 1 + dj]
        # without a Dirichlet neighbour the O*-energy is only a seminorm; add a mass term
        self.needs_mass = not bool((self.star & nb_dirichlet).any())
        self.diam = region.shape.diameter

    # norms ----------------------------------------------------------------
    def norm(self, pair: DataPair):
        e = energy(State(pair.w0, pair.w1), self.star, self.zone_map, self.config.obstacle_bc)
        if self.needs_mass:
            e += self.h ** 2 * float(np.sum(pair.w0[self.star] ** 2)) / self.diam ** 2
        return math.sqrt(max(e, 0.0))

    def restrict(self, state) -> DataPair:
        return DataPair(np.where(self.star, state.u, 0.0), np.where(self.star, state.v, 0.0))

    # extension -------------------------------------------------------------
    def _collar_factor(self):
        if self._collar_lu is None:
            cn = np.argwhere(self.collar_half)
            nx, ny = self.zone_map.grid.shape
            idx = -np.ones((nx, ny), dtype=int)
            idx[self.collar_half] = np.arange(len(cn))
            rows, cols = [np.arange(len(cn))], [np.arange(len(cn))]
            vals = [np.full(len(cn), 4.0)]
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ii, jj = cn[:, 0] + di, cn[:, 1] + dj
                ok = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny)
                k = np.flatnonzero(ok)
                nb = idx[ii[ok], jj[ok]]
                sel = nb >= 0
                rows.append(k[sel])
                cols.append(nb[sel])
                vals.append(-np.ones(sel.sum()))
            L = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(len(cn), len(cn)))
            try:
                self._collar_lu = (spla.splu(L), cn) if len(cn) else (None, cn)
            except RuntimeError as e:
                raise SingularCollarSolve(str(e)) from None
        return self._collar_lu

    def extend(self, pair: DataPair) -> ExtendedPair:
        w0 = np.where(self.star, pair.w0, 0.0)
        w1 = np.where(self.star, pair.w1, 0.0)
        lu, cn = self._collar_factor()
        u = w0.copy()
        if lu is not None and np.any(w0):
            padded = np.pad(w0, 1)
            b = np.zeros(len(cn))
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                b += padded[cn[:, 0] + 1 + di, cn[:, 1] + 1 + dj]
            x = lu.solve(b)
            if not np.all(np.isfinite(x)):
                raise SingularCollarSolve("collar extension produced non-finite values")
            u[cn[:, 0], cn[:, 1]] = x
        u = u * self.phi_E
        u[self.star] = w0[self.star]          # exact restriction identity
        nz = (u != 0) | (w1 != 0)
        supported = bool(np.all(self.sd[nz] < self.region.delta)) if nz.any() else True
        return ExtendedPair(u, w1, supported)

    # filter and multiplier ---------------------------------------------------
    def spectral_filter(self, field_):
        if self.filter_fraction >= math.sqrt(2.0):
            return field_ * self.zone_map.fluid
        if self._filter_mask is None:
            nx, ny = self.zone_map.grid.shape
            kx = np.arange(1, nx + 1) / (nx + 1)
            ky = np.arange(1, ny + 1) / (ny + 1)
            KX, KY = np.meshgrid(kx, ky, indexing="ij")
            self._filter_mask = np.hypot(KX, KY) <= self.filter_fraction
        out = idstn(dstn(field_, type=1) * self._filter_mask, type=1)
        return out * self.zone_map.fluid

    def multiplier_step(self, state: State) -> State:
        """M_phi Pi applied to a state."""
        return State(self.phi_M * self.spectral_filter(state.u), self.phi_M * self.spectral_filter(state.v), state.t)

    # horizon -----------------------------------------------------------------
    def horizon(self):
        collar = self.zone_map.fluid & (self.sd < self.region.delta)
        return clean_horizon(self.zone_map, collar, collar)

    def check_horizon(self, T):
        hz = self.horizon()
        if T > hz:
            raise BoxContamination(f"T = {T:.4g} exceeds the clean horizon {hz:.4g} of the box")

    # K_T ---------------------------------------------------------------------
    def z_part(self, pair: DataPair, T):
        """S_T* M_phi Pi S_T E pair, as a full-domain state at time 0."""
        ext = self.extend(pair).to_state()
        sT, _ = evolve(ext, 0.0, T, self.config, self.zone_map, warn=False)
        back, _ = evolve_backward(self.multiplier_step(sT), T, self.config, self.zone_map, warn=False)
        return back

    def apply_KT(self, pair: DataPair, T) -> DataPair:
        return self.restrict(self.z_part(pair, T))

    def trace_plan(self):
        if self._plan is None:
            self._plan = build_trace_plan(self.zone_map, self.region)
        return self._plan


# --------------------------------------------------------------------------
# module-level operations
# --------------------------------------------------------------------------

def extend_E(pair: DataPair, region: ControlRegion, zone_map: ZoneIndexField, config=None) -> ExtendedPair:
    prob = _problem(zone_map, region, config)
    return prob.extend(pair)


def apply_M_phi(state: State, phi) -> State:
    return State(phi * state.u, phi * state.v, state.t)


def apply_KT(pair: DataPair, T, config: SolverConfig, zone_map: ZoneIndexField, region: ControlRegion,
             filter_fraction=0.5, check=True) -> DataPair:
    prob = _problem(zone_map, region, config, filter_fraction)
    if check:
        prob.check_horizon(T)
    return prob.apply_KT(pair, T)


def _problem(zone_map, region, config, filter_fraction=0.5):
    key = ("problem", id(region), filter_fraction, None if config is None else
           (config.time_step, config.cfl_safety, config.obstacle_bc))
    if key not in zone_map._cache:
        cfg = config or SolverConfig(grid_spacing=zone_map.h)
        zone_map._cache[key] = ControlProblem(zone_map, region, cfg, filter_fraction)
    return zone_map._cache[key]


def estimate_rho(problem: ControlProblem, T, steps=20, seed=0, start=None, check=True):
    """Power iteration for the spectral radius of K_T from random smooth data in O*.

    Returns (rho, history) with history[k] = |K w_k| for normalized w_k.
    """
    if check:
        problem.check_horizon(T)
    rng = np.random.default_rng(seed)
    w = start if start is not None else random_pair(problem.zone_map, rng, support=problem.star, n_bumps=4)
    nrm = problem.norm(w)
    if nrm == 0:
        raise ValueError("power iteration needs nonzero starting data")
    w = w.scaled(1.0 / nrm)
    hist = []
    for _ in range(steps):
        kw = problem.apply_KT(w, T)
        r = problem.norm(kw)
        hist.append(r)
        if r == 0:
            break
        w = kw.scaled(1.0 / r)
    return hist[-1], hist


def select_T(problem: ControlProblem, ladder, rho_target=0.9, steps=20, seed=0):
    """First T on the ladder with measured rho(T) <= rho_target; NotAContraction otherwise."""
    rhos = []
    for T in ladder:
        rho, _ = estimate_rho(problem, T, steps, seed)
        rhos.append(rho)
        if rho <= rho_target:
            return T, rhos
    raise NotAContraction(f"rho(T) > {rho_target} for every T in {list(ladder)} (rhos {np.round(rhos, 4).tolist()})",
                          rho=rhos[-1] if rhos else None)


def solve_neumann(f_pair: DataPair, T=None, tol=1e-6, max_iter=200, problem: Optional[ControlProblem] = None,
                  apply_K: Optional[Callable] = None, norm: Optional[Callable] = None):
    """Fixed point of w = f + K w by the Neumann iteration w^{k+1} = f + K w^k, w^0 = f."""
    if tol <= 0 or max_iter < 1:
        raise ValueError("need tol > 0 and max_iter >= 1")
    if apply_K is None:
        apply_K = lambda p: problem.apply_KT(p, T)     # noqa: E731
    if norm is None:
        norm = problem.norm if problem is not None else (
            lambda p: math.sqrt(float(np.sum(p.w0 ** 2) + np.sum(p.w1 ** 2))))
    rep = SynthesisReport(T=float(T) if T is not None else 0.0)
    nf = norm(f_pair)
    if nf == 0:
        rep.iterations = 1
        rep.residuals = [0.0]
        rep.rho_estimate = 0.0
        return DataPair(np.zeros_like(f_pair.w0), np.zeros_like(f_pair.w1)), rep
    w = f_pair
    prev = None
    growing = 0
    ratios = []
    for k in range(1, max_iter + 1):
        w_new = f_pair + apply_K(w)
        r = norm(w_new - w) / nf
        rep.residuals.append(r)
        w = w_new
        if prev is not None and prev > 0:
            ratios.append(r / prev)
            growing = growing + 1 if ratios[-1] >= 1.0 else 0
            if growing >= 3:
                rep.iterations = k
                rep.rho_estimate = ratios[-1]
                raise NotAContraction(f"residual ratio >= 1 for 3 consecutive iterations (last {ratios[-1]:.4f})",
                                      rho=ratios[-1])
        prev = r
        if r <= tol:
            rep.iterations = k
            rep.rho_estimate = ratios[-1] if ratios else float("nan")
            return w, rep
    rep.iterations = max_iter
    raise MaxIterExceeded(f"no convergence to {tol:g} in {max_iter} iterations (residual {rep.residuals[-1]:.3e})")


def synthesize_control(f_pair: DataPair, T, alpha, beta, problem: ControlProblem, tol=1e-6, max_iter=200):
    """Full pipeline: fixed point, extended data, final forward solve, Robin trace."""
    if alpha == 0 and beta == 0:
        raise ValueError("need alpha^2 + beta^2 != 0")
    problem.check_horizon(T)
    t0 = time.perf_counter()
    w, rep = solve_neumann(f_pair, T, tol, max_iter, problem)
    t1 = time.perf_counter()
    zm = problem.zone_map
    ext = problem.extend(w)
    z = problem.z_part(w, T)
    ft = State(ext.u - z.u, ext.v - z.v, 0.0)
    ft.u[problem.star] = f_pair.w0[problem.star]
    ft.v[problem.star] = f_pair.w1[problem.star]
    plan = problem.trace_plan()
    final, hist = evolve(ft, 0.0, T, problem.config, zm, record=plan.slab_nodes, warn=False)
    t2 = time.perf_counter()
    signal = boundary_trace(hist, plan, zm, alpha, beta)
    nf2 = problem.norm(f_pair) ** 2
    eT = problem.norm(problem.restrict(final)) ** 2
    rep.terminal_rel_energy = eT / nf2 if nf2 > 0 else 0.0
    rep.control_l2_norm = signal.l2_norm()
    rep.alpha, rep.beta, rep.T, rep.grid = float(alpha), float(beta), float(T), zm.h
    rep.filter_fraction = problem.filter_fraction
    rep.timings.update({"neumann": t1 - t0, "final_solve": t2 - t1, "trace": time.perf_counter() - t2})
    return signal, rep


# --------------------------------------------------------------------------
# traces
# --------------------------------------------------------------------------

def build_trace_plan(zone_map: ZoneIndexField, region: ControlRegion) -> TracePlan:
    star = zone_map.star
    fluid = zone_map.fluid
    nx, ny = zone_map.grid.shape
    h = zone_map.h
    gx, gy = zone_map.faces("dirichlet")
    recs = []
    for axis in (0, 1):
        for sign in (1, -1):
            e = np.array([1, 0]) if axis == 0 else np.array([0, 1])
            ins = np.argwhere(star)
            out = ins + sign * e
            ok = (out[:, 0] >= 0) & (out[:, 0] < nx) & (out[:, 1] >= 0) & (out[:, 1] < ny)
            ins, out = ins[ok], out[ok]
            keep = fluid[out[:, 0], out[:, 1]] & ~star[out[:, 0], out[:, 1]]
            for a, b in zip(ins[keep], out[keep]):
                recs.append((a[0], a[1], b[0], b[1], axis, sign))
    if not recs:
        raise TraceExtractionFailure("control region has no boundary faces towards the fluid")
    R = np.array(recs, dtype=int)
    # deterministic order
    R = R[np.lexsort((R[:, 5], R[:, 4], R[:, 1], R[:, 0]))]
    ii, ij, oi, oj, axis, sign = R.T
    X, Y = zone_map.X, zone_map.Y
    mx = 0.5 * (X[ii, ij] + X[oi, oj])
    my = 0.5 * (Y[ii, ij] + Y[oi, oj])
    dvec = np.stack([np.where(axis == 0, sign, 0), np.where(axis == 1, sign, 0)], axis=1).astype(float)

    segs = region.segments()
    best_d = np.full(mx.size, np.inf)
    best = np.zeros(mx.size, dtype=int)
    best_s = np.zeros(mx.size)
    best_nu = np.zeros((mx.size, 2))
    any_d = np.full(mx.size, np.inf)
    any_k = np.zeros(mx.size, dtype=int)
    any_s = np.zeros(mx.size)
    any_nu = np.zeros((mx.size, 2))
    for k, sg in enumerate(segs):
        s, dist, nux, nuy = sg.project(mx, my)
        facing = nux * dvec[:, 0] + nuy * dvec[:, 1] > 1e-12
        upd = facing & (dist < best_d)
        best_d[upd], best[upd], best_s[upd] = dist[upd], k, s[upd]
        best_nu[upd] = np.stack([nux[upd], nuy[upd]], axis=1)
        upd = dist < any_d
        any_d[upd], any_k[upd], any_s[upd] = dist[upd], k, s[upd]
        any_nu[upd] = np.stack([nux[upd], nuy[upd]], axis=1)
    none = ~np.isfinite(best_d)
    best[none], best_s[none], best_nu[none] = any_k[none], any_s[none], any_nu[none]

    aligned = np.abs(np.sum(best_nu * dvec, axis=1)) > 1 - 1e-9
    corners = region.corners()
    controlled = np.ones(mx.size, dtype=bool)
    if len(corners):
        dc = np.min(np.hypot(mx[:, None] - corners[None, :, 0], my[:, None] - corners[None, :, 1]), axis=1)
        controlled = aligned | (dc >= CORNER_CELLS * h)

    flat = lambda i, j: i * ny + j    # noqa: E731

    def nb(i, j, di, dj):
        i2, j2 = i + di, j + dj
        ok = (i2 >= 0) & (i2 < nx) & (j2 >= 0) & (j2 < ny)
        out = np.where(ok, flat(np.clip(i2, 0, nx - 1), np.clip(j2, 0, ny - 1)), -1)
        return out

    bi = np.where(axis == 0, 0, 1)
    bj = np.where(axis == 0, 1, 0)
    # tangential derivative from the inside node only: its neighbours are O* nodes, ghosts or Dirichlet nodes
    tang = np.stack([nb(ii, ij, bi, bj), nb(ii, ij, -bi, -bj)], axis=1)
    # face coefficient along the normal axis, node averages for the rest
    fi = np.where(axis == 0, np.maximum(ii, oi), ii)
    fj = np.where(axis == 0, ij, np.maximum(ij, oj))
    g_face = np.where(axis == 0, gx[np.minimum(fi, nx), fj], gy[fi, np.minimum(fj, ny)])
    g11 = 0.5 * (zone_map.g11[ii, ij] + zone_map.g11[oi, oj])
    g22 = 0.5 * (zone_map.g22[ii, ij] + zone_map.g22[oi, oj])
    g12 = 0.5 * (zone_map.g12[ii, ij] + zone_map.g12[oi, oj])
    g_aa = g_face
    g_bb = np.where(axis == 0, g22, g11)
    g_ab = g12
    inside, outside = flat(ii, ij), flat(oi, oj)
    nodes = np.concatenate([inside, outside, tang[tang >= 0]])
    return TracePlan(inside, outside, axis, sign, best_nu, best, best_s, controlled, tang, g_aa, g_ab, g_bb, h,
                     np.unique(nodes))


def _trace_values(plan: TracePlan, U, sel=None):
    """u and conormal derivative at face midpoints from node values U[..., node]."""
    def val(idx):
        safe = np.where(idx >= 0, idx, 0)
        return np.where(idx >= 0, U[..., safe], 0.0)
    ui, uo = val(plan.inside), val(plan.outside)
    h = plan.h
    u_face = 0.5 * (ui + uo)
    d_a = plan.sign * (uo - ui) / h
    d_b = (val(plan.tang[:, 0]) - val(plan.tang[:, 1])) / (2 * h)
    nu_x, nu_y = plan.nu[:, 0], plan.nu[:, 1]
    nu_a = np.where(plan.axis == 0, nu_x, nu_y)
    nu_b = np.where(plan.axis == 0, nu_y, nu_x)
    dnu = nu_a * (plan.g_aa * d_a + plan.g_ab * d_b) + nu_b * (plan.g_ab * d_a + plan.g_bb * d_b)
    return u_face, dnu


def boundary_trace(history, plan_or_region, zone_map: ZoneIndexField, alpha, beta) -> ControlSignal:
    """Robin trace alpha*u + beta*du/dnu on the controlled faces, at every recorded time."""
    plan = plan_or_region if isinstance(plan_or_region, TracePlan) else _trace_plan_for(zone_map, plan_or_region)
    nodes = np.asarray(history.slab_nodes)
    if history.slab_u.shape[0] != len(history.times) or history.slab_u.shape[0] < 2:
        raise TraceExtractionFailure("history does not cover the time interval")
    need = plan.slab_nodes
    pos = np.searchsorted(nodes, need)
    pos = np.clip(pos, 0, max(nodes.size - 1, 0))
    if nodes.size == 0 or not np.array_equal(nodes[pos], need):
        raise TraceExtractionFailure("history slabs do not contain the boundary stencil nodes")
    full = np.zeros((history.slab_u.shape[0], zone_map.grid.nx * zone_map.grid.ny))
    full[:, need] = history.slab_u[:, pos]
    u_face, dnu = _trace_values(plan, full)
    c = plan.controlled
    g = alpha * u_face[:, c] + beta * dnu[:, c]
    return ControlSignal(float(alpha), float(beta), np.asarray(history.times, float), plan.segment_id[c],
                         plan.s[c], u_face[:, c], dnu[:, c], g, plan.h)


def _trace_plan_for(zone_map, region):
    key = ("trace", id(region))
    if key not in zone_map._cache:
        if getattr(zone_map, "region", None) is not region:
            zone_map._rasterize_region(region)
            zone_map.region = region
        zone_map._cache[key] = build_trace_plan(zone_map, region)
    return zone_map._cache[key]


def trace_of_field(u, plan: TracePlan):
    """u and conormal derivative at the face midpoints for a single grid field."""
    return _trace_values(plan, np.asarray(u, float).ravel()[None, :])


# --------------------------------------------------------------------------
# independent verification on O* with ghost nodes
# --------------------------------------------------------------------------

@dataclass
class VerificationReport:
    terminal_rel_energy: float
    initial_norm: float
    steps: int
    robin_fallback: bool
    interpolated: bool
    wall_time: float

    def to_dict(self):
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in self.__dict__.items()}


def verify_control(f_pair: DataPair, signal: ControlSignal, T, config: SolverConfig, zone_map: ZoneIndexField,
                   region: ControlRegion, tol_match=1e-9):
    """Re-solve the wave equation on O* alone with the Robin data imposed through ghost nodes."""
    t_start = time.perf_counter()
    plan = _trace_plan_for(zone_map, region)
    alpha, beta = signal.alpha, signal.beta
    if alpha == 0 and beta == 0:
        raise ValueError("need alpha^2 + beta^2 != 0")
    c = plan.controlled
    if signal.s.size != int(c.sum()):
        raise IncompatibleSignal(f"signal has {signal.s.size} sites, this grid has {int(c.sum())} controlled faces")
    # match sites by (segment, arclength) regardless of their order in the signal
    p_ord = np.lexsort((plan.s[c], plan.segment_id[c]))
    s_ord = np.lexsort((signal.s, signal.segment_id))
    if np.any(signal.segment_id[s_ord] != plan.segment_id[c][p_ord]) or \
            np.any(np.abs(signal.s[s_ord] - plan.s[c][p_ord]) > tol_match * max(1.0, np.abs(plan.s).max())):
        raise IncompatibleSignal("signal sites do not match the boundary faces of this grid")
    perm = np.empty_like(p_ord)
    perm[p_ord] = s_ord
    signal = ControlSignal(signal.alpha, signal.beta, signal.times, signal.segment_id[perm], signal.s[perm],
                           signal.u[:, perm], signal.dnu[:, perm], signal.g[:, perm], signal.h)
    times = np.asarray(signal.times, float)
    dt = resolve_time_step(config, zone_map)
    n, d = step_count(0.0, T, dt)
    step_t = d * np.arange(n + 1)
    if times[0] > 1e-12 or times[-1] < T * (1 - 1e-12):
        raise IncompatibleSignal(f"signal covers [{times[0]:.4g}, {times[-1]:.4g}], need [0, {T:.4g}]")
    interpolated = not (times.size == n + 1 and np.allclose(times, step_t, rtol=0, atol=1e-12 * max(1.0, T)))
    if interpolated:
        G = np.empty((n + 1, signal.g.shape[1]))
        for k in range(signal.g.shape[1]):
            G[:, k] = np.interp(step_t, times, signal.g[:, k])
    else:
        G = signal.g
    g_all = np.zeros((n + 1, plan.n))
    g_all[:, c] = G

    zm = zone_map
    nx, ny = zm.grid.shape
    star_idx = np.flatnonzero(zm.star.ravel())
    ghosts, ghost_of_face = np.unique(plan.outside, return_inverse=True)
    g12d = zm.dual_g12()
    if np.any(g12d != 0):
        touch = np.zeros((nx, ny), dtype=bool)
        touch.ravel()[ghosts] = True
        near = touch[:-1, :-1] | touch[1:, :-1] | touch[:-1, 1:] | touch[1:, 1:]
        if np.any(g12d[near] != 0):
            raise ValueError("verification needs a diagonal metric next to the control boundary")
    A = acceleration_operator(zm, config.obstacle_bc)
    cols = np.concatenate([star_idx, ghosts])
    A_ss = A[star_idx][:, cols]
    n_s, n_g, n_f = star_idx.size, ghosts.size, plan.n
    col_of = -np.ones(nx * ny, dtype=int)
    col_of[star_idx] = np.arange(n_s)
    col_of[ghosts] = n_s + np.arange(n_g)

    # face equation  alpha*(u_i+u_o)/2 + beta*dnu = g  as a linear row over O* nodes and ghosts
    h = plan.h
    nu_a = np.where(plan.axis == 0, plan.nu[:, 0], plan.nu[:, 1])
    nu_b = np.where(plan.axis == 0, plan.nu[:, 1], plan.nu[:, 0])
    k_a = (nu_a * plan.g_aa + nu_b * plan.g_ab) * plan.sign / h
    k_b = (nu_a * plan.g_ab + nu_b * plan.g_bb) / (2 * h)
    w_o = 0.5 * alpha + beta * k_a
    w_i = 0.5 * alpha - beta * k_a
    scale = abs(alpha) + abs(beta) * np.abs(plan.g_aa) / h
    deg = np.abs(w_o) < 1e-8 * scale
    fallback = bool(deg.any())
    rhs_scale = np.ones(n_f)
    if fallback:
        if alpha == 0:
            raise RobinSingular("ghost-node Robin system is singular and alpha = 0")
        warnings.warn("degenerate Robin ghost equation; imposing u = g/alpha there", RobinSingularWarning)
        w_o = np.where(deg, 0.5, w_o)
        w_i = np.where(deg, 0.5, w_i)
        rhs_scale = np.where(deg, 1.0 / alpha, 1.0)
    kb = np.where(deg, 0.0, beta * k_b)
    rows = [np.arange(n_f), np.arange(n_f)]
    cidx = [col_of[plan.outside], col_of[plan.inside]]
    vals = [w_o, w_i]
    for q, sgn in ((0, 1.0), (1, -1.0)):
        nbc = np.where(plan.tang[:, q] >= 0, col_of[np.maximum(plan.tang[:, q], 0)], -1)
        ok = (nbc >= 0) & (kb != 0)
        rows.append(np.flatnonzero(ok))
        cidx.append(nbc[ok])
        vals.append(sgn * kb[ok])
    F = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cidx))), shape=(n_f, n_s + n_g))
    B = F[:, n_s:].tocsc()
    C = F[:, :n_s].tocsr()
    try:
        lu = spla.splu((B.T @ B).tocsc())
    except RuntimeError:
        raise RobinSingular("ghost-node system for the Robin data is singular") from None
    Bt = B.T.tocsr()

    def ghost_values(us, gk):
        return lu.solve(Bt @ (rhs_scale * gk - C @ us))

    us = f_pair.w0.ravel()[star_idx].copy()
    vs = f_pair.w1.ravel()[star_idx].copy()
    ug = ghost_values(us, g_all[0])
    acc = -(A_ss @ np.concatenate([us, ug]))
    half = 0.5 * d
    for k in range(1, n + 1):
        vs += half * acc
        us += d * vs
        ug = ghost_values(us, g_all[k])
        acc = -(A_ss @ np.concatenate([us, ug]))
        vs += half * acc
    uT = np.zeros(nx * ny)
    vT = np.zeros(nx * ny)
    uT[star_idx], vT[star_idx] = us, vs
    prob = _problem(zm, region, config)
    nf = prob.norm(f_pair)
    eT = prob.norm(DataPair(uT.reshape(nx, ny), vT.reshape(nx, ny))) ** 2
    rel = eT / nf ** 2 if nf > 0 else eT
    return VerificationReport(float(rel), float(nf), int(n), fallback, bool(interpolated),
                              time.perf_counter() - t_start)


# --------------------------------------------------------------------------
# control.csv
# --------------------------------------------------------------------------

CONTROL_COLUMNS = ["segment_id", "s", "t", "u", "dnu", "g"]


def write_control_csv(path, signal: ControlSignal):
    order = np.lexsort((signal.s, signal.segment_id))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONTROL_COLUMNS)
        for k in order:
            sid, s = int(signal.segment_id[k]), f"{signal.s[k]:.17g}"
            for it, t in enumerate(signal.times):
                w.writerow([sid, s, f"{t:.17g}", f"{signal.u[it, k]:.17g}", f"{signal.dnu[it, k]:.17g}",
                            f"{signal.g[it, k]:.17g}"])


def read_control_csv(path, alpha, beta, h):
    """Read control.csv back into a ControlSignal (sites sorted by segment and arclength)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != len(CONTROL_COLUMNS):
        raise IncompatibleSignal(f"{path}: expected columns {CONTROL_COLUMNS}")
    sid, s, t = data[:, 0].astype(int), data[:, 1], data[:, 2]
    times = np.unique(t)
    keys = np.stack([sid, s], axis=1)
    sites, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    n_t, n_s = times.size, sites.shape[0]
    if data.shape[0] != n_t * n_s:
        raise IncompatibleSignal(f"{path}: samples do not form a full site x time lattice")
    ti = np.searchsorted(times, t)
    U = np.zeros((n_t, n_s))
    D = np.zeros((n_t, n_s))
    G = np.zeros((n_t, n_s))
    U[ti, inv], D[ti, inv], G[ti, inv] = data[:, 3], data[:, 4], data[:, 5]
    return ControlSignal(float(alpha), float(beta), times, sites[:, 0].astype(int), sites[:, 1], U, D, G, h)


def sort_signal(signal: ControlSignal) -> ControlSignal:
    """Reorder sites by (segment, arclength), the order used in control.csv."""
    order = np.lexsort((signal.s, signal.segment_id))
    return ControlSignal(signal.alpha, signal.beta, signal.times, signal.segment_id[order], signal.s[order],
                         signal.u[:, order], signal.dnu[:, order], signal.g[:, order], signal.h)
