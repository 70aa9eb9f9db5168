"""Local energy decay: sampled ratios, parity-dependent fits and ensemble envelopes."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .errors import BoxContamination, InsufficientSamples, NonPositiveRatio, ZeroInitialData
from .propagator import (DataPair, SolverConfig, clean_horizon, evolve, evolve_backward,
                         kinetic_energy, potential_energy, random_pair, support_mask)

REGIONS = ("ball", "star", "collar")
CONVENTIONS = ("energy", "amplitude")


def region_mask(zone_map, region):
    if region == "ball":
        return zone_map.ball
    if region == "star":
        return zone_map.star
    if region == "collar":
        return zone_map.collar
    raise ValueError(f"unknown region tag {region!r}")


def _local(pot, kin, convention):
    # amplitude: ||grad u|| + ||sqrt(c) v||;  energy: the sum of squares
    if convention == "energy":
        return pot + kin
    if convention == "amplitude":
        return np.sqrt(pot) + np.sqrt(kin)
    raise ValueError(f"unknown convention {convention!r}")


@dataclass
class DecaySeries:
    t: np.ndarray
    potential: np.ndarray          # local g-weighted gradient energy at each t
    kinetic: np.ndarray            # local c-weighted velocity energy at each t
    initial: tuple                 # (potential, kinetic) of the data on the region
    region: str = "ball"
    convention: str = "energy"

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("sample times must be strictly increasing")

    @property
    def E_local(self):
        return _local(np.asarray(self.potential), np.asarray(self.kinetic), self.convention)

    @property
    def E_initial(self):
        return float(_local(np.asarray(self.initial[0]), np.asarray(self.initial[1]), self.convention))

    @property
    def ratio(self):
        return self.E_local / self.E_initial

    def with_convention(self, convention):
        return DecaySeries(self.t, self.potential, self.kinetic, self.initial, self.region, convention)

    def samples(self):
        return list(zip(self.t.tolist(), self.E_local.tolist(), [self.E_initial] * len(self.t),
                        self.ratio.tolist()))


@dataclass
class DecayFit:
    model: str                     # "exponential" | "power"
    C: float
    rate: Optional[float]          # gamma for the exponential model
    slope: Optional[float]         # log-log slope for the power model
    window: tuple
    residual: float
    T0: float
    n_samples: int = 0

    def predict(self, t):
        t = np.asarray(t, dtype=float)
        if self.model == "exponential":
            return self.C * np.exp(-self.rate * t)
        return self.C * t ** self.slope

    def to_dict(self):
        return asdict(self)


def measure_decay(f_pair: DataPair, config: SolverConfig, zone_map, sample_times, region="ball",
                  convention="energy", obstacle_bc=None, check_horizon=True):
    """Evolve the data and record local energy on the tagged region at each sample time."""
    bc = obstacle_bc or config.obstacle_bc
    mask = region_mask(zone_map, region)
    state = f_pair.to_state()
    p0 = potential_energy(state.u, zone_map, mask, bc)
    k0 = kinetic_energy(state.v, zone_map, mask)
    if p0 + k0 <= 0:
        raise ZeroInitialData("initial data carry no energy on the measured region")
    ts = np.asarray(sample_times, dtype=float)
    if check_horizon:
        horizon = clean_horizon(zone_map, support_mask(state), mask)
        if ts.max() > horizon:
            raise BoxContamination(f"sample time {ts.max():.4g} exceeds the clean horizon {horizon:.4g}")
    pot, kin = [], []
    t_prev = 0.0
    for t in ts:
        if t > t_prev:
            state, _ = evolve(state, t_prev, t, config, zone_map, warn=False)
            t_prev = t
        pot.append(potential_energy(state.u, zone_map, mask, bc))
        kin.append(kinetic_energy(state.v, zone_map, mask))
    return DecaySeries(ts, np.array(pot), np.array(kin), (p0, k0), region, convention)


ESCAPE_RATIO = 1e-2


def default_window(t, ratio, min_samples=5):
    """Last two thirds of the sampled range, starting no earlier than the escape of the data.

    Escape is the first sample where the ratio falls below ESCAPE_RATIO; it is
    ignored when fewer than min_samples would remain.
    """
    t = np.asarray(t, dtype=float)
    lo = t[0] + (t[-1] - t[0]) / 3.0
    below = np.flatnonzero(np.asarray(ratio) < ESCAPE_RATIO)
    if below.size and np.sum(t >= max(lo, t[below[0]])) >= min_samples:
        lo = max(lo, t[below[0]])
    return (float(lo), float(t[-1]))


def fit_decay(series: DecaySeries, parity="even", window=None):
    """Least-squares fit of log(ratio) against t (odd dimension) or log t (even dimension).

    Default window: see default_window.
    """
    t = series.t
    r = series.ratio
    if window is None:
        window = default_window(t, r)
    sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    if sel.sum() < 5:
        raise InsufficientSamples(f"{int(sel.sum())} samples in window {window}, need 5")
    if np.any(r[sel] <= 0) or not np.all(np.isfinite(r[sel])):
        raise NonPositiveRatio("decay ratios must be positive to take logarithms")
    ly = np.log(r[sel])
    if parity == "odd":
        x = t[sel]
        model = "exponential"
    elif parity == "even":
        if np.any(t[sel] <= 0):
            raise NonPositiveRatio("power-law fit needs positive sample times")
        x = np.log(t[sel])
        model = "power"
    else:
        raise ValueError("parity must be 'odd' or 'even'")
    A = np.stack([np.ones_like(x), x], axis=1)
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - ly) ** 2)))
    C = float(np.exp(coef[0]))
    if model == "exponential":
        fit = DecayFit(model, C, float(-coef[1]), None, tuple(map(float, window)), resid, float(window[0]),
                       int(sel.sum()))
    else:
        fit = DecayFit(model, C, None, float(coef[1]), tuple(map(float, window)), resid, float(window[0]),
                       int(sel.sum()))
    # onset: last time the data sit clearly above the fitted envelope
    pos = t > 0 if model == "power" else np.ones_like(t, dtype=bool)
    with np.errstate(divide="ignore"):
        excess = np.log(r[pos]) - np.log(fit.predict(t[pos]))
    above = t[pos][excess > 3 * resid + 1e-12]
    fit.T0 = float(above.max()) if above.size else float(t[pos][0])
    return fit


def backward_decay_check(f_pair: DataPair, T, config: SolverConfig, zone_map, region="ball",
                         convention="energy", check_horizon=True):
    """Local-energy ratio at time 0 of the solution that equals f_pair at time T."""
    mask = region_mask(zone_map, region)
    bc = config.obstacle_bc
    terminal = f_pair.to_state(T)
    pT = potential_energy(terminal.u, zone_map, mask, bc)
    kT = kinetic_energy(terminal.v, zone_map, mask)
    if pT + kT <= 0:
        raise ZeroInitialData("terminal data carry no energy on the measured region")
    if check_horizon:
        horizon = clean_horizon(zone_map, support_mask(terminal), mask)
        if T > horizon:
            raise BoxContamination(f"T = {T:.4g} exceeds the clean horizon {horizon:.4g}")
    s0, _ = evolve_backward(terminal, T, config, zone_map, warn=False)
    p0 = potential_energy(s0.u, zone_map, mask, bc)
    k0 = kinetic_energy(s0.v, zone_map, mask)
    return float(_local(p0, k0, convention) / _local(pT, kT, convention))


@dataclass
class EnsembleResult:
    series: list
    envelope: np.ndarray
    fit: DecayFit
    seed: int
    draws: list = field(default_factory=list)


def ensemble_decay(config: SolverConfig, zone_map, sample_times, n_draws=16, seed=0, region="ball",
                   parity="even", support=None, radius=None, window=None):
    """Max over random compactly supported data of the decay ratio, with a fit of the envelope."""
    rng = np.random.default_rng(seed)
    series, draws = [], []
    for _ in range(n_draws):
        pair = random_pair(zone_map, rng, support=support, radius=radius)
        draws.append(pair)
        series.append(measure_decay(pair, config, zone_map, sample_times, region=region))
    env = np.max([s.ratio for s in series], axis=0)
    env_series = DecaySeries(series[0].t, env, np.zeros_like(env), (1.0, 0.0), region, "energy")
    fit = fit_decay(env_series, parity, window)
    return EnsembleResult(series, env, fit, seed, draws)


def no_new_highs(t, ratio, t_escape, rtol=1e-9):
    """After the escape time, no sample exceeds the maximum of the earlier late samples."""
    r = np.asarray(ratio)[np.asarray(t) >= t_escape]
    if r.size < 2:
        return True
    prev_max = np.maximum.accumulate(r)[:-1]
    return bool(np.all(r[1:] <= prev_max * (1 + rtol)))


def write_decay_csv(path, series_list, run_ids=None):
    run_ids = run_ids or list(range(len(series_list)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "t", "E_local", "E_initial", "ratio", "region", "convention"])
        for rid, s in zip(run_ids, series_list):
            for t, e, e0, r in s.samples():
                w.writerow([rid, f"{t:.17g}", f"{e:.17g}", f"{e0:.17g}", f"{r:.17g}", s.region, s.convention])


def write_fit_json(path, fit: DecayFit, extra=None):
    d = fit.to_dict()
    d["window"] = list(d["window"])
    if extra:
        d.update(extra)
    with open(path, "w") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)
        fh.write("\n")
