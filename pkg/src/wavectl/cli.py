"""wavectl command line: simulate, decay, control, verify, rays, oracle-check.

Exit codes: 0 ok, 1 other error, 2 configuration error, 3 CFL violation,
4 K_T not a contraction, 5 verification failure.
"""
from __future__ import annotations

import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import __version__
from .control import (ControlProblem, _trace_plan_for, read_control_csv, select_T, synthesize_control, verify_control,
                      write_control_csv)
from .decay import ensemble_decay, region_mask, write_decay_csv, write_fit_json
from .errors import (BoxContamination, CflViolation, ConfigError, DegenerateCollar, IncompatibleSignal,
                     InvalidCoefficients, InvalidNesting, NotAContraction, PointInObstacle, TooLargeForOracle,
                     UnresolvedGeometry, UnsupportedVariableMetric, WavectlError)
from .propagator import (State, clean_horizon, energy, evolve, kinetic_energy, oracle_errors, potential_energy,
                         random_pair, resolve_time_step)
from .rays import escape_time_survey, write_rays_csv
from .runio import write_energy_csv, write_json, write_manifest, write_slabs, write_snapshot
from .scenario import load_scenario

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_CFL, EXIT_CONTRACTION, EXIT_VERIFY = 0, 1, 2, 3, 4, 5
CONFIG_ERRORS = (ConfigError, InvalidNesting, UnresolvedGeometry, InvalidCoefficients, DegenerateCollar,
                 PointInObstacle, UnsupportedVariableMetric, BoxContamination, TooLargeForOracle)


class VerificationFailed(WavectlError):
    pass


def _exit_code(exc):
    if isinstance(exc, CflViolation):
        return EXIT_CFL
    if isinstance(exc, NotAContraction):
        return EXIT_CONTRACTION
    if isinstance(exc, (VerificationFailed, IncompatibleSignal)):
        return EXIT_VERIFY
    if isinstance(exc, CONFIG_ERRORS):
        return EXIT_CONFIG
    return EXIT_OTHER


def _out_dir(out, command, name):
    if out:
        return Path(out)
    root = os.environ.get("WAVECTL_OUT", "runs")
    return Path(root) / f"{command}_{name}"


class Run:
    """Run directory bookkeeping: parameters, timings, and the manifest written on exit."""

    def __init__(self, command, scenario_arg, out):
        self.command = command
        self.scenario_arg = scenario_arg
        self.out_arg = out
        self.params = {}
        self.timings = {}
        self.summary = {}
        self.out = None
        self.scenario = None
        self._t0 = time.perf_counter()

    def open(self, scenario):
        self.scenario = scenario
        self.out = _out_dir(self.out_arg, self.command, scenario.name)
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out

    def tick(self, name, t0):
        self.timings[name] = time.perf_counter() - t0

    def finish(self, code, error=None):
        if self.out is None:
            return
        self.timings["total"] = time.perf_counter() - self._t0
        write_manifest(self.out, {
            "command": self.command, "version": __version__,
            "scenario": str(self.scenario_arg),
            "scenario_source": self.scenario.source if self.scenario else None,
            "output_dir": str(self.out.resolve()),
            "resolved": self.scenario.resolved() if self.scenario else None,
            "parameters": self.params, "summary": self.summary, "timings": self.timings,
            "exit_code": code, "error": error,
        })


def _run(command, scenario_arg, out, body):
    run = Run(command, scenario_arg, out)
    try:
        body(run)
    except WavectlError as e:
        code = _exit_code(e)
        click.echo(f"error: {e}", err=True)
        run.finish(code, f"{type(e).__name__}: {e}")
        sys.exit(code)
    except (ValueError, ArithmeticError, OSError) as e:
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        run.finish(EXIT_OTHER, f"{type(e).__name__}: {e}")
        sys.exit(EXIT_OTHER)
    run.finish(EXIT_OK)
    sys.exit(EXIT_OK)


def _load(run, scenario, grid, seed=None, dt=None):
    sc = load_scenario(scenario)
    if grid is not None:
        if grid <= 0:
            raise ConfigError("grid spacing must be positive", "--grid")
        sc = sc.with_grid(grid)
    if dt is not None:
        sc = replace(sc, solver=replace(sc.solver, time_step=float(dt)))
    if seed is not None:
        sc = replace(sc, control=replace(sc.control, seed=seed), decay=replace(sc.decay, seed=seed),
                     rays=replace(sc.rays, seed=seed), data=replace(sc.data, seed=seed))
    run.open(sc)
    return sc


scenario_opt = click.option("--scenario", required=True, help="Scenario TOML file or preset name.")
out_opt = click.option("--out", default=None, type=click.Path(file_okay=False),
                       help="Run directory (default: $WAVECTL_OUT/<command>_<scenario>).")
grid_opt = click.option("--grid", type=float, default=None, help="Override the grid spacing.")
seed_opt = click.option("--seed", type=int, default=None, help="Override every seed in the scenario.")


@click.group()
@click.version_option(__version__)
def main():
    """Wave propagation, local energy decay and boundary control in layered media."""


# --------------------------------------------------------------------------

@main.command()
@scenario_opt
@out_opt
@grid_opt
@seed_opt
@click.option("--T", "T", type=float, default=None, help="Duration (default: data.T of the scenario).")
@click.option("--dt", type=float, default=None, help="Explicit time step (checked against the CFL bound).")
@click.option("--snapshots", type=int, default=4, show_default=True, help="Number of snapshot dumps.")
@click.option("--energy-samples", type=int, default=100, show_default=True)
@click.option("--binary/--text", default=False, help="Snapshot format.")
@click.option("--slabs/--no-slabs", default=False, help="Record boundary slabs of the control region.")
def simulate(scenario, out, grid, seed, T, dt, snapshots, energy_samples, binary, slabs):
    """Evolve the scenario's initial data and write energy.csv plus snapshots."""
    def body(run):
        sc = _load(run, scenario, grid, seed, dt)
        t0 = time.perf_counter()
        zm = sc.zone_map()
        run.tick("rasterize", t0)
        step = resolve_time_step(sc.solver, zm)
        duration = float(T if T is not None else sc.data.T)
        if duration <= 0:
            raise ConfigError("duration must be positive", "--T")
        pair = sc.initial_data(zm)
        n_steps = int(np.ceil(duration / step - 1e-9))
        every = max(1, n_steps // max(1, energy_samples))
        record = None
        if slabs and sc.region is not None:
            record = _trace_plan_for(zm, sc.region).slab_nodes
        t0 = time.perf_counter()
        final, hist = evolve(pair.to_state(), 0.0, duration, sc.solver, zm, record=record, snapshot_every=every)
        run.tick("evolve", t0)
        d = hist.dt
        e0 = energy(pair.to_state(), zm.fluid, zm, sc.solver.obstacle_bc, time_step=d)
        rows = []
        for k, (t, u, v) in enumerate(hist.snapshots):
            st = State(u, v, t)
            p = potential_energy(u, zm, zm.fluid, sc.solver.obstacle_bc)
            kin = kinetic_energy(v, zm, zm.fluid)
            e = energy(st, zm.fluid, zm, sc.solver.obstacle_bc, time_step=d)
            rows.append((int(round(t / d)), t, p, kin, e, (e - e0) / e0 if e0 else 0.0))
        write_energy_csv(run.out / "energy.csv", rows)
        snaps = hist.snapshots
        pick = np.unique(np.linspace(0, len(snaps) - 1, max(2, snapshots)).round().astype(int))
        sdir = run.out / "snapshots"
        sdir.mkdir(exist_ok=True)
        ext = "bin" if binary else "txt"
        for i in pick:
            t, u, v = snaps[i]
            write_snapshot(sdir / f"u_{i:04d}.{ext}", u, zm.h, d, t, "u", binary)
        if record is not None:
            write_slabs(run.out / "slabs", hist, zm.grid)
        run.params.update({"T": duration, "dt": d, "n_steps": len(hist.times) - 1, "snapshot_every": every,
                           "grid": zm.h, "format": ext})
        run.summary.update({"energy_drift": rows[-1][5], "final_energy": rows[-1][4]})
        click.echo(f"{sc.name}: {len(hist.times) - 1} steps, dt={d:.4g}, relative energy drift {rows[-1][5]:.3e}")
    _run("simulate", scenario, out, body)


# --------------------------------------------------------------------------

@main.command()
@scenario_opt
@out_opt
@grid_opt
@seed_opt
@click.option("--draws", type=int, default=None, help="Number of random data draws.")
@click.option("--t-max", type=float, default=None, help="Last sample time (default: inside the clean horizon).")
def decay(scenario, out, grid, seed, draws, t_max):
    """Ensemble local energy decay with a fit of the envelope."""
    def body(run):
        sc = _load(run, scenario, grid, seed)
        ds = sc.decay
        zm = sc.zone_map()
        support = zm.star if sc.region is not None else zm.ball
        mask = region_mask(zm, ds.region)
        hz = clean_horizon(zm, support, mask)
        tm = t_max if t_max is not None else (ds.t_max if ds.t_max is not None else 0.98 * hz)
        times = np.linspace(tm / ds.n_samples, tm, ds.n_samples)
        n = draws if draws is not None else ds.n_draws
        t0 = time.perf_counter()
        res = ensemble_decay(sc.solver, zm, times, n_draws=n, seed=ds.seed, region=ds.region, parity=ds.parity,
                             support=support, radius=ds.bump_radius)
        run.tick("ensemble", t0)
        write_decay_csv(run.out / "decay.csv", res.series)
        write_fit_json(run.out / "fit.json", res.fit, {"envelope": res.envelope.tolist(), "t": times.tolist(),
                                                        "n_draws": n, "seed": ds.seed, "clean_horizon": hz})
        run.params.update({"n_draws": n, "t_max": tm, "n_samples": ds.n_samples, "region": ds.region,
                           "parity": ds.parity, "seed": ds.seed, "grid": zm.h})
        run.summary.update(res.fit.to_dict())
        what = f"slope {res.fit.slope:.3f}" if res.fit.model == "power" else f"rate {res.fit.rate:.3f}"
        click.echo(f"{sc.name}: {n} draws, {res.fit.model} fit {what}, residual {res.fit.residual:.3g}")
    _run("decay", scenario, out, body)


# --------------------------------------------------------------------------

def _control_params(sc, T, alpha, beta, tol):
    c = sc.control
    return (T if T is not None else c.T, alpha if alpha is not None else c.alpha,
            beta if beta is not None else c.beta, tol if tol is not None else c.tol)


@main.command()
@scenario_opt
@out_opt
@grid_opt
@seed_opt
@click.option("--T", "T", type=float, default=None, help="Control time (default: scenario, else ladder search).")
@click.option("--alpha", type=float, default=None)
@click.option("--beta", type=float, default=None)
@click.option("--tol", type=float, default=None)
def control(scenario, out, grid, seed, T, alpha, beta, tol):
    """Synthesize a Robin boundary control; writes control.csv and synthesis_report.json."""
    def body(run):
        sc = _load(run, scenario, grid, seed)
        if sc.region is None:
            raise ConfigError("scenario has no control region", "control_region")
        T_, a, b, tl = _control_params(sc, T, alpha, beta, tol)
        if a == 0 and b == 0:
            raise ConfigError("alpha and beta cannot both vanish", "--alpha/--beta")
        t0 = time.perf_counter()
        zm = sc.zone_map()
        prob = ControlProblem(zm, sc.region, sc.solver, sc.control.filter_fraction)
        run.tick("setup", t0)
        ladder, rhos = [], []
        if T_ is None:
            t0 = time.perf_counter()
            ladder = list(sc.control.T_ladder)
            try:
                T_, rhos = select_T(prob, ladder, sc.control.rho_target, sc.control.power_steps, sc.control.seed)
            except NotAContraction as e:
                run.summary.update({"T_ladder": ladder, "rho": e.rho})
                raise
            finally:
                run.tick("rho_search", t0)
        f = sc.initial_data(zm)
        signal, rep = synthesize_control(f, T_, a, b, prob, tl, sc.control.max_iter)
        rep.T_ladder, rep.rho_ladder = ladder, rhos
        rep.rho_power = rhos[-1] if rhos else None
        rep.timings.update(run.timings)
        write_control_csv(run.out / "control.csv", signal)
        write_json(run.out / "synthesis_report.json", rep.to_dict())
        run.params.update({"T": T_, "alpha": a, "beta": b, "tol": tl, "grid": zm.h, "seed": sc.control.seed,
                           "filter_fraction": sc.control.filter_fraction, "max_iter": sc.control.max_iter,
                           "T_ladder": ladder})
        run.summary.update({"iterations": rep.iterations, "terminal_rel_energy": rep.terminal_rel_energy,
                            "rho_estimate": rep.rho_estimate, "control_l2_norm": rep.control_l2_norm})
        click.echo(f"{sc.name}: T={T_:g}, {rep.iterations} iterations, terminal relative energy "
                   f"{rep.terminal_rel_energy:.3e}, |g| = {rep.control_l2_norm:.4g}")
    _run("control", scenario, out, body)


@main.command()
@scenario_opt
@out_opt
@grid_opt
@click.option("--control", "control_csv", required=True, type=click.Path(exists=True, dir_okay=False),
              help="control.csv from a previous control run.")
@click.option("--T", "T", type=float, default=None, help="Control time (default: last time in control.csv).")
@click.option("--alpha", type=float, default=None)
@click.option("--beta", type=float, default=None)
@click.option("--threshold", type=float, default=None, help="Maximum terminal relative energy.")
def verify(scenario, out, grid, control_csv, T, alpha, beta, threshold):
    """Re-simulate on the control region alone with the recorded Robin data."""
    def body(run):
        sc = _load(run, scenario, grid)
        if sc.region is None:
            raise ConfigError("scenario has no control region", "control_region")
        report_path = Path(control_csv).with_name("synthesis_report.json")
        stored = {}
        if report_path.exists():
            stored = json.loads(report_path.read_text())
        a = alpha if alpha is not None else stored.get("alpha", sc.control.alpha)
        b = beta if beta is not None else stored.get("beta", sc.control.beta)
        zm = sc.zone_map()
        sig = read_control_csv(control_csv, a, b, zm.h)
        T_ = T if T is not None else float(sig.times[-1])
        thr = threshold if threshold is not None else sc.control.verify_threshold
        t0 = time.perf_counter()
        f = sc.initial_data(zm)
        rep = verify_control(f, sig, T_, sc.solver, zm, sc.region)
        run.tick("verify", t0)
        out_d = rep.to_dict()
        out_d.update({"threshold": thr, "pipeline_terminal_rel_energy": stored.get("terminal_rel_energy"),
                      "passed": rep.terminal_rel_energy <= thr})
        write_json(run.out / "verification.json", out_d)
        run.params.update({"T": T_, "alpha": a, "beta": b, "threshold": thr, "grid": zm.h,
                           "control_csv": str(control_csv)})
        run.summary.update(out_d)
        click.echo(f"{sc.name}: verification terminal relative energy {rep.terminal_rel_energy:.3e} "
                   f"(threshold {thr:g})")
        if rep.terminal_rel_energy > thr:
            raise VerificationFailed(f"terminal relative energy {rep.terminal_rel_energy:.3e} exceeds {thr:g}")
    _run("verify", scenario, out, body)


# --------------------------------------------------------------------------

@main.command()
@scenario_opt
@out_opt
@seed_opt
@click.option("--n-rays", type=int, default=None)
@click.option("--t-max", type=float, default=None)
@click.option("--weights", type=click.Choice(["equal", "acoustic"]), default=None)
def rays(scenario, out, seed, n_rays, t_max, weights):
    """Ray survey: rays.csv and escape_report.json."""
    def body(run):
        sc = _load(run, scenario, None, seed)
        rs = sc.rays
        n = n_rays if n_rays is not None else rs.n_rays
        tm = t_max if t_max is not None else rs.t_max
        w = weights or rs.weights
        t0 = time.perf_counter()
        rep = escape_time_survey(sc.layout, sc.coeffs, n, tm, rs.max_splits, w, rs.seed, rs.probes)
        run.tick("survey", t0)
        write_rays_csv(run.out / "rays.csv", rep)
        write_json(run.out / "escape_report.json", rep.to_dict())
        run.params.update({"n_rays": n, "t_max": rep.t_max, "max_splits": rs.max_splits, "weights": w,
                           "seed": rs.seed, "probes": [list(p) for p in rs.probes]})
        run.summary.update(rep.to_dict())
        verdict = "nontrapping-consistent" if rep.nontrapping_consistent else "trapping flagged"
        click.echo(f"{sc.name}: {rep.n_rays} rays, max escape time {rep.max_escape_time:.4g} "
                   f"(chord bound {rep.chord_bound:.4g}), {verdict}")
    _run("rays", scenario, out, body)


@main.command("oracle-check")
@click.option("--scenario", default="unit_box", show_default=True, help="Scenario TOML file or preset name.")
@out_opt
@grid_opt
@seed_opt
@click.option("--cfl-fraction", type=float, default=0.25, show_default=True)
@click.option("--T", "T", type=float, default=1.0, show_default=True)
@click.option("--threshold", type=float, default=None, help="Fail (exit 5) above this relative error.")
def oracle_check(scenario, out, grid, seed, cfl_fraction, T, threshold):
    """Compare the time stepper against the exact spectral propagator on a small grid."""
    def body(run):
        sc = _load(run, scenario, grid, seed)
        zm = sc.zone_map()
        rng = np.random.default_rng(sc.data.seed)
        pair = random_pair(zm, rng, support=zm.fluid, radius=sc.data.radius, n_bumps=sc.data.n_bumps)
        times = np.linspace(T / 4, T, 4)
        t0 = time.perf_counter()
        errs = oracle_errors(zm, pair, times, cfl_fraction, sc.solver.obstacle_bc)
        run.tick("oracle", t0)
        res = {"times": times.tolist(), "relative_l2_error": errs.tolist(), "max_relative_error": float(errs.max()),
               "cfl_fraction": cfl_fraction, "grid_shape": list(zm.grid.shape), "threshold": threshold}
        write_json(run.out / "oracle.json", res)
        run.params.update({"T": T, "cfl_fraction": cfl_fraction, "seed": sc.data.seed, "grid": zm.h})
        run.summary.update(res)
        click.echo(f"{sc.name}: max relative L2 error {errs.max():.3e} over t in {times.tolist()}")
        if threshold is not None and errs.max() > threshold:
            raise VerificationFailed(f"oracle error {errs.max():.3e} exceeds {threshold:g}")
    _run("oracle-check", scenario, out, body)


if __name__ == "__main__":  # pragma: no cover
    main()
