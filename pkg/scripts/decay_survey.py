"""Ensemble local energy decay on several presets: envelope table and power-law fits.

    python3 scripts/decay_survey.py --presets free_space convex_obstacle --draws 16
"""
import argparse
import json

import numpy as np

from wavectl.decay import ensemble_decay, no_new_highs, region_mask
from wavectl.propagator import clean_horizon
from wavectl.scenario import load_scenario


def survey(name, draws, n_samples):
    sc = load_scenario(name)
    ds = sc.decay
    zm = sc.zone_map()
    support = zm.star if sc.region is not None else zm.ball
    hz = clean_horizon(zm, support, region_mask(zm, ds.region))
    t = np.linspace(0.98 * hz / n_samples, 0.98 * hz, n_samples)
    res = ensemble_decay(sc.solver, zm, t, n_draws=draws, seed=ds.seed, region=ds.region, parity=ds.parity,
                         support=support, radius=ds.bump_radius)
    fit = res.fit
    steady = no_new_highs(t, res.envelope, fit.window[0])
    return sc, t, res, hz, steady


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--presets", nargs="+", default=["free_space", "convex_obstacle"])
    ap.add_argument("--draws", type=int, default=16)
    ap.add_argument("--samples", type=int, default=40)
    ap.add_argument("--json", default=None)
    args = ap.parse_args()

    out = {}
    for name in args.presets:
        sc, t, res, hz, steady = survey(name, args.draws, args.samples)
        f = res.fit
        print(f"\n{name}: horizon {hz:.3f}, window [{f.window[0]:.2f}, {f.window[1]:.2f}], "
              f"slope {f.slope:.2f}, C {f.C:.3g}, residual {f.residual:.3f}, onset {f.T0:.2f}, "
              f"no new highs after window start: {steady}")
        for k in range(0, len(t), max(1, len(t) // 10)):
            print(f"  t={t[k]:6.3f}  envelope={res.envelope[k]:.3e}")
        out[name] = {"t": t.tolist(), "envelope": res.envelope.tolist(), "fit": f.to_dict(), "horizon": hz}
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(out, fh, indent=2)


if __name__ == "__main__":
    main()
