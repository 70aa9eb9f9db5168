"""Escape-time surveys: convex obstacle, two discs and the layered transmission preset.

    python3 scripts/ray_survey.py --n-rays 10000
"""
import argparse
import json

from wavectl.rays import escape_time_survey
from wavectl.scenario import load_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--presets", nargs="+", default=["convex_obstacle", "two_disc", "fig4a"])
    ap.add_argument("--n-rays", type=int, default=2000)
    ap.add_argument("--weights", choices=["equal", "acoustic"], default="equal")
    ap.add_argument("--json", default=None)
    args = ap.parse_args()

    out = {}
    for name in args.presets:
        sc = load_scenario(name)
        rs = sc.rays
        rep = escape_time_survey(sc.layout, sc.coeffs, args.n_rays, rs.t_max, rs.max_splits, args.weights,
                                 rs.seed, rs.probes)
        d = rep.to_dict()
        out[name] = d
        print(f"{name:16s} rays {rep.n_rays:6d}  max escape {rep.max_escape_time:7.3f}  "
              f"chord bound {rep.chord_bound:6.3f}  t_max {rep.t_max:6.2f}  outcomes {d['outcome_counts']}  "
              f"census {rep.census_fraction:.2e}  nontrapping-consistent {rep.nontrapping_consistent}")
        if rep.trapped_census:
            top = sorted(rep.trapped_census.items(), key=lambda kv: -kv[1])[:5]
            print("                 heaviest survivors (ray, weight):", [(k, round(v, 4)) for k, v in top])
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(out, fh, indent=2)


if __name__ == "__main__":
    main()
