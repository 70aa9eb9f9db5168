"""Time stepper against the exact spectral propagator on the unit box, over time-step fractions.

The oracle is exact in time, so the error column measures leapfrog phase error
and should fall by about 4 per halving of dt.

    python3 scripts/oracle_convergence.py --n 24
"""
import argparse

import numpy as np

from wavectl.propagator import oracle_errors, random_pair, unit_box_map


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=24, help="interior nodes per side")
    ap.add_argument("--radius", type=float, default=0.4, help="bump radius of the random data")
    ap.add_argument("--T", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    zm = unit_box_map(args.n)
    pair = random_pair(zm, np.random.default_rng(args.seed), support=zm.fluid, radius=args.radius)
    prev = None
    print(f"{'cfl fraction':>12} {'rel L2 error':>13} {'ratio':>6}")
    for frac in (1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125):
        err = float(oracle_errors(zm, pair, [args.T], frac)[0])
        ratio = f"{prev / err:6.2f}" if prev else ""
        print(f"{frac:12.5f} {err:13.3e} {ratio}")
        prev = err


if __name__ == "__main__":
    main()
