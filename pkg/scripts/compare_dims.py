"""Compare descriptor dimension D=3 against D=8 over a few seeds on the fixture.

    python3 scripts/compare_dims.py --seeds 0 1 2
"""
import argparse

import numpy as np

from donpipe import fixtures as fx

from fixture_experiment import run_once


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--dims", type=int, nargs="+", default=[3, 8])
    ap.add_argument("--steps", type=int, default=2000)
    a = ap.parse_args()
    labeled = fx.labeled_fixture()
    print("D  seed  pck     far_bin  discrim  occ_gap  train_s")
    for dim in a.dims:
        rows = []
        for seed in a.seeds:
            r = run_once(seed, a.steps, dim, labeled=labeled)
            row = (r["pck"].fraction_correct, r["pck"].bin_fraction(1.6), r["disc"].fraction, r["occ"].gap,
                   r["train_seconds"])
            rows.append(row)
            print(f"{dim:<2d} {seed:<5d} " + "  ".join(f"{v:7.4f}" for v in row[:4]) + f"  {row[4]:6.1f}")
        m = np.mean(rows, axis=0)
        print(f"{dim:<2d} mean  " + "  ".join(f"{v:7.4f}" for v in m[:4]) + f"  {m[4]:6.1f}")


if __name__ == "__main__":
    main()
