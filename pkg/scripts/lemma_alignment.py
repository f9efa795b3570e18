"""Angle between trained loss vectors and their preferences on the two-quadratic toy.

Minimising the Tchebycheff loss for an interior preference should land on the
front point whose loss vector points along the preference.
"""

import argparse

import numpy as np

from hetpfl.toy import alignment_study, front_point


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--prefs", type=int, default=9)
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()

    seeds = tuple(int(s) for s in args.seeds.split(","))
    angles = alignment_study(args.prefs, seeds)
    first = np.linspace(0.1, 0.9, args.prefs)
    print(f"{'lambda1':>8} {'front f1':>9} {'front f2':>9} {'median deg':>11} {'max deg':>9}")
    for j, l1 in enumerate(first):
        f = front_point((l1, 1 - l1))
        print(f"{l1:>8.3f} {f[0]:>9.4f} {f[1]:>9.4f} {np.median(angles[:, j]):>11.5f} {angles[:, j].max():>9.5f}")
    print(f"worst median deviation {np.median(angles, axis=0).max():.5f} deg over seeds {list(seeds)}")


if __name__ == "__main__":
    main()
