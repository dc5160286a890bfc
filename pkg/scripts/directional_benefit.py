"""Pooled 5-fold UAR/WAR of softmax alone vs softmax + EC-STFL over several seeds.

    python scripts/directional_benefit.py --seeds 0 1 2 3 4 --out benefit.csv
"""

import argparse
import csv
import time

import numpy as np

from ecstfl.data import DatasetSpec
from ecstfl.experiments import cross_validate
from ecstfl.model import TrainConfig


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--n", type=int, default=700)
    parser.add_argument("--lam", type=float, default=10.0)
    parser.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    parser.add_argument("--out", default="directional_benefit.csv")
    args = parser.parse_args()

    rows = []
    t0 = time.perf_counter()
    for seed in args.seeds:
        spec = DatasetSpec(n_clips=args.n, seed=seed)
        base, _ = cross_validate(spec, TrainConfig(seed=seed, loss_mode="softmax", lam=0.0, epochs=args.epochs))
        ours, _ = cross_validate(spec, TrainConfig(seed=seed, lam=args.lam, epochs=args.epochs))
        rows.append((seed, base.uar, base.war, ours.uar, ours.war))
        print(f"seed {seed}: UAR {base.uar_pct:.2f} -> {ours.uar_pct:.2f}   "
              f"WAR {base.war_pct:.2f} -> {ours.war_pct:.2f}   [{time.perf_counter() - t0:.0f} s]", flush=True)

    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["seed", "uar_softmax", "war_softmax", "uar_ecstfl", "war_ecstfl"])
        w.writerows(rows)
    gain = 100 * (np.array([r[3] for r in rows]) - np.array([r[1] for r in rows]))
    print(f"UAR gain: mean {gain.mean():+.2f} pp, min {gain.min():+.2f} pp, max {gain.max():+.2f} pp")


if __name__ == "__main__":
    main()
