"""Generate a dataset, then run both sensitivity sweeps (lambda and batch size) on fold 1.

    python scripts/sensitivity_sweep.py --out runs/sweeps --epochs 40
"""

import argparse

from ecstfl.cli import main as cli


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/sweeps")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=40)
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()

    common = ["--out", args.out, "--seed", str(args.seed), "--jobs", str(args.jobs)]
    if cli([*common, "--run-name", "data", "gen-data"]) != 0:
        raise SystemExit("gen-data failed")
    data = f"{args.out}/data"
    runs = []
    for axis in ("lambda", "batch"):
        name = f"sweep-{axis}"
        code = cli([*common, "--run-name", name, "sweep", "--data", data, "--axis", axis,
                    "--epochs", str(args.epochs)])
        if code != 0:
            raise SystemExit(f"{axis} sweep failed with exit code {code}")
        runs.append(f"{args.out}/{name}")
    cli([*common, "--run-name", "report", "report", "--runs", *runs])


if __name__ == "__main__":
    main()
