"""Train baseline and Bayesian extractors on two synthetic domains and print the EER grids.

    python3 demos/run_grid.py [--seeds N] [--out DIR]

With one seed the grid files (scores and reports) are written to --out.
With several seeds the script also prints the median EER per system.
"""

import argparse
from dataclasses import replace

from bxv.experiment import GridConfig, median_eers, run_grid
from bxv.synthdata import SynthSpec
from bxv.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=1)
    ap.add_argument("--out", default="grid_out")
    args = ap.parse_args()

    results = []
    for seed in range(args.seeds):
        cfg = GridConfig(synth=replace(SynthSpec(), seed=seed), train=replace(TrainConfig(), seed=seed))
        res = run_grid(cfg, args.out if args.seeds == 1 else None, log=print)
        results.append(res)
        for name in ("in_domain", "out_of_domain"):
            print(f"-- seed {seed} {name}")
            print(res.report(name), end="")

    if args.seeds > 1:
        print("-- median EER over seeds")
        for (grid, system), eer in sorted(median_eers(results).items()):
            print(f"{grid:14s} {system:9s} {100 * eer:.2f}%")


if __name__ == "__main__":
    main()
