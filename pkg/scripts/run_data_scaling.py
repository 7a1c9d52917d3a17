"""Sweep open-pool training-set size over nested subsets (size 0 = base)."""

import argparse

from deskrl.harness import (
    DEFAULT_SCALING_SIZES,
    ExperimentSpec,
    default_grid,
    run_data_scaling,
)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=list(DEFAULT_SCALING_SIZES))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="out")
    ap.add_argument("--threads", type=int, default=4)
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()

    exp = ExperimentSpec(
        name="data-scaling",
        train=default_grid()["open-ppo"],
        seeds=tuple(args.seeds),
        out_dir=args.out,
    )
    result = run_data_scaling(exp, args.sizes, force=args.force, threads=args.threads)
    print("size  mean average")
    for size in dict.fromkeys(result.sizes):
        print(f"{size:<5} {result.averages[size]:>7.1f}")


if __name__ == "__main__":
    main()
