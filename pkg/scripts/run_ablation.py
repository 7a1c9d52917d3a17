"""Run the default optimizer x environment grid and print the table."""

import argparse

from deskrl.harness import ExperimentSpec, default_grid, run_ablation


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="out")
    ap.add_argument("--threads", type=int, default=4)
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()

    exp = ExperimentSpec(name="ablation", seeds=tuple(args.seeds), out_dir=args.out)
    result = run_ablation(exp, default_grid(), force=args.force, threads=args.threads)
    print(result.render())
    for seed in result.seeds:
        row = {name: round(result.per_seed[seed][name].scores["open-quality"], 1)
               for name in result.rows}
        print(f"seed {seed} open-quality by row: {row}")


if __name__ == "__main__":
    main()
