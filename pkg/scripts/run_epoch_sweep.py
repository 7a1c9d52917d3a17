"""Evaluate saved checkpoints of the tuned open-ended PPO cell over epochs."""

import argparse

import numpy as np

from deskrl.harness import ExperimentSpec, default_grid, run_epoch_sweep


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, nargs="+", default=None,
                    help="checkpoint epochs to evaluate (default: 0, every saved one, final)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="out")
    ap.add_argument("--threads", type=int, default=4)
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()

    train = default_grid()["open-ppo"]
    eval_epochs = args.epochs
    if eval_epochs is None:
        step = train.checkpoint_every
        eval_epochs = sorted({0, *range(step, train.epochs + 1, step), train.epochs})

    exp = ExperimentSpec(name="epoch-sweep", train=train,
                         seeds=tuple(args.seeds), out_dir=args.out)
    result = run_epoch_sweep(exp, eval_epochs, force=args.force, threads=args.threads)
    print("epoch  mean average")
    for e in result.epochs:
        avg = float(np.mean([result.per_seed[s][e].average for s in result.seeds]))
        print(f"{e:<6} {avg:>7.1f}")


if __name__ == "__main__":
    main()
