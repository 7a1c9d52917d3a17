"""Run the two-stage pipeline (open-ended PPO, then in-domain GRPO)."""

import argparse

from deskrl.harness import pipeline_spec, run_pipeline


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="out")
    ap.add_argument("--threads", type=int, default=4)
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()

    exp = pipeline_spec(seeds=args.seeds, out_dir=args.out)
    result = run_pipeline(exp, force=args.force, threads=args.threads)
    wins = 0
    for seed, (s1, s2) in sorted(result.stage_scores("arith-hard").items()):
        wins += s2 > s1
        print(f"seed {seed}: arith-hard stage1 {s1:.1f} -> stage2 {s2:.1f}")
    print(f"stage2 improved the hard split in {wins}/{len(result.seeds)} seeds")


if __name__ == "__main__":
    main()
