"""Command-line entry points.

Every subcommand routes errors through the shared exception types, so exit
codes are predictable: 0 success, 2 configuration error, 3 data error,
4 numeric failure. Global flags: --seed overrides the config's seed list
with one seed, --out redirects artifact output, --force reruns cells whose
directories already hold a matching run, --threads sets the worker count
for independent cells (it never changes results, only wall time).
"""

from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from .corpus import (
    DEFAULT_AUDIT_RULES,
    format_audit_table,
    generate_task_suite,
    load_prompt_pool,
    save_prompt_pool,
    topic_audit,
)
from .errors import ConfigError, DataError, NumericError
from .evals import passk_curve, write_passk_csv, write_report_csv, write_report_json
from .harness import (
    BENCH_ORDER,
    DEFAULT_COUNTS,
    DEFAULT_SCALING_SIZES,
    DEFAULT_VOCAB_SIZE,
    GRID_EPOCHS,
    ExperimentSpec,
    build_setup,
    evaluate_policy,
    load_config,
    default_grid,
    report_from_dict,
    run_ablation,
    run_data_scaling,
    run_epoch_sweep,
    run_pipeline,
    run_single,
)
from .policy import bind_checkpoint, load_checkpoint
from .reward import RewardFeatureSpec, load_preferences, rm_train, save_rm, synth_preferences
from .util import canonical_json, read_jsonl, stable_seed
from .vocab import build_vocabulary


@click.group()
@click.option("--seed", type=int, default=None, help="Run a single seed instead of the config's list.")
@click.option("--out", type=click.Path(), default=None, help="Output directory for artifacts.")
@click.option("--force", is_flag=True, help="Rerun cells even if a matching run directory exists.")
@click.option("--threads", type=int, default=1, show_default=True,
              help="Workers for independent cells; never changes results.")
@click.pass_context
def cli(ctx: click.Context, seed: int | None, out: str | None, force: bool, threads: int) -> None:
    """Desk-scale RL post-training laboratory."""
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    ctx.obj = {"seed": seed, "out": out, "force": force, "threads": threads}


def _spec_from(ctx_obj: dict, config_path: str | None, default_name: str) -> ExperimentSpec:
    spec = load_config(config_path) if config_path else ExperimentSpec(name=default_name)
    if spec.name == "default" and not config_path:
        spec = replace(spec, name=default_name)
    if ctx_obj["seed"] is not None:
        spec = replace(spec, seeds=(ctx_obj["seed"],))
    if ctx_obj["out"] is not None:
        spec = replace(spec, out_dir=ctx_obj["out"])
    if spec.out_dir is None:
        spec = replace(spec, out_dir="out")
    spec.validate()
    return spec


def _echo_report(report) -> None:
    click.echo("benchmark            score   delta")
    for b in report.benchmarks:
        click.echo(f"{b:<18} {report.scores[b]:>7.1f} {report.deltas[b]:>+7.1f}")
    click.echo(f"{'average':<18} {report.display_average():>7.1f}")


@cli.command("gen-corpus")
@click.option("--arithmetic", type=int, default=DEFAULT_COUNTS["arithmetic"], show_default=True)
@click.option("--open", "open_", type=int, default=DEFAULT_COUNTS["open"], show_default=True)
@click.option("--sort", type=int, default=DEFAULT_COUNTS["sort"], show_default=True)
@click.option("--copy", "copy_", type=int, default=DEFAULT_COUNTS["copy"], show_default=True)
@click.option("--vocab-size", type=int, default=DEFAULT_VOCAB_SIZE, show_default=True)
@click.pass_obj
def gen_corpus(obj: dict, arithmetic: int, open_: int, sort: int, copy_: int, vocab_size: int) -> None:
    """Generate the task suite and write every pool as JSONL."""
    seed = obj["seed"] if obj["seed"] is not None else 0
    counts = {"arithmetic": arithmetic, "open": open_, "sort": sort, "copy": copy_}
    suite = generate_task_suite(seed, counts, vocab_size)
    out = Path(obj["out"] or "corpus")
    files = {}
    for pool in (suite.open_train, suite.in_domain_train, *suite.benchmarks.values()):
        if len(pool) == 0:
            continue
        path = out / f"{pool.name}.jsonl"
        save_prompt_pool(pool, path)
        files[pool.name] = len(pool)
        click.echo(f"wrote {path} ({len(pool)} prompts)")
    manifest = {"seed": seed, "counts": counts, "vocab_size": vocab_size, "pools": files}
    (out / "manifest.json").write_text(canonical_json(manifest) + "\n", encoding="utf-8")
    click.echo(f"wrote {out / 'manifest.json'}")


@cli.command("audit")
@click.argument("pool_path", type=click.Path(exists=True))
@click.option("--vocab-size", type=int, default=DEFAULT_VOCAB_SIZE, show_default=True)
@click.option("--rule", "rules", multiple=True, metavar="KEYWORD=BUCKET",
              help="Override audit rules; repeatable. A '*' catch-all is required.")
def audit(pool_path: str, vocab_size: int, rules: tuple[str, ...]) -> None:
    """Bucket a prompt pool by topic keywords and print the percentages."""
    vocabulary = build_vocabulary(vocab_size)
    pool = load_prompt_pool(pool_path, vocabulary)
    parsed = DEFAULT_AUDIT_RULES
    if rules:
        bad = [r for r in rules if "=" not in r]
        if bad:
            raise ConfigError(f"audit rule {bad[0]!r} must look like KEYWORD=BUCKET")
        parsed = tuple(tuple(r.split("=", 1)) for r in rules)
    click.echo(format_audit_table(topic_audit(pool, parsed)))


@cli.command("train-rm")
@click.option("--pairs", type=int, default=256, show_default=True,
              help="Synthetic preference pairs to draw from the open pool.")
@click.option("--pairs-file", type=click.Path(exists=True), default=None,
              help="Load preference pairs from JSONL instead of synthesizing.")
@click.option("--lr", type=float, default=0.3, show_default=True)
@click.option("--steps", type=int, default=400, show_default=True)
@click.option("--vocab-size", type=int, default=DEFAULT_VOCAB_SIZE, show_default=True)
@click.pass_obj
def train_rm_cmd(obj: dict, pairs: int, pairs_file: str | None, lr: float, steps: int,
                 vocab_size: int) -> None:
    """Train the preference reward model and save it with its report."""
    seed = obj["seed"] if obj["seed"] is not None else 0
    suite = generate_task_suite(seed, dict(DEFAULT_COUNTS), vocab_size)
    feat = RewardFeatureSpec(suite.vocab)
    by_id = {p.id: p for p in suite.open_train.prompts}
    if pairs_file is not None:
        pair_list = load_preferences(pairs_file, suite.vocab)
    else:
        pair_list = synth_preferences(suite.open_train, pairs, stable_seed("train-prefs", seed))
    rm, rep = rm_train(pair_list, by_id, feat, lr=lr, steps=steps, seed=stable_seed("train-rm", seed))
    out = Path(obj["out"] or "out")
    save_rm(rm, feat, out / "rm.json", meta={"pairs": len(pair_list), "lr": lr, "steps": steps})
    (out / "rm-report.json").write_text(
        canonical_json({"final_loss": rep.final_loss, "accuracy": rep.accuracy, "steps": rep.steps}) + "\n",
        encoding="utf-8",
    )
    click.echo(f"wrote {out / 'rm.json'} (loss {rep.final_loss:.4f}, accuracy {rep.accuracy:.3f})")


@cli.command("train")
@click.argument("config", type=click.Path(), required=False)
@click.pass_obj
def train_cmd(obj: dict, config: str | None) -> None:
    """Run training per the config (two stages when stage2 is present)."""
    spec = _spec_from(obj, config, "train")
    if spec.stage2 is not None:
        result = run_pipeline(spec, force=obj["force"], threads=obj["threads"])
        records = result.records
    else:
        records = {}
        for seed in spec.seeds:
            records[seed] = run_single(spec, seed, force=obj["force"])
    for seed in spec.seeds:
        rec = records[seed]
        tag = "reused" if rec.reused else "trained"
        click.echo(f"seed {seed}: {tag}, average {rec.report.display_average():.1f} -> {rec.out_dir}")


@cli.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.option("--benchmarks", default=",".join(BENCH_ORDER), show_default=True,
              help="Comma-separated benchmark names.")
@click.pass_obj
def eval_cmd(obj: dict, checkpoint: str, benchmarks: str) -> None:
    """Evaluate a policy checkpoint against the seeded lab's benchmarks."""
    seed = obj["seed"] if obj["seed"] is not None else 0
    setup = build_setup(seed)
    params, _ = load_checkpoint(checkpoint)
    policy = bind_checkpoint(params, setup.spec)
    names = tuple(b for b in benchmarks.split(",") if b)
    _, report = evaluate_policy(setup, policy, names)
    if obj["out"] is not None:
        out = Path(obj["out"])
        write_report_csv(report, out / "report.csv")
        write_report_json(report, out / "report.json")
        click.echo(f"wrote {out / 'report.csv'}")
    _echo_report(report)


@cli.command("ablate")
@click.argument("config", type=click.Path(), required=False)
@click.pass_obj
def ablate_cmd(obj: dict, config: str | None) -> None:
    """Run the optimizer x environment grid and print the comparison table."""
    spec = _spec_from(obj, config, "ablation")
    if config is None:
        # bare invocation runs the standard grid at its full duration;
        # a config scales the grid through its epochs field
        spec = replace(spec, train=replace(spec.train, epochs=GRID_EPOCHS))
    result = run_ablation(spec, force=obj["force"], threads=obj["threads"])
    click.echo(result.render())
    click.echo(f"artifacts under {Path(spec.out_dir) / spec.name}")


@cli.command("sweep-data")
@click.argument("config", type=click.Path(), required=False)
@click.option("--sizes", default=",".join(str(s) for s in DEFAULT_SCALING_SIZES),
              show_default=True, help="Comma-separated nondecreasing subset sizes.")
@click.pass_obj
def sweep_data_cmd(obj: dict, config: str | None, sizes: str) -> None:
    """Sweep training-pool size over nested subsets."""
    spec = _spec_from(obj, config, "data-scaling")
    if config is None:
        # the sweep retrains at every size, so default to one tuned cell
        spec = replace(spec, train=default_grid()["open-ppo"])
    try:
        size_list = [int(s) for s in sizes.split(",") if s]
    except ValueError:
        raise ConfigError(f"--sizes must be comma-separated integers, got {sizes!r}") from None
    result = run_data_scaling(spec, size_list, force=obj["force"], threads=obj["threads"])
    click.echo("size  average")
    for size in dict.fromkeys(result.sizes):
        click.echo(f"{size:<5} {result.averages[size]:>7.1f}")


@cli.command("sweep-epochs")
@click.argument("config", type=click.Path(), required=False)
@click.option("--epochs", "epochs_", default=None,
              help="Comma-separated checkpoint epochs (default: 0, every checkpoint, final).")
@click.pass_obj
def sweep_epochs_cmd(obj: dict, config: str | None, epochs_: str | None) -> None:
    """Evaluate saved checkpoints across training epochs without retraining."""
    spec = _spec_from(obj, config, "epoch-sweep")
    if epochs_ is None:
        step = spec.train.checkpoint_every
        eval_epochs = sorted({0, *range(step, spec.train.epochs + 1, step), spec.train.epochs})
    else:
        try:
            eval_epochs = [int(e) for e in epochs_.split(",") if e]
        except ValueError:
            raise ConfigError(f"--epochs must be comma-separated integers, got {epochs_!r}") from None
    result = run_epoch_sweep(spec, eval_epochs, force=obj["force"], threads=obj["threads"])
    click.echo("epoch  average")
    for e in result.epochs:
        avg = float(np.mean([result.per_seed[s][e].average for s in result.seeds]))
        click.echo(f"{e:<6} {avg:>7.1f}")


@cli.command("passk")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.option("--benchmark", default="arith", show_default=True)
@click.option("--n", type=int, default=16, show_default=True, help="Samples per prompt.")
@click.option("--k", "ks", default="1,2,4,8,16", show_default=True, help="Comma-separated k values.")
@click.pass_obj
def passk_cmd(obj: dict, checkpoint: str, benchmark: str, n: int, ks: str) -> None:
    """Sampled pass@k curve for a checkpoint on a verifiable benchmark."""
    seed = obj["seed"] if obj["seed"] is not None else 0
    setup = build_setup(seed)
    params, _ = load_checkpoint(checkpoint)
    policy = bind_checkpoint(params, setup.spec)
    if benchmark not in setup.benchmarks:
        raise ConfigError(f"unknown benchmark {benchmark!r} (available: {sorted(setup.benchmarks)})")
    try:
        k_list = [int(k) for k in ks.split(",") if k]
    except ValueError:
        raise ConfigError(f"--k must be comma-separated integers, got {ks!r}") from None
    curve = passk_curve(policy, setup.spec, setup.benchmarks[benchmark], n, k_list)
    if obj["out"] is not None:
        path = Path(obj["out"]) / f"passk-{benchmark}.csv"
        write_passk_csv(curve, path)
        click.echo(f"wrote {path}")
    click.echo("k   pass@k")
    for k in sorted(curve.estimates):
        click.echo(f"{k:<3} {curve.estimates[k]:.6f}")


@cli.command("report")
@click.argument("run_dir", type=click.Path(exists=True))
def report_cmd(run_dir: str) -> None:
    """Print the report stored in a run directory."""
    root = Path(run_dir)
    report_path = root / "report.json"
    if report_path.exists():
        _echo_report(report_from_dict(read_jsonl(report_path)[0]))
        return
    table_path = root / "ablation.csv"
    if table_path.exists():
        click.echo(table_path.read_text(encoding="utf-8").rstrip("\n"))
        return
    raise DataError(f"{run_dir} holds neither report.json nor ablation.csv")


def main() -> None:
    try:
        cli(standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(130)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        sys.exit(2)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        sys.exit(3)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        sys.exit(4)


if __name__ == "__main__":
    main()
