"""Experiment drivers: lab setup, run records, and the standard studies.

A LabSetup bundles everything one seed of the laboratory needs: the task
suite, the policy feature layout, a training reward model and a disjointly
seeded judge, the base policy, and frozen benchmarks (the judged benchmark's
baseline is the base policy's own greedy decodes, so the base system scores
exactly 50 on it by construction).

On top of that sit the four standard studies:

* run_ablation   - optimizer x environment grid against the base row
* run_pipeline   - open-ended PPO stage then in-domain GRPO stage
* run_data_scaling - nested subsets of the open training pool
* run_epoch_sweep  - re-evaluate saved checkpoints, no retraining

Every run directory is self-describing (config.json, events.jsonl,
checkpoints/, report.csv, report.json, record.json) and is keyed by a hash
of its canonical config: re-running with the same hash returns the existing
record untouched unless force is set. Drivers may fan independent cells out
across threads; results and written bytes do not depend on the thread count.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .algos import (
    RewardModelSource,
    RewardSource,
    TrainConfig,
    VerifierSource,
    train_run,
    two_stage_run,
)
from .corpus import PromptPool, TaskSuite, generate_task_suite
from .errors import ConfigError, DataError
from .evals import (
    Benchmark,
    BenchResult,
    EvalReport,
    JudgeProtocol,
    ensure_disjoint,
    report_from_results,
    run_benchmark,
    write_report_csv,
    write_report_json,
)
from .policy import (
    FeatureSpec,
    PolicyParams,
    bind_checkpoint,
    greedy_response,
    init_policy,
    load_checkpoint,
)
from .reward import (
    RewardFeatureSpec,
    RewardModelParams,
    VerifierKind,
    rm_train,
    synth_preferences,
)
from .util import (
    atomic_write_text,
    canonical_json,
    config_hash,
    derive_rng,
    read_jsonl,
    stable_seed,
)

DEFAULT_COUNTS: dict[str, int] = {"arithmetic": 40, "open": 40, "sort": 20, "copy": 20}
DEFAULT_VOCAB_SIZE = 64
DEFAULT_SEEDS: tuple[int, ...] = (0, 1, 2, 3, 4)
BENCH_ORDER: tuple[str, ...] = ("open-quality", "arith", "arith-hard", "transduce")
TABLE_COLUMNS: tuple[str, ...] = ("open-quality", "arith-hard", "transduce")

# preference-model settings used by every lab build; the judge is trained on
# a second disjoint preference draw so no policy is scored by its own signal
RM_PAIRS = 256
RM_LR = 0.3
RM_STEPS = 400

_NAME_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9._-]*\Z")


# ---------------------------------------------------------------------------
# Lab setup


@dataclass
class LabSetup:
    seed: int
    suite: TaskSuite
    spec: FeatureSpec
    feat: RewardFeatureSpec
    train_rm: RewardModelParams | None
    judge_rm: RewardModelParams | None
    base: PolicyParams
    benchmarks: dict[str, Benchmark]
    base_results: dict[str, BenchResult]

    def bench_names(self, names: Sequence[str]) -> tuple[str, ...]:
        missing = [n for n in names if n not in self.benchmarks]
        if missing:
            raise ConfigError(
                f"benchmark {missing[0]!r} is not part of this lab "
                f"(available: {sorted(self.benchmarks)})"
            )
        return tuple(names)

    def base_report(self, names: Sequence[str]) -> EvalReport:
        names = self.bench_names(names)
        results = [self.base_results[n] for n in names]
        return report_from_results(results, results)


def build_setup(
    seed: int,
    counts: dict[str, int] | None = None,
    vocab_size: int = DEFAULT_VOCAB_SIZE,
    *,
    base_checkpoint: str | Path | None = None,
    rm_pairs: int = RM_PAIRS,
    rm_lr: float = RM_LR,
    rm_steps: int = RM_STEPS,
) -> LabSetup:
    """Deterministic lab for one seed: suite, reward models, base, benchmarks."""
    counts = dict(DEFAULT_COUNTS if counts is None else counts)
    suite = generate_task_suite(seed, counts, vocab_size)
    spec = FeatureSpec(suite.vocab)
    feat = RewardFeatureSpec(suite.vocab)
    if base_checkpoint is not None:
        if not Path(base_checkpoint).exists():
            raise DataError(f"base checkpoint {base_checkpoint} does not exist")
        params, _ = load_checkpoint(base_checkpoint)
        base = bind_checkpoint(params, spec)
    else:
        base = init_policy(spec, seed)

    train_rm = judge_rm = None
    if len(suite.open_train) > 0:
        by_id = {p.id: p for p in suite.open_train.prompts}
        train_pairs = synth_preferences(suite.open_train, rm_pairs, stable_seed("train-prefs", seed))
        train_rm, _ = rm_train(train_pairs, by_id, feat, lr=rm_lr, steps=rm_steps,
                               seed=stable_seed("train-rm", seed))
        judge_pairs = synth_preferences(suite.open_train, rm_pairs, stable_seed("judge-prefs", seed))
        judge_rm, _ = rm_train(judge_pairs, by_id, feat, lr=rm_lr, steps=rm_steps,
                               seed=stable_seed("judge-rm", seed))

    benchmarks: dict[str, Benchmark] = {}
    for name, pool in suite.benchmarks.items():
        ensure_disjoint(pool, [suite.open_train, suite.in_domain_train])
        if pool.kind == "open":
            if judge_rm is None:
                raise DataError(f"benchmark {name} needs a judge but no open pool was generated")
            baseline = {p.id: tuple(greedy_response(base, spec, p)) for p in pool.prompts}
            benchmarks[name] = Benchmark(name, pool, JudgeProtocol(judge_rm, feat, baseline))
        else:
            benchmarks[name] = Benchmark(name, pool, VerifierKind("exact"))

    base_results = {name: run_benchmark(base, spec, bm) for name, bm in benchmarks.items()}
    return LabSetup(
        seed=seed, suite=suite, spec=spec, feat=feat,
        train_rm=train_rm, judge_rm=judge_rm, base=base,
        benchmarks=benchmarks, base_results=base_results,
    )


def evaluate_policy(
    setup: LabSetup, policy: PolicyParams, names: Sequence[str] = BENCH_ORDER
) -> tuple[dict[str, BenchResult], EvalReport]:
    """Run the named benchmarks and report deltas against the lab's base."""
    names = setup.bench_names(names)
    results = {n: run_benchmark(policy, setup.spec, setup.benchmarks[n]) for n in names}
    report = report_from_results([results[n] for n in names], [setup.base_results[n] for n in names])
    return results, report


def eval_snapshot_fn(setup: LabSetup, names: Sequence[str] = BENCH_ORDER) -> Callable[[PolicyParams], dict]:
    def snapshot(policy: PolicyParams) -> dict:
        return evaluate_policy(setup, policy, names)[1].as_dict()
    return snapshot


def resolve_environment(setup: LabSetup, config: TrainConfig) -> tuple[PromptPool, RewardSource | None]:
    """Map an environment name onto (pool, reward source) for this lab."""
    known = ("open-train", "in-domain-train")
    if config.environment not in known:
        raise ConfigError(f"unknown environment {config.environment!r} (choose from {known})")
    if config.algo == "mle":
        if config.environment != "in-domain-train":
            raise ConfigError("mle trains on gold responses; it needs environment in-domain-train")
        return setup.suite.in_domain_train, None
    if config.environment == "open-train":
        if setup.train_rm is None:
            raise DataError("open-train needs a reward model, but the lab has no open pool")
        return setup.suite.open_train, RewardModelSource(setup.train_rm, setup.feat)
    return setup.suite.in_domain_train, VerifierSource(VerifierKind("exact"))


# ---------------------------------------------------------------------------
# Experiment specs and run records


@dataclass
class ExperimentSpec:
    """A named, seeded experiment: lab parameters plus training config(s)."""

    name: str = "default"
    train: TrainConfig = field(default_factory=TrainConfig)
    stage2: TrainConfig | None = None
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    counts: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    vocab_size: int = DEFAULT_VOCAB_SIZE
    benchmarks: tuple[str, ...] = BENCH_ORDER
    base_checkpoint: str | None = None
    out_dir: str | None = None

    def validate(self) -> None:
        if not _NAME_RE.match(self.name):
            raise ConfigError(
                f"experiment name {self.name!r} is not filesystem-safe "
                "(letters, digits, '.', '_', '-'; must not start with a separator)"
            )
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {list(self.seeds)}")
        if not self.benchmarks:
            raise ConfigError("at least one benchmark is required")
        self.train.validate()
        if self.stage2 is not None:
            self.stage2.validate()

    def as_dict(self) -> dict:
        out = {
            "name": self.name,
            "seeds": list(self.seeds),
            "counts": dict(self.counts),
            "vocab_size": self.vocab_size,
            "benchmarks": list(self.benchmarks),
            "base_checkpoint": self.base_checkpoint,
            "out_dir": self.out_dir,
            "train": self.train.to_dict(),
        }
        if self.stage2 is not None:
            out["stage2"] = self.stage2.to_dict()
        return out


_TRAIN_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_EXP_KEYS = ("name", "seeds", "counts", "vocab_size", "benchmarks", "base_checkpoint", "out_dir", "stage2")


def _coerce_train_value(key: str, value):
    ftype = _TRAIN_FIELD_TYPES[key]
    if ftype == "str":
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} must be a string, got {value!r}")
        return value
    if ftype == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} must be an integer, got {value!r}")
        return value
    # float fields accept JSON integers too
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"config key {key!r} must be a number, got {value!r}")
    return float(value)


def _train_config_from(mapping: dict, where: str = "") -> TrainConfig:
    kwargs = {}
    for key, value in mapping.items():
        if key not in _TRAIN_FIELD_TYPES:
            raise ConfigError(f"unknown config key {where}{key!r}")
        kwargs[key] = _coerce_train_value(key, value)
    return TrainConfig(**kwargs)


def spec_from_mapping(data: dict) -> ExperimentSpec:
    """Strict mapping -> ExperimentSpec; every rejection names the key.

    Training keys sit at the top level next to the experiment keys; an
    optional "stage2" object holds a second-stage training config.
    """
    if not isinstance(data, dict):
        raise ConfigError("experiment config must be a JSON object")
    train_part = {k: v for k, v in data.items() if k in _TRAIN_FIELD_TYPES}
    rest = {k: v for k, v in data.items() if k not in _TRAIN_FIELD_TYPES}
    for key in rest:
        if key not in _EXP_KEYS:
            raise ConfigError(f"unknown config key {key!r}")

    kwargs: dict = {"train": _train_config_from(train_part)}
    if "stage2" in rest and rest["stage2"] is not None:
        if not isinstance(rest["stage2"], dict):
            raise ConfigError("config key 'stage2' must be an object")
        kwargs["stage2"] = _train_config_from(rest["stage2"], where="stage2.")
    if "name" in rest:
        if not isinstance(rest["name"], str):
            raise ConfigError("config key 'name' must be a string")
        kwargs["name"] = rest["name"]
    if "seeds" in rest:
        seeds = rest["seeds"]
        if not isinstance(seeds, list) or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in seeds
        ):
            raise ConfigError("config key 'seeds' must be a list of integers")
        kwargs["seeds"] = tuple(seeds)
    if "counts" in rest:
        counts = rest["counts"]
        if not isinstance(counts, dict) or not all(
            isinstance(k, str) and isinstance(v, int) and not isinstance(v, bool)
            for k, v in counts.items()
        ):
            raise ConfigError("config key 'counts' must map family names to integers")
        kwargs["counts"] = dict(counts)
    if "vocab_size" in rest:
        if isinstance(rest["vocab_size"], bool) or not isinstance(rest["vocab_size"], int):
            raise ConfigError("config key 'vocab_size' must be an integer")
        kwargs["vocab_size"] = rest["vocab_size"]
    if "benchmarks" in rest:
        benches = rest["benchmarks"]
        if not isinstance(benches, list) or not all(isinstance(b, str) for b in benches):
            raise ConfigError("config key 'benchmarks' must be a list of names")
        kwargs["benchmarks"] = tuple(benches)
    for key in ("base_checkpoint", "out_dir"):
        if key in rest and rest[key] is not None:
            if not isinstance(rest[key], str):
                raise ConfigError(f"config key {key!r} must be a string path")
            kwargs[key] = rest[key]

    spec = ExperimentSpec(**kwargs)
    spec.validate()
    return spec


def load_config(path: str | Path) -> ExperimentSpec:
    """Load a strict experiment config; {} yields the full default spec."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return spec_from_mapping(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


@dataclass
class RunRecord:
    """What one completed (experiment, seed) cell leaves behind."""

    experiment: str
    seed: int
    config_hash: str
    log: list[dict]
    report: EvalReport
    checkpoint_paths: list[str]
    out_dir: str | None = None
    reused: bool = False
    stage1_report: EvalReport | None = None
    # in-memory checkpoints for directory-less runs; never serialized
    checkpoints: dict[int, PolicyParams] | None = None

    def as_dict(self) -> dict:
        out = {
            "experiment": self.experiment,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "epochs_logged": len(self.log),
            "checkpoints": list(self.checkpoint_paths),
            "report": self.report.as_dict(),
        }
        if self.stage1_report is not None:
            out["stage1_report"] = self.stage1_report.as_dict()
        return out


def report_from_dict(data: dict) -> EvalReport:
    return EvalReport(
        benchmarks=tuple(data["benchmarks"]),
        scores=dict(data["scores"]),
        mean_lengths=dict(data["mean_lengths"]),
        deltas=dict(data["deltas"]),
        average=float(data["average"]),
    )


def _load_record(out_dir: Path) -> RunRecord:
    data = read_jsonl(out_dir / "record.json")[0]
    log = read_jsonl(out_dir / "events.jsonl") if (out_dir / "events.jsonl").exists() else []
    stage1 = data.get("stage1_report")
    return RunRecord(
        experiment=data["experiment"],
        seed=int(data["seed"]),
        config_hash=data["config_hash"],
        log=log,
        report=report_from_dict(data["report"]),
        checkpoint_paths=list(data["checkpoints"]),
        out_dir=str(out_dir),
        reused=True,
        stage1_report=None if stage1 is None else report_from_dict(stage1),
    )


def _write_if_changed(path: Path, text: str) -> None:
    if path.exists() and path.read_text(encoding="utf-8") == text:
        return
    atomic_write_text(path, text)


# ---------------------------------------------------------------------------
# Core single-run driver


def _execute_run(
    *,
    experiment: str,
    seed: int,
    setup: LabSetup,
    config: TrainConfig,
    pool: PromptPool,
    source: RewardSource | None,
    bench_names: Sequence[str],
    payload: dict,
    out_dir: Path | None,
    force: bool = False,
    stage2: tuple[TrainConfig, PromptPool, RewardSource | None] | None = None,
) -> RunRecord:
    """Train one cell (or reuse its directory), evaluate, and persist."""
    cfg_hash = config_hash(payload)
    if out_dir is not None:
        record_path = out_dir / "record.json"
        if record_path.exists() and not force:
            existing = read_jsonl(record_path)[0]
            if existing.get("config_hash") != cfg_hash:
                raise ConfigError(
                    f"{out_dir} already holds a run with a different config "
                    f"(found {existing.get('config_hash', '?')[:12]}, "
                    f"want {cfg_hash[:12]}); pass force or pick another out dir"
                )
            return _load_record(out_dir)

    snapshot = eval_snapshot_fn(setup, bench_names)
    stage1_report = None
    if stage2 is not None:
        config2, pool2, source2 = stage2
        two = two_stage_run(
            config, config2, setup.spec, pool, source, pool2, source2,
            eval_fn=snapshot, out_dir=out_dir,
        )
        _, stage1_report = evaluate_policy(setup, two.stage1.final_policy, bench_names)
        final_policy = two.stage2.final_policy
        log = two.log
        mem_checkpoints = two.stage2.checkpoints
        if out_dir is not None:
            write_report_csv(stage1_report, out_dir / "stage1" / "report.csv")
            write_report_json(stage1_report, out_dir / "stage1" / "report.json")
    else:
        result = train_run(config, setup.spec, pool, source, init=setup.base.copy(),
                           eval_fn=snapshot, out_dir=out_dir)
        final_policy = result.final_policy
        log = result.log
        mem_checkpoints = result.checkpoints

    _, report = evaluate_policy(setup, final_policy, bench_names)
    checkpoint_paths: list[str] = []
    if out_dir is not None:
        pattern = "*/checkpoints/epoch-*.json" if stage2 is not None else "checkpoints/epoch-*.json"
        checkpoint_paths = sorted(str(p.relative_to(out_dir)) for p in out_dir.glob(pattern))

    record = RunRecord(
        experiment=experiment,
        seed=seed,
        config_hash=cfg_hash,
        log=log,
        report=report,
        checkpoint_paths=checkpoint_paths,
        out_dir=None if out_dir is None else str(out_dir),
        stage1_report=stage1_report,
        checkpoints=mem_checkpoints,
    )
    if out_dir is not None:
        atomic_write_text(out_dir / "config.json", canonical_json(payload) + "\n")
        write_report_csv(report, out_dir / "report.csv")
        write_report_json(report, out_dir / "report.json")
        atomic_write_text(out_dir / "record.json", canonical_json(record.as_dict()) + "\n")
    return record


def _run_payload(exp: ExperimentSpec, seed: int, config: TrainConfig,
                 stage2: TrainConfig | None, **extra) -> dict:
    payload = {
        "experiment": exp.name,
        "seed": seed,
        "counts": dict(exp.counts),
        "vocab_size": exp.vocab_size,
        "benchmarks": list(exp.benchmarks),
        "base_checkpoint": exp.base_checkpoint,
        "train": config.to_dict(),
    }
    if stage2 is not None:
        payload["stage2"] = stage2.to_dict()
    payload.update(extra)
    return payload


def _seed_dir(exp: ExperimentSpec, seed: int) -> Path | None:
    if exp.out_dir is None:
        return None
    return Path(exp.out_dir) / exp.name / f"seed-{seed}"


def run_single(
    exp: ExperimentSpec,
    seed: int,
    *,
    setup: LabSetup | None = None,
    force: bool = False,
) -> RunRecord:
    """One (experiment, seed) training run, two-stage when exp.stage2 is set."""
    exp.validate()
    if setup is None:
        setup = build_setup(seed, exp.counts, exp.vocab_size, base_checkpoint=exp.base_checkpoint)
    setup.bench_names(exp.benchmarks)
    config = replace(exp.train, seed=seed)
    pool, source = resolve_environment(setup, config)
    stage2 = None
    config2 = None
    if exp.stage2 is not None:
        config2 = replace(exp.stage2, seed=seed)
        pool2, source2 = resolve_environment(setup, config2)
        stage2 = (config2, pool2, source2)
    return _execute_run(
        experiment=exp.name,
        seed=seed,
        setup=setup,
        config=config,
        pool=pool,
        source=source,
        bench_names=exp.benchmarks,
        payload=_run_payload(exp, seed, config, config2),
        out_dir=_seed_dir(exp, seed),
        force=force,
        stage2=stage2,
    )


def _map_cells(tasks: dict, fn: Callable, threads: int) -> dict:
    """Apply fn over a keyed task dict, optionally threaded.

    Results are assembled in the fixed key order of the dict, so the thread
    count can change scheduling but never results.
    """
    if threads <= 1 or len(tasks) <= 1:
        return {key: fn(*args) for key, args in tasks.items()}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {key: pool.submit(fn, *args) for key, args in tasks.items()}
        return {key: futures[key].result() for key in tasks}


# ---------------------------------------------------------------------------
# Ablation grid


GRID_EPOCHS = 400
GRID_CHECKPOINT_EVERY = 100


def default_grid(epochs: int = GRID_EPOCHS) -> dict[str, TrainConfig]:
    """The standard optimizer x environment grid, one config per trained row.

    Budgets are identical by construction: every cell sees 64 rollouts per
    epoch for the same number of epochs. Learning rates are the tuned desk
    values for this policy class (see the config notes in the README).
    """
    return {
        "in-domain-ppo": TrainConfig(
            algo="ppo", environment="in-domain-train", epochs=epochs,
            lr_actor=0.25, lr_critic=0.5, batch_size=64, kl_beta=0.02,
            checkpoint_every=GRID_CHECKPOINT_EVERY,
        ),
        "open-grpo": TrainConfig(
            algo="grpo", environment="open-train", epochs=epochs,
            lr_actor=0.5, batch_size=16, group_size=4,
            checkpoint_every=GRID_CHECKPOINT_EVERY,
        ),
        "open-ppo": TrainConfig(
            algo="ppo", environment="open-train", epochs=epochs,
            lr_actor=0.25, lr_critic=0.5, batch_size=64, kl_beta=0.02,
            checkpoint_every=GRID_CHECKPOINT_EVERY,
        ),
    }


def rollouts_per_epoch(config: TrainConfig) -> int:
    return config.batch_size * (config.group_size if config.algo == "grpo" else 1)


def check_budgets(grid: dict[str, TrainConfig]) -> None:
    """All trained cells must share epochs and rollouts per epoch."""
    budgets = {name: (c.epochs, rollouts_per_epoch(c)) for name, c in grid.items()}
    distinct = set(budgets.values())
    if len(distinct) > 1:
        detail = ", ".join(f"{n}: {e} epochs x {r} rollouts" for n, (e, r) in sorted(budgets.items()))
        raise ConfigError(f"mismatched budgets across cells ({detail})")


@dataclass
class AblationResult:
    experiment: str
    seeds: tuple[int, ...]
    rows: tuple[str, ...]
    columns: tuple[str, ...]
    per_seed: dict[int, dict[str, EvalReport]]   # seed -> row -> report
    table: dict[str, dict[str, float]]           # row -> column -> seed mean
    records: dict[tuple[int, str], RunRecord]

    def render(self) -> str:
        width = max(len(r) for r in self.rows)
        head = " | ".join(f"{c:>12}" for c in self.columns)
        lines = [f"{'':<{width}} | {head}"]
        lines.append("-" * len(lines[0]))
        for row in self.rows:
            cells = " | ".join(f"{self.table[row][c]:>12.1f}" for c in self.columns)
            lines.append(f"{row:<{width}} | {cells}")
        return "\n".join(lines)


def run_ablation(
    exp: ExperimentSpec,
    grid: dict[str, TrainConfig] | None = None,
    *,
    force: bool = False,
    threads: int = 1,
) -> AblationResult:
    """Train the grid cells from the shared base and tabulate against it.

    The base row is not trained; it is the lab's own base evaluation, so it
    matches an independently produced base report exactly.
    """
    exp.validate()
    grid = default_grid(exp.train.epochs) if grid is None else dict(grid)
    if not grid:
        raise ConfigError("ablation grid must contain at least one cell")
    for name, config in grid.items():
        if not _NAME_RE.match(name):
            raise ConfigError(f"grid cell name {name!r} is not filesystem-safe")
        config.validate()
    check_budgets(grid)
    columns = tuple(c for c in TABLE_COLUMNS if c in exp.benchmarks) or exp.benchmarks

    setups = {seed: build_setup(seed, exp.counts, exp.vocab_size,
                                base_checkpoint=exp.base_checkpoint)
              for seed in exp.seeds}
    for setup in setups.values():
        setup.bench_names(exp.benchmarks)

    def one_cell(seed: int, cell: str) -> RunRecord:
        setup = setups[seed]
        config = replace(grid[cell], seed=seed)
        pool, source = resolve_environment(setup, config)
        seed_dir = _seed_dir(exp, seed)
        return _execute_run(
            experiment=exp.name,
            seed=seed,
            setup=setup,
            config=config,
            pool=pool,
            source=source,
            bench_names=exp.benchmarks,
            payload=_run_payload(exp, seed, config, None, cell=cell),
            out_dir=None if seed_dir is None else seed_dir / f"cell-{cell}",
            force=force,
        )

    tasks = {(seed, cell): (seed, cell) for seed in exp.seeds for cell in grid}
    records = _map_cells(tasks, one_cell, threads)

    rows = ("base", *grid)
    per_seed: dict[int, dict[str, EvalReport]] = {}
    for seed in exp.seeds:
        per_seed[seed] = {"base": setups[seed].base_report(exp.benchmarks)}
        for cell in grid:
            per_seed[seed][cell] = records[(seed, cell)].report
    table = {
        row: {
            col: float(np.mean([per_seed[s][row].scores[col] for s in exp.seeds]))
            for col in columns
        }
        for row in rows
    }
    result = AblationResult(
        experiment=exp.name, seeds=tuple(exp.seeds), rows=rows, columns=columns,
        per_seed=per_seed, table=table, records=records,
    )
    if exp.out_dir is not None:
        root = Path(exp.out_dir) / exp.name
        lines = ["row," + ",".join(columns)]
        for row in rows:
            lines.append(row + "," + ",".join(f"{table[row][c]:.1f}" for c in columns))
        _write_if_changed(root / "ablation.csv", "\n".join(lines) + "\n")
        detail = {
            "experiment": exp.name,
            "seeds": list(exp.seeds),
            "columns": list(columns),
            "rows": list(rows),
            "per_seed": {
                str(seed): {row: per_seed[seed][row].as_dict() for row in rows}
                for seed in exp.seeds
            },
            "table": table,
        }
        _write_if_changed(root / "ablation.json", canonical_json(detail) + "\n")
    return result


# ---------------------------------------------------------------------------
# Two-stage pipeline


PIPELINE_STAGE1_EPOCHS = 100
PIPELINE_STAGE2_EPOCHS = 300


def default_pipeline() -> tuple[TrainConfig, TrainConfig]:
    """Open-ended PPO stage, then in-domain GRPO specialization stage.

    The two stages together spend the same rollout budget as one grid cell.
    """
    stage1 = TrainConfig(
        algo="ppo", environment="open-train", epochs=PIPELINE_STAGE1_EPOCHS,
        lr_actor=0.25, lr_critic=0.5, batch_size=64, kl_beta=0.02,
        checkpoint_every=25,
    )
    stage2 = TrainConfig(
        algo="grpo", environment="in-domain-train", epochs=PIPELINE_STAGE2_EPOCHS,
        lr_actor=0.5, batch_size=16, group_size=4, checkpoint_every=75,
    )
    return stage1, stage2


def pipeline_spec(
    name: str = "pipeline",
    seeds: Sequence[int] = DEFAULT_SEEDS,
    out_dir: str | None = None,
) -> ExperimentSpec:
    stage1, stage2 = default_pipeline()
    return ExperimentSpec(name=name, train=stage1, stage2=stage2,
                          seeds=tuple(seeds), out_dir=out_dir)


@dataclass
class PipelineResult:
    experiment: str
    seeds: tuple[int, ...]
    records: dict[int, RunRecord]

    def stage_scores(self, benchmark: str) -> dict[int, tuple[float, float]]:
        """Per seed: (stage1 score, stage2 score) on one benchmark."""
        out = {}
        for seed, rec in self.records.items():
            if rec.stage1_report is None:
                raise DataError(f"run for seed {seed} has no stage-1 report")
            out[seed] = (rec.stage1_report.scores[benchmark], rec.report.scores[benchmark])
        return out


def run_pipeline(
    exp: ExperimentSpec,
    *,
    force: bool = False,
    threads: int = 1,
) -> PipelineResult:
    """The two-stage experiment across seeds; exp.stage2 must be set."""
    exp.validate()
    if exp.stage2 is None:
        raise ConfigError("run_pipeline needs an experiment spec with a stage2 config")
    setups = {seed: build_setup(seed, exp.counts, exp.vocab_size,
                                base_checkpoint=exp.base_checkpoint)
              for seed in exp.seeds}
    tasks = {seed: (exp, seed) for seed in exp.seeds}

    def one_seed(spec: ExperimentSpec, seed: int) -> RunRecord:
        return run_single(spec, seed, setup=setups[seed], force=force)

    records = _map_cells(tasks, one_seed, threads)
    return PipelineResult(experiment=exp.name, seeds=tuple(exp.seeds), records=records)


# ---------------------------------------------------------------------------
# Data-size scaling


DEFAULT_SCALING_SIZES: tuple[int, ...] = (0, 5, 10, 20, 40)


@dataclass
class DataScalingResult:
    experiment: str
    seeds: tuple[int, ...]
    sizes: tuple[int, ...]
    per_seed: dict[int, dict[int, EvalReport]]   # seed -> size -> report
    averages: dict[int, float]                   # size -> seed-mean average score
    records: dict[tuple[int, int], RunRecord]


def scaling_subset(pool: PromptPool, size: int, seed: int) -> PromptPool:
    """The first `size` prompts of a seed-keyed shuffle; nested across sizes."""
    if size > len(pool):
        raise DataError(f"subset size {size} exceeds pool {pool.name} ({len(pool)} prompts)")
    order = derive_rng("data-subset", seed).permutation(len(pool))
    chosen = tuple(pool.prompts[i] for i in order[:size])
    return PromptPool(f"{pool.name}-n{size}", pool.kind, chosen, pool.vocab)


def run_data_scaling(
    exp: ExperimentSpec,
    sizes: Sequence[int] = DEFAULT_SCALING_SIZES,
    *,
    force: bool = False,
    threads: int = 1,
) -> DataScalingResult:
    """Retrain exp.train on nested subsets of its training pool per size.

    Size 0 runs no training and therefore reports the base policy. The
    reward model is the lab's standard one (trained on the full open pool)
    at every size, so the sweep varies only the RL prompt set.
    """
    exp.validate()
    sizes = tuple(int(s) for s in sizes)
    if not sizes:
        raise ConfigError("at least one subset size is required")
    if any(s < 0 for s in sizes):
        raise ConfigError(f"subset sizes must be non-negative, got {list(sizes)}")
    if any(a > b for a, b in zip(sizes, sizes[1:])):
        raise ConfigError(f"subset sizes must be nondecreasing, got {list(sizes)}")
    if exp.stage2 is not None:
        raise ConfigError("data scaling sweeps a single-stage config")

    setups = {seed: build_setup(seed, exp.counts, exp.vocab_size,
                                base_checkpoint=exp.base_checkpoint)
              for seed in exp.seeds}
    for setup in setups.values():
        setup.bench_names(exp.benchmarks)
        full_pool, _ = resolve_environment(setup, exp.train)
        if sizes[-1] > len(full_pool):
            raise DataError(
                f"subset size {sizes[-1]} exceeds pool {full_pool.name} ({len(full_pool)} prompts)"
            )

    def one_size(seed: int, size: int) -> RunRecord:
        setup = setups[seed]
        config = replace(exp.train, seed=seed, epochs=0 if size == 0 else exp.train.epochs)
        pool, source = resolve_environment(setup, config)
        if size > 0:
            pool = scaling_subset(pool, size, seed)
        seed_dir = _seed_dir(exp, seed)
        return _execute_run(
            experiment=exp.name,
            seed=seed,
            setup=setup,
            config=config,
            pool=pool,
            source=source,
            bench_names=exp.benchmarks,
            payload=_run_payload(exp, seed, config, None, subset_size=size),
            out_dir=None if seed_dir is None else seed_dir / f"size-{size}",
            force=force,
        )

    tasks = {(seed, size): (seed, size) for seed in exp.seeds for size in dict.fromkeys(sizes)}
    records = _map_cells(tasks, one_size, threads)

    per_seed = {
        seed: {size: records[(seed, size)].report for size in dict.fromkeys(sizes)}
        for seed in exp.seeds
    }
    averages = {
        size: float(np.mean([per_seed[seed][size].average for seed in exp.seeds]))
        for size in dict.fromkeys(sizes)
    }
    result = DataScalingResult(
        experiment=exp.name, seeds=tuple(exp.seeds), sizes=sizes,
        per_seed=per_seed, averages=averages, records=records,
    )
    if exp.out_dir is not None:
        root = Path(exp.out_dir) / exp.name
        lines = ["size,average"]
        for size in dict.fromkeys(sizes):
            lines.append(f"{size},{averages[size]:.1f}")
        _write_if_changed(root / "scaling.csv", "\n".join(lines) + "\n")
        detail = {
            "experiment": exp.name,
            "seeds": list(exp.seeds),
            "sizes": list(sizes),
            "per_seed": {
                str(seed): {str(size): rep.as_dict() for size, rep in per_seed[seed].items()}
                for seed in exp.seeds
            },
            "averages": {str(size): avg for size, avg in averages.items()},
        }
        _write_if_changed(root / "scaling.json", canonical_json(detail) + "\n")
    return result


# ---------------------------------------------------------------------------
# Epoch sweep


@dataclass
class EpochSweepResult:
    experiment: str
    seeds: tuple[int, ...]
    epochs: tuple[int, ...]
    per_seed: dict[int, dict[int, EvalReport]]   # seed -> epoch -> report
    records: dict[int, RunRecord]


def _checkpoint_report(setup: LabSetup, record: RunRecord, epoch: int,
                       bench_names: Sequence[str]) -> EvalReport:
    if record.out_dir is not None:
        path = Path(record.out_dir) / "checkpoints" / f"epoch-{epoch:04d}.json"
        if not path.exists():
            raise DataError(
                f"missing checkpoint for epoch {epoch} at {path} "
                "(checkpoints are written every checkpoint_every epochs and at the end)"
            )
        params, _ = load_checkpoint(path)
        policy = bind_checkpoint(params, setup.spec)
    else:
        if record.checkpoints is None or epoch not in record.checkpoints:
            raise DataError(f"missing checkpoint for epoch {epoch} (in-memory run)")
        policy = record.checkpoints[epoch]
    return evaluate_policy(setup, policy, bench_names)[1]


def run_epoch_sweep(
    exp: ExperimentSpec,
    eval_epochs: Sequence[int],
    *,
    force: bool = False,
    threads: int = 1,
) -> EpochSweepResult:
    """Evaluate saved checkpoints of exp.train at the requested epochs.

    Training happens (or is reused) once per seed; the sweep itself only
    reads checkpoints, so evaluating an epoch never depends on later ones.
    """
    exp.validate()
    if exp.stage2 is not None:
        raise ConfigError("epoch sweeps walk a single-stage run")
    epochs = sorted(set(int(e) for e in eval_epochs))
    if not epochs:
        raise ConfigError("at least one eval epoch is required")
    if epochs[0] < 0 or epochs[-1] > exp.train.epochs:
        raise ConfigError(
            f"eval epochs must lie in [0, {exp.train.epochs}], got {list(epochs)}"
        )

    setups = {seed: build_setup(seed, exp.counts, exp.vocab_size,
                                base_checkpoint=exp.base_checkpoint)
              for seed in exp.seeds}
    tasks = {seed: (seed,) for seed in exp.seeds}

    def one_seed(seed: int) -> RunRecord:
        return run_single(exp, seed, setup=setups[seed], force=force)

    records = _map_cells(tasks, one_seed, threads)
    per_seed: dict[int, dict[int, EvalReport]] = {}
    for seed in exp.seeds:
        per_seed[seed] = {
            e: _checkpoint_report(setups[seed], records[seed], e, exp.benchmarks)
            for e in epochs
        }

    result = EpochSweepResult(
        experiment=exp.name, seeds=tuple(exp.seeds), epochs=tuple(epochs),
        per_seed=per_seed, records=records,
    )
    if exp.out_dir is not None:
        root = Path(exp.out_dir) / exp.name
        lines = ["epoch,average"]
        for e in epochs:
            avg = float(np.mean([per_seed[s][e].average for s in exp.seeds]))
            lines.append(f"{e},{avg:.1f}")
        _write_if_changed(root / "epochs.csv", "\n".join(lines) + "\n")
        detail = {
            "experiment": exp.name,
            "seeds": list(exp.seeds),
            "epochs": list(epochs),
            "per_seed": {
                str(seed): {str(e): rep.as_dict() for e, rep in per_seed[seed].items()}
                for seed in exp.seeds
            },
        }
        _write_if_changed(root / "epochs.json", canonical_json(detail) + "\n")
    return result
