"""Benchmark evaluation: greedy scoring, pass@k, judged win rates, reports.

Verifiable benchmarks score greedy decodes as percent passing. Open-ended
benchmarks are judged: a reward model scores the candidate against a fixed
baseline system and the score is a length-controlled win rate. pass@k uses
the standard unbiased estimator over per-prompt (n, c) tallies. All decoding
here is deterministic: greedy for scores, per-prompt derived seeds for
pass@k samples, so repeated evaluation gives identical reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Prompt, PromptPool
from .errors import ConfigError, DataError
from .policy import FeatureSpec, PolicyParams, greedy_response, sample_response
from .reward import (
    RewardFeatureSpec,
    RewardModelParams,
    VerifierKind,
    rm_score,
    verify,
)
from .util import atomic_write_text, dumps_compact, stable_seed


# ---------------------------------------------------------------------------
# Benchmarks


@dataclass(frozen=True)
class JudgeProtocol:
    """Scorer for open-ended pools: a judge model plus frozen baseline decodes.

    The judge must be trained on preference data disjoint from the policy's
    training reward model; the harness enforces that by seeding. Baseline
    responses are keyed by prompt id and fixed once, so every system is
    compared against the same reference outputs.
    """

    judge: RewardModelParams
    feat: RewardFeatureSpec
    baseline: dict[str, tuple[int, ...]]


Scorer = VerifierKind | JudgeProtocol


@dataclass(frozen=True)
class Benchmark:
    name: str
    pool: PromptPool
    scorer: Scorer
    samples_per_prompt: int = 1
    decode_seed: int = 0

    def __post_init__(self):
        if self.samples_per_prompt < 1:
            raise ConfigError("samples_per_prompt must be >= 1")
        if isinstance(self.scorer, VerifierKind):
            if self.pool.kind == "open":
                raise ConfigError(f"benchmark {self.name}: open pool needs a judge, not a verifier")
        else:
            if self.pool.kind != "open":
                raise ConfigError(f"benchmark {self.name}: verifiable pool needs a verifier scorer")
            missing = [p.id for p in self.pool.prompts if p.id not in self.scorer.baseline]
            if missing:
                raise DataError(
                    f"benchmark {self.name}: baseline outcomes missing for {missing[:3]}"
                )


def ensure_disjoint(benchmark_pool: PromptPool, train_pools: Sequence[PromptPool]) -> None:
    """Benchmark prompts must not appear in any training pool (by id)."""
    bench_ids = {p.id for p in benchmark_pool.prompts}
    for pool in train_pools:
        overlap = bench_ids & {p.id for p in pool.prompts}
        if overlap:
            raise DataError(
                f"benchmark pool {benchmark_pool.name} shares {len(overlap)} prompt ids "
                f"with training pool {pool.name} (e.g. {sorted(overlap)[:3]})"
            )


@dataclass(frozen=True)
class Outcome:
    prompt_id: str
    response: tuple[int, ...]
    passed: int | None = None      # verifier benchmarks
    judge_score: float | None = None  # judged benchmarks

    @property
    def length(self) -> int:
        return len(self.response)


@dataclass(frozen=True)
class BenchResult:
    benchmark: str
    score: float
    outcomes: tuple[Outcome, ...]
    lc_fallback: bool = False

    @property
    def lengths(self) -> list[int]:
        return [o.length for o in self.outcomes]

    def mean_length(self) -> float:
        return float(np.mean(self.lengths))


def run_benchmark(policy: PolicyParams, spec: FeatureSpec, benchmark: Benchmark) -> BenchResult:
    """Greedy-decode every prompt and score the benchmark.

    Verifiable pools: score = percent of prompts whose final answer passes
    the verifier. Judged pools: score = length-controlled win rate of the
    greedy decodes against the benchmark's frozen baseline outputs.
    """
    if len(benchmark.pool) == 0:
        raise DataError(f"benchmark {benchmark.name} has an empty pool")
    vocabulary = benchmark.pool.vocab
    if isinstance(benchmark.scorer, VerifierKind):
        outcomes = []
        for prompt in benchmark.pool.prompts:
            resp = tuple(greedy_response(policy, spec, prompt))
            outcomes.append(Outcome(prompt.id, resp, passed=verify(vocabulary, prompt, resp, benchmark.scorer)))
        score = 100.0 * sum(o.passed for o in outcomes) / len(outcomes)
        return BenchResult(benchmark.name, score, tuple(outcomes))

    proto = benchmark.scorer
    candidate: dict[str, tuple[int, ...]] = {}
    outcomes = []
    for prompt in benchmark.pool.prompts:
        resp = tuple(greedy_response(policy, spec, prompt))
        candidate[prompt.id] = resp
        outcomes.append(Outcome(prompt.id, resp, judge_score=rm_score(proto.judge, proto.feat, prompt, resp)))
    prompts_by_id = {p.id: p for p in benchmark.pool.prompts}
    rate = lc_win_rate(candidate, proto.baseline, proto.judge, proto.feat, prompts_by_id)
    return BenchResult(benchmark.name, rate.value, tuple(outcomes), lc_fallback=rate.fallback)


# ---------------------------------------------------------------------------
# pass@k


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k estimate 1 - C(n-c, k)/C(n, k) in safe product form."""
    if not 0 <= c <= n:
        raise ConfigError(f"need 0 <= c <= n, got c={c} n={n}")
    if not 1 <= k <= n:
        raise ConfigError(f"need 1 <= k <= n, got k={k} n={n}")
    if n - c < k:
        return 1.0
    prod = 1.0
    for i in range(k):
        prod *= (n - c - i) / (n - i)
    return 1.0 - prod


@dataclass(frozen=True)
class PassKCurve:
    benchmark: str
    tallies: tuple[tuple[str, int, int], ...]  # (prompt_id, n, c)
    estimates: dict[int, float]

    def __post_init__(self):
        for pid, n, c in self.tallies:
            if not 0 <= c <= n:
                raise DataError(f"tally for {pid}: c={c} outside [0, n={n}]")


def passk_curve(
    policy: PolicyParams,
    spec: FeatureSpec,
    benchmark: Benchmark,
    n: int,
    ks: Sequence[int],
) -> PassKCurve:
    """Sample n responses per prompt and average pass@k over prompts."""
    if not isinstance(benchmark.scorer, VerifierKind):
        raise ConfigError(f"pass@k needs a verifiable benchmark, got judged {benchmark.name}")
    if len(benchmark.pool) == 0:
        raise DataError(f"benchmark {benchmark.name} has an empty pool")
    ks = sorted(set(int(k) for k in ks))
    if not ks:
        raise ConfigError("at least one k is required")
    if ks[0] < 1 or ks[-1] > n:
        raise ConfigError(f"every k must lie in [1, n={n}], got {ks}")
    vocabulary = benchmark.pool.vocab
    tallies = []
    for prompt in benchmark.pool.prompts:
        c = 0
        for i in range(n):
            seed = stable_seed("bench-sample", benchmark.decode_seed, prompt.id, i)
            resp = sample_response(policy, spec, prompt, rng_seed=seed)
            c += verify(vocabulary, prompt, resp, benchmark.scorer)
        tallies.append((prompt.id, n, c))
    estimates = {
        k: float(np.mean([pass_at_k(n, c, k) for _, n, c in tallies])) for k in ks
    }
    return PassKCurve(benchmark.name, tuple(tallies), estimates)


# ---------------------------------------------------------------------------
# Length statistics


@dataclass(frozen=True)
class LengthStats:
    mean: float
    median: float
    p90: float


def length_stats(lengths: Sequence[int]) -> LengthStats:
    """Mean/median/90th percentile of response lengths (terminator included)."""
    if len(lengths) == 0:
        raise DataError("length_stats needs at least one outcome")
    arr = np.asarray(lengths, dtype=float)
    return LengthStats(
        mean=float(arr.mean()),
        median=float(np.median(arr)),
        p90=float(np.percentile(arr, 90)),
    )


# ---------------------------------------------------------------------------
# Length-controlled win rate


@dataclass(frozen=True)
class LCRate:
    value: float
    raw: float
    fallback: bool


def _logistic_fit(features: np.ndarray, targets: np.ndarray, steps: int = 600, lr: float = 1.0) -> np.ndarray:
    """Full-batch gradient descent on mean binary cross-entropy, zero init.

    Zero-variance feature columns are expected to be removed by the caller;
    the first column is the intercept.
    """
    w = np.zeros(features.shape[1])
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(features @ w)))
        w -= lr * (features.T @ (p - targets)) / len(targets)
    return w


def lc_fit_win_probability(
    score_diffs: np.ndarray, length_diffs: np.ndarray, wins: np.ndarray
) -> LCRate:
    """Fit win ~ logistic(score diff, length diff); evaluate at length diff 0.

    Columns with zero variance carry no information and are dropped before
    the fit (an intercept always remains). A non-finite fit falls back to the
    raw win rate, flagged.
    """
    n = len(wins)
    raw = 100.0 * float(np.mean(wins))
    cols = [np.ones(n)]
    # standardized copies; remember how to express "length diff = 0"
    keep_score = float(np.std(score_diffs)) > 0.0
    keep_len = float(np.std(length_diffs)) > 0.0
    if keep_score:
        s_mu, s_sd = float(np.mean(score_diffs)), float(np.std(score_diffs))
        cols.append((score_diffs - s_mu) / s_sd)
    if keep_len:
        l_mu, l_sd = float(np.mean(length_diffs)), float(np.std(length_diffs))
        cols.append((length_diffs - l_mu) / l_sd)
    design = np.column_stack(cols)
    w = _logistic_fit(design, wins)
    if not np.all(np.isfinite(w)):
        return LCRate(value=raw, raw=raw, fallback=True)
    # evaluate per prompt at its own score difference but length difference 0
    z = np.full(n, w[0])
    col = 1
    if keep_score:
        z += w[col] * (score_diffs - s_mu) / s_sd
        col += 1
    if keep_len:
        z += w[col] * (0.0 - l_mu) / l_sd
    value = 100.0 * float(np.mean(1.0 / (1.0 + np.exp(-z))))
    return LCRate(value=value, raw=raw, fallback=False)


def lc_win_rate(
    candidate: dict[str, tuple[int, ...]],
    baseline: dict[str, tuple[int, ...]],
    judge: RewardModelParams,
    feat: RewardFeatureSpec,
    prompts_by_id: dict[str, Prompt],
) -> LCRate:
    """Length-controlled judged win rate of candidate outputs over baseline.

    Per prompt the judge scores both responses; a win is a strictly higher
    candidate score (ties count one half). Identical output sets yield
    exactly 50.0: every feature column is constant, the intercept's gradient
    vanishes at the half targets, and the fit never leaves zero.
    """
    if set(candidate) != set(baseline):
        raise DataError("candidate and baseline cover different prompt sets")
    if not candidate:
        raise DataError("lc_win_rate needs at least one prompt")
    ids = sorted(candidate)
    score_diffs, length_diffs, wins = [], [], []
    for pid in ids:
        prompt = prompts_by_id[pid]
        s_c = rm_score(judge, feat, prompt, candidate[pid])
        s_b = rm_score(judge, feat, prompt, baseline[pid])
        score_diffs.append(s_c - s_b)
        length_diffs.append(len(candidate[pid]) - len(baseline[pid]))
        wins.append(1.0 if s_c > s_b else (0.0 if s_c < s_b else 0.5))
    return lc_fit_win_probability(
        np.asarray(score_diffs), np.asarray(length_diffs, dtype=float), np.asarray(wins)
    )


# ---------------------------------------------------------------------------
# Aggregate reports


@dataclass(frozen=True)
class EvalReport:
    benchmarks: tuple[str, ...]
    scores: dict[str, float]
    mean_lengths: dict[str, float]
    deltas: dict[str, float]
    average: float

    def display_average(self) -> float:
        return round(self.average, 1)

    def as_dict(self) -> dict:
        # nan marks an unknown length; JSON gets null there, the csv an empty cell
        lengths = {
            b: (None if math.isnan(self.mean_lengths[b]) else self.mean_lengths[b])
            for b in self.benchmarks
        }
        return {
            "benchmarks": list(self.benchmarks),
            "scores": {b: self.scores[b] for b in self.benchmarks},
            "mean_lengths": lengths,
            "deltas": {b: self.deltas[b] for b in self.benchmarks},
            "average": self.average,
        }


def aggregate_report(
    scores: dict[str, float],
    base_scores: dict[str, float],
    mean_lengths: dict[str, float] | None = None,
) -> EvalReport:
    """Average of benchmark scores plus per-benchmark deltas against base.

    Internally full precision; display rounding happens at the writers.
    """
    if list(scores) != list(base_scores):
        raise DataError(
            f"benchmark lists differ: {list(scores)} vs {list(base_scores)}"
        )
    if not scores:
        raise DataError("aggregate_report needs at least one benchmark")
    benchmarks = tuple(scores)
    lengths = mean_lengths or {b: float("nan") for b in benchmarks}
    if mean_lengths is not None and list(mean_lengths) != list(scores):
        raise DataError("mean_lengths keys must match the benchmark list")
    deltas = {b: scores[b] - base_scores[b] for b in benchmarks}
    average = float(np.mean([scores[b] for b in benchmarks]))
    return EvalReport(benchmarks, dict(scores), dict(lengths), deltas, average)


def report_from_results(results: Sequence[BenchResult], base: Sequence[BenchResult]) -> EvalReport:
    scores = {r.benchmark: r.score for r in results}
    base_scores = {r.benchmark: r.score for r in base}
    lengths = {r.benchmark: r.mean_length() for r in results}
    return aggregate_report(scores, base_scores, lengths)


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    """CSV with one-decimal display rounding; 'average' as the final row."""
    lines = ["benchmark,score,delta_vs_base,mean_len"]
    for b in report.benchmarks:
        ln = report.mean_lengths[b]
        ln_txt = "" if math.isnan(ln) else f"{ln:.1f}"
        lines.append(f"{b},{report.scores[b]:.1f},{report.deltas[b]:+.1f},{ln_txt}")
    lines.append(f"average,{report.display_average():.1f},,")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_report_json(report: EvalReport, path: str | Path) -> None:
    atomic_write_text(path, dumps_compact(report.as_dict(), sort_keys=True) + "\n")


def write_passk_csv(curve: PassKCurve, path: str | Path) -> None:
    lines = ["k,estimate"]
    for k in sorted(curve.estimates):
        lines.append(f"{k},{fmt_estimate(curve.estimates[k])}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def fmt_estimate(x: float) -> str:
    return f"{x:.6f}"
