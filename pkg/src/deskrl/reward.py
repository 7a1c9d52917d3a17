"""Reward sources: task verifiers and a linear preference reward model.

Verifiers score verifiable tasks 0/1 by reading the tokens between the
final answer marker and end-of-sequence. The reward model scores any
response from surface shape alone: aspect coverage, marker discipline,
termination, length bucket, section count. Task correctness is deliberately
not a reward-model feature; the only skills the two reward sources share
are formatting skills, which is the channel open-ended training can use to
move verifiable-task scores.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import vocab as V
from .corpus import Prompt, PromptPool, DEFAULT_MAX_RESPONSE_LEN
from .errors import ConfigError, DataError, NumericError
from .expression import evaluate, expressions_equivalent, DivisionByZero
from .errors import ExpressionSyntaxError
from .util import atomic_write_text, derive_rng, dumps_compact, fmt17, write_jsonl, read_jsonl

# ---------------------------------------------------------------------------
# Response shape analysis (shared by the reward model and the rubric)


@dataclass(frozen=True)
class ResponseShape:
    length: int
    voluntary: bool           # terminated before the cap forced it
    marker_count: int
    tail_wellformed: bool     # final marker, then exactly one digit, then eos
    covered: frozenset[str]
    sections: int


def analyze_response(
    vocabulary: V.Vocabulary,
    prompt: Prompt,
    response: Sequence[int],
    max_response_len: int = DEFAULT_MAX_RESPONSE_LEN,
) -> ResponseShape:
    if not response or response[-1] != vocabulary.eos_id:
        raise DataError("response must terminate with end-of-sequence")
    body = list(response[:-1])
    if vocabulary.eos_id in body:
        raise DataError("end-of-sequence token before the final position")
    marker = vocabulary.marker_id
    marker_count = body.count(marker)
    tail_ok = False
    if marker_count:
        last = len(body) - 1 - body[::-1].index(marker)
        tail = body[last + 1:]
        tail_ok = len(tail) == 1 and vocabulary.surface(tail[0]) in V.DIGIT_SURFACES
    surfaces = {vocabulary.surface(t) for t in body}
    covered = frozenset(a for a in prompt.required_aspects if a in surfaces)
    sections = sum(1 for t in body if vocabulary.surface(t) == V.SECTION)
    return ResponseShape(
        length=len(response),
        voluntary=len(response) < max_response_len,
        marker_count=marker_count,
        tail_wellformed=tail_ok,
        covered=covered,
        sections=sections,
    )


# ---------------------------------------------------------------------------
# Verifiers


@dataclass(frozen=True)
class VerifierKind:
    kind: str
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("exact", "numeric", "expression"):
            raise ConfigError(f"unknown verifier kind {self.kind!r}")
        if self.tolerance < 0:
            raise ConfigError("verifier tolerance must be non-negative")


def _final_answer(vocabulary: V.Vocabulary, response: Sequence[int]) -> list[int] | None:
    """Tokens between the final answer marker and eos, or None if malformed."""
    if not response or response[-1] != vocabulary.eos_id:
        return None
    body = list(response[:-1])
    if vocabulary.eos_id in body:
        return None
    marker = vocabulary.marker_id
    if marker not in body:
        return None
    last = len(body) - 1 - body[::-1].index(marker)
    return body[last + 1:]


def verify_exact(vocabulary: V.Vocabulary, prompt: Prompt, response: Sequence[int]) -> int:
    """1 iff the marker-delimited answer equals gold token-for-token."""
    if prompt.gold is None:
        raise DataError(f"prompt {prompt.id} has no gold; cannot verify")
    answer = _final_answer(vocabulary, response)
    return int(answer is not None and tuple(answer) == tuple(prompt.gold))


def verify_numeric(
    vocabulary: V.Vocabulary, prompt: Prompt, response: Sequence[int], tolerance: float = 1e-6
) -> int:
    """1 iff the answer parses as a number within tolerance of gold."""
    if prompt.gold is None:
        raise DataError(f"prompt {prompt.id} has no gold; cannot verify")
    gold_text = "".join(vocabulary.decode(list(prompt.gold)))
    try:
        gold_value = float(gold_text)
    except ValueError:
        raise DataError(f"prompt {prompt.id}: gold {gold_text!r} is not numeric") from None
    answer = _final_answer(vocabulary, response)
    if answer is None:
        return 0
    try:
        value = float("".join(vocabulary.decode(answer)))
    except ValueError:
        return 0
    return int(abs(value - gold_value) <= tolerance)


def verify_expression(gold: str, answer: str) -> bool:
    """Exact rational equivalence of two expression strings.

    Syntax errors raise (naming position and expected token class);
    division by zero makes the pair non-equivalent.
    """
    evaluate(gold)
    return expressions_equivalent(gold, answer)


def verify_expression_response(
    vocabulary: V.Vocabulary, prompt: Prompt, response: Sequence[int]
) -> int:
    """Expression verifier over a token response; malformed answers score 0."""
    if prompt.gold is None:
        raise DataError(f"prompt {prompt.id} has no gold; cannot verify")
    gold_text = " ".join(vocabulary.decode(list(prompt.gold)))
    evaluate(gold_text)
    answer = _final_answer(vocabulary, response)
    if answer is None:
        return 0
    try:
        return int(expressions_equivalent(gold_text, " ".join(vocabulary.decode(answer))))
    except ExpressionSyntaxError:
        return 0


def verify(
    vocabulary: V.Vocabulary, prompt: Prompt, response: Sequence[int], verifier: VerifierKind
) -> int:
    if verifier.kind == "exact":
        return verify_exact(vocabulary, prompt, response)
    if verifier.kind == "numeric":
        return verify_numeric(vocabulary, prompt, response, verifier.tolerance)
    return verify_expression_response(vocabulary, prompt, response)


# ---------------------------------------------------------------------------
# Reward-model features

LENGTH_BUCKETS = 4


class RewardFeatureSpec:
    """Response-level feature map for the preference reward model."""

    def __init__(self, vocabulary: V.Vocabulary, max_response_len: int = DEFAULT_MAX_RESPONSE_LEN):
        self.vocab = vocabulary
        self.max_response_len = max_response_len
        self.names = (
            "cover_frac", "marker_once", "tail_wellformed", "dangling_marker",
            "clean_close", "len_q1", "len_q2", "len_q3", "len_q4", "section_frac",
        )
        self.total_dim = len(self.names)
        self.spec_id = f"rmfeat-v{len(vocabulary)}-r{max_response_len}-{vocabulary.fingerprint()}"

    def extract(self, prompt: Prompt, response: Sequence[int]) -> np.ndarray:
        shape = analyze_response(self.vocab, prompt, response, self.max_response_len)
        phi = np.zeros(self.total_dim)
        if prompt.required_aspects:
            phi[0] = len(shape.covered) / len(prompt.required_aspects)
        phi[1] = 1.0 if shape.marker_count == 1 else 0.0
        phi[2] = 1.0 if shape.tail_wellformed else 0.0
        phi[3] = 1.0 if shape.marker_count >= 1 and not shape.tail_wellformed else 0.0
        phi[4] = 1.0 if shape.voluntary else 0.0
        edge = self.max_response_len / LENGTH_BUCKETS
        bucket = min(int((shape.length - 1) / edge), LENGTH_BUCKETS - 1)
        phi[5 + bucket] = 1.0
        phi[9] = min(shape.sections, 4) / 4.0
        return phi


@dataclass
class RewardModelParams:
    weights: np.ndarray
    spec_id: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)):
            raise NumericError("reward model weights contain non-finite values")


def rm_score(
    rm: RewardModelParams, feat: RewardFeatureSpec, prompt: Prompt, response: Sequence[int]
) -> float:
    if rm.spec_id != feat.spec_id:
        raise DataError(f"reward model bound to {rm.spec_id}, features are {feat.spec_id}")
    return float(feat.extract(prompt, response) @ rm.weights)


def save_rm(rm: RewardModelParams, feat: RewardFeatureSpec, path: str | Path, meta: dict | None = None) -> None:
    """Single JSON object, same shape as a policy checkpoint."""
    meta = dict(meta or {})
    meta.setdefault("max_response_len", feat.max_response_len)
    weights = ",".join(fmt17(float(x)) for x in rm.weights)
    body = (
        "{"
        + f"\"spec_id\":{json.dumps(rm.spec_id)},"
        + f"\"vocab_size\":{len(feat.vocab)},"
        + f"\"weights\":[{weights}],"
        + f"\"meta\":{dumps_compact(meta, sort_keys=True)}"
        + "}"
    )
    atomic_write_text(path, body + "\n")


def load_rm(path: str | Path) -> tuple[RewardModelParams, dict]:
    rows = read_jsonl(path)
    if len(rows) != 1:
        raise DataError(f"{path}: reward model file must be a single JSON object")
    data = rows[0]
    for key in ("spec_id", "vocab_size", "weights", "meta"):
        if key not in data:
            raise DataError(f"{path}: reward model file missing key {key!r}")
    params = RewardModelParams(np.asarray(data["weights"], dtype=np.float64), data["spec_id"])
    meta = dict(data["meta"])
    meta["vocab_size"] = int(data["vocab_size"])
    return params, meta


def feat_from_rm_meta(meta: dict) -> RewardFeatureSpec:
    return RewardFeatureSpec(
        V.build_vocabulary(int(meta["vocab_size"])),
        max_response_len=int(meta.get("max_response_len", DEFAULT_MAX_RESPONSE_LEN)),
    )


def bind_rm(rm: RewardModelParams, feat: RewardFeatureSpec) -> RewardModelParams:
    if rm.spec_id != feat.spec_id:
        raise DataError(f"reward model spec {rm.spec_id} does not match feature spec {feat.spec_id}")
    if rm.weights.shape[0] != feat.total_dim:
        raise DataError(f"reward model has {rm.weights.shape[0]} weights, features expect {feat.total_dim}")
    return rm


# ---------------------------------------------------------------------------
# Preference pairs and Bradley-Terry training


@dataclass(frozen=True)
class PreferencePair:
    prompt_id: str
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]
    source: str = "synthetic"

    def __post_init__(self):
        if tuple(self.chosen) == tuple(self.rejected):
            raise DataError(f"pair for {self.prompt_id}: chosen equals rejected")


@dataclass
class RMTrainReport:
    final_loss: float
    accuracy: float
    steps: int
    losses: list[float] = field(default_factory=list)


def preference_deltas(
    pairs: Sequence[PreferencePair],
    prompts_by_id: dict[str, Prompt],
    feat: RewardFeatureSpec,
) -> np.ndarray:
    """Row i = features(chosen_i) - features(rejected_i)."""
    deltas = []
    for pair in pairs:
        prompt = prompts_by_id.get(pair.prompt_id)
        if prompt is None:
            raise DataError(f"pair references unknown prompt {pair.prompt_id!r}")
        deltas.append(feat.extract(prompt, pair.chosen) - feat.extract(prompt, pair.rejected))
    return np.stack(deltas)


def bt_loss(w: np.ndarray, deltas: np.ndarray) -> float:
    """Mean -ln(sigmoid(delta @ w)) over preference pairs."""
    return float(np.mean(np.logaddexp(0.0, -(deltas @ w))))


def bt_grad(w: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    z = deltas @ w
    sig = 1.0 / (1.0 + np.exp(-z))
    return -(deltas * (1.0 - sig)[:, None]).mean(axis=0)


def rm_train(
    pairs: Sequence[PreferencePair],
    prompts_by_id: dict[str, Prompt],
    feat: RewardFeatureSpec,
    lr: float = 0.05,
    steps: int = 500,
    seed: int = 0,
) -> tuple[RewardModelParams, RMTrainReport]:
    """Full-batch gradient descent on mean -ln(sigmoid(s_chosen - s_rejected)).

    Deterministic given the seed (which only sets the tiny init). Training
    aborts with diagnostics if the loss goes non-finite.
    """
    if not pairs:
        raise DataError("rm_train needs at least one preference pair")
    D = preference_deltas(pairs, prompts_by_id, feat)
    rng = derive_rng("rm-init", seed)
    w = rng.uniform(-0.01, 0.01, size=feat.total_dim)
    losses: list[float] = []
    for step in range(steps):
        loss = bt_loss(w, D)
        if not math.isfinite(loss):
            z = D @ w
            raise NumericError(
                f"reward model loss became non-finite at step {step} "
                f"(max |margin| {np.abs(z).max():.3e}, lr {lr})"
            )
        losses.append(loss)
        w = w - lr * bt_grad(w, D)
    final_loss = bt_loss(w, D)
    accuracy = float(np.mean((D @ w) > 0))
    params = RewardModelParams(w, feat.spec_id)
    return params, RMTrainReport(final_loss, accuracy, steps, losses)


# ---------------------------------------------------------------------------
# Rubric and synthetic preferences


def rubric_criteria(
    vocabulary: V.Vocabulary,
    prompt: Prompt,
    response: Sequence[int],
    max_response_len: int = DEFAULT_MAX_RESPONSE_LEN,
) -> list[bool]:
    """Boolean quality criteria; the count orders synthetic pairs."""
    shape = analyze_response(vocabulary, prompt, response, max_response_len)
    crits = [a in shape.covered for a in prompt.required_aspects]
    crits.append(shape.marker_count == 1)
    crits.append(shape.tail_wellformed)
    crits.append(shape.voluntary)
    crits.append(shape.sections >= 2)
    return crits


def _craft_response(
    vocabulary: V.Vocabulary,
    prompt: Prompt,
    rng: np.random.Generator,
    max_response_len: int,
) -> tuple[int, ...]:
    """Random response of controllable quality over safe body tokens."""
    fillers = vocabulary.ids_of(V.FILLER_SURFACES) or vocabulary.ids_of(V.LETTER_SURFACES)
    digits = vocabulary.ids_of(V.DIGIT_SURFACES)
    sec = vocabulary.id_of(V.SECTION) if V.SECTION in vocabulary else None
    req_ids = [vocabulary.id_of(a) for a in prompt.required_aspects]

    if rng.random() < 0.5:
        n_cover = len(req_ids)
    else:
        n_cover = int(rng.integers(0, len(req_ids) + 1))
    cover = [req_ids[i] for i in rng.choice(len(req_ids), size=n_cover, replace=False)] if n_cover else []
    n_sections = int(rng.integers(0, 4)) if sec is not None else 0

    body: list[int] = []
    for i in range(max(n_sections, len(cover))):
        if i < n_sections:
            body.append(sec)
        if i < len(cover):
            body.append(cover[i])
        if fillers and rng.random() < 0.5:
            body.append(int(fillers[rng.integers(0, len(fillers))]))

    # marker-spam negatives teach the reward model that repeats are bad
    if fillers and rng.random() < 0.10:
        for _ in range(int(rng.integers(2, 4))):
            body.append(vocabulary.marker_id)
            body.append(int(fillers[rng.integers(0, len(fillers))]))

    tail: list[int] = []
    if rng.random() < 0.65:
        tail.append(vocabulary.marker_id)
        u = rng.random()
        if u < 0.7 or not fillers:
            tail.append(int(digits[rng.integers(0, len(digits))]))
        elif u < 0.85:
            tail.extend(int(fillers[rng.integers(0, len(fillers))]) for _ in range(2))
        else:
            tail.append(int(fillers[rng.integers(0, len(fillers))]))

    voluntary = rng.random() < 0.8
    room = max_response_len - 1 - len(tail)
    body = body[:room]
    resp = body + tail
    if not voluntary and fillers:
        while len(resp) < max_response_len - 1:
            resp.append(int(fillers[rng.integers(0, len(fillers))]))
    resp.append(vocabulary.eos_id)
    return tuple(resp)


def synth_preferences(
    pool: PromptPool,
    n: int,
    seed: int,
    max_response_len: int = DEFAULT_MAX_RESPONSE_LEN,
) -> list[PreferencePair]:
    """Deterministic synthetic pairs; chosen strictly beats rejected on the rubric.

    Candidate pairs whose rubric counts tie are discarded and retried, and
    duplicate (prompt, chosen, rejected) triples are never emitted. Asking
    for more distinct pairs than the pool can yield is an error.
    """
    if len(pool) == 0:
        raise DataError(f"pool {pool.name} is empty; cannot synthesize preferences")
    vocabulary = pool.vocab
    pairs: list[PreferencePair] = []
    seen: set[tuple] = set()
    attempts = 0
    budget = 400 * max(n, 1)
    i = 0
    while len(pairs) < n:
        attempts += 1
        if attempts > budget:
            raise DataError(
                f"could only synthesize {len(pairs)} distinct pairs of the requested {n} "
                f"from pool {pool.name}"
            )
        prompt = pool.prompts[i % len(pool)]
        rng = derive_rng("prefs", seed, i)
        i += 1
        a = _craft_response(vocabulary, prompt, rng, max_response_len)
        b = _craft_response(vocabulary, prompt, rng, max_response_len)
        if a == b:
            continue
        ca = sum(rubric_criteria(vocabulary, prompt, a, max_response_len))
        cb = sum(rubric_criteria(vocabulary, prompt, b, max_response_len))
        if ca == cb:
            continue
        chosen, rejected = (a, b) if ca > cb else (b, a)
        key = (prompt.id, chosen, rejected)
        if key in seen:
            continue
        seen.add(key)
        pairs.append(PreferencePair(prompt.id, chosen, rejected))
    return pairs


def save_preferences(pairs: Sequence[PreferencePair], vocabulary: V.Vocabulary, path: str | Path) -> None:
    records = [
        {
            "prompt_id": p.prompt_id,
            "chosen": vocabulary.decode(list(p.chosen)),
            "rejected": vocabulary.decode(list(p.rejected)),
            "source": p.source,
        }
        for p in pairs
    ]
    write_jsonl(path, records)


def load_preferences(path: str | Path, vocabulary: V.Vocabulary) -> list[PreferencePair]:
    pairs = []
    for lineno, rec in enumerate(read_jsonl(path), start=1):
        where = f"{path}: line {lineno}"
        for key in ("prompt_id", "chosen", "rejected"):
            if key not in rec:
                raise DataError(f"{where}: missing key {key!r}")
        try:
            chosen = tuple(vocabulary.encode(rec["chosen"]))
            rejected = tuple(vocabulary.encode(rec["rejected"]))
            pair = PreferencePair(rec["prompt_id"], chosen, rejected, rec.get("source", "file"))
        except DataError as exc:
            raise DataError(f"{where}: {exc}") from None
        for side, resp in (("chosen", chosen), ("rejected", rejected)):
            if not resp or resp[-1] != vocabulary.eos_id:
                raise DataError(f"{where}: {side} response does not terminate with end-of-sequence")
        pairs.append(pair)
    return pairs
