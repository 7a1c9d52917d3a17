"""Autoregressive log-linear token policy with analytic gradients.

The next-token distribution is a softmax over linear scores of three sparse
feature families, indexed into one flat weight vector:

* bigram: (previous token -> candidate), where the previous token at the
  first response step is the last prompt token;
* domain tag x candidate token;
* three format features: emitting the first answer marker, a clean close
  (end-of-sequence at the exact point where it completes marker, answer
  digit, end-of-sequence under the cap), and covering a not-yet-covered
  required aspect token.

Scores additionally encode a response grammar: end-of-sequence is reachable
only right after a completed answer (marker, then exactly one digit), a
started answer admits only digits or the close, and a section break cannot
immediately follow a section break (an empty section). Ill-formed
transitions get a large negative score, which is an exact zero after the
softmax. Responses
that never complete an answer run to the cap, where the distribution is
forced to end-of-sequence, so every response terminates within the cap and
the policy is a proper distribution over terminated sequences.

Everything downstream depends on two exact facts: the gradient of a step
log-probability is feature(chosen) minus the expected feature vector, and
the per-step KL to a reference policy is a finite sum over the vocabulary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .corpus import DEFAULT_MAX_RESPONSE_LEN, Prompt
from .errors import DataError, NumericError
from .util import atomic_write_text, derive_rng, dumps_compact, fmt17, read_jsonl
from .vocab import DIGIT_SURFACES, SECTION, Vocabulary, build_vocabulary

import json

DEFAULT_DOMAINS = ("arithmetic", "sort", "copy", "open", "other")

FORMAT_FEATURE_COUNT = 3
INIT_SCALE = 0.1
FORMAT_INIT_BIAS = -0.5

# score assigned to structurally ill-formed transitions; exp() underflows to
# an exact zero, so masked branches carry no probability and no KL term
MASKED_SCORE = -1e30


class FeatureSpec:
    """Feature layout: a bijection between (family, key) and flat indices."""

    def __init__(
        self,
        vocab: Vocabulary,
        max_response_len: int = DEFAULT_MAX_RESPONSE_LEN,
        domains: tuple[str, ...] = DEFAULT_DOMAINS,
    ):
        if max_response_len < 2:
            raise DataError("max_response_len must be at least 2 (answer marker plus eos)")
        if "other" not in domains:
            raise DataError("domains must include the 'other' fallback tag")
        self.vocab = vocab
        self.max_response_len = max_response_len
        self.domains = tuple(domains)
        self.V = len(vocab)
        self.bigram_base = 0
        self.domain_base = self.V * self.V
        self.format_base = self.domain_base + len(self.domains) * self.V
        self.total_dim = self.format_base + FORMAT_FEATURE_COUNT
        self.f_marker = self.format_base
        self.f_close = self.format_base + 1
        self.f_cover = self.format_base + 2
        self.digit_ids = frozenset(vocab.ids_of(DIGIT_SURFACES))
        # tokens that may continue a started answer: more digits or the close
        self.answer_keep = np.array(sorted(self.digit_ids | {vocab.eos_id}))
        sec_ids = vocab.ids_of((SECTION,))
        self.sec_id = sec_ids[0] if sec_ids else None
        self.spec_id = (
            f"loglin-v{self.V}-d{len(self.domains)}-r{self.max_response_len}-{vocab.fingerprint()}"
        )

    def bigram_index(self, prev: int, cand: int) -> int:
        if not (0 <= prev < self.V and 0 <= cand < self.V):
            raise DataError(f"bigram key ({prev}, {cand}) out of range")
        return self.bigram_base + prev * self.V + cand

    def domain_index(self, domain: str, cand: int) -> int:
        if not 0 <= cand < self.V:
            raise DataError(f"token id {cand} out of range")
        return self.domain_base + self._domain_pos(domain) * self.V + cand

    def _domain_pos(self, domain: str) -> int:
        try:
            return self.domains.index(domain)
        except ValueError:
            return self.domains.index("other")

    def describe_index(self, idx: int) -> tuple:
        """Inverse of the index maps; used by tests and debugging."""
        if self.bigram_base <= idx < self.domain_base:
            off = idx - self.bigram_base
            return ("bigram", off // self.V, off % self.V)
        if self.domain_base <= idx < self.format_base:
            off = idx - self.domain_base
            return ("domain", self.domains[off // self.V], off % self.V)
        if idx == self.f_marker:
            return ("format", "marker")
        if idx == self.f_close:
            return ("format", "close")
        if idx == self.f_cover:
            return ("format", "cover")
        raise DataError(f"feature index {idx} out of range for {self.spec_id}")


@dataclass
class PolicyParams:
    weights: np.ndarray
    spec_id: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1:
            raise DataError("policy weights must be a flat vector")
        if not np.all(np.isfinite(self.weights)):
            raise NumericError("policy weights contain non-finite values")

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.weights.copy(), self.spec_id)


@dataclass(frozen=True)
class ReferencePolicy:
    """Immutable snapshot used as the KL anchor."""

    params: PolicyParams

    def __post_init__(self):
        frozen = self.params.copy()
        frozen.weights.setflags(write=False)
        object.__setattr__(self, "params", frozen)


def init_policy(spec: FeatureSpec, seed: int) -> PolicyParams:
    """Uniform [-0.1, 0.1] weights; format features start at -0.5.

    The negative format bias makes the initial policy raw: it rarely emits
    the marker or terminates on its own, leaving headroom for training.
    """
    rng = derive_rng("policy-init", seed)
    w = rng.uniform(-INIT_SCALE, INIT_SCALE, size=spec.total_dim)
    w[spec.format_base:] = FORMAT_INIT_BIAS
    return PolicyParams(w, spec.spec_id)


# ---------------------------------------------------------------------------
# Step state and scoring


class _Ctx:
    """Per-prompt constants resolved once per sequence walk."""

    __slots__ = ("dom_row", "last_token", "required_ids", "prompt")

    def __init__(self, spec: FeatureSpec, prompt: Prompt):
        if not prompt.tokens:
            raise DataError(f"prompt {prompt.id} has no tokens")
        self.prompt = prompt
        self.dom_row = spec.domain_base + spec._domain_pos(prompt.domain) * spec.V
        self.last_token = prompt.tokens[-1]
        self.required_ids = frozenset(
            spec.vocab.id_of(s) for s in prompt.required_aspects
        )


class _State:
    """Walk state. tail tracks whether end-of-sequence would complete a
    well-formed answer: 0 no marker yet, 1 marker just emitted, 2 marker
    plus exactly one digit (close-ready), 3 broken until the next marker."""

    __slots__ = ("prev", "marker_seen", "tail", "uncovered")

    def __init__(self, ctx: _Ctx):
        self.prev = ctx.last_token
        self.marker_seen = False
        self.tail = 0
        self.uncovered = set(ctx.required_ids)

    def advance(self, spec: FeatureSpec, tok: int) -> None:
        if tok == spec.vocab.marker_id:
            self.marker_seen = True
            self.tail = 1
        elif self.tail == 1 and tok in spec.digit_ids:
            self.tail = 2
        elif self.tail in (1, 2):
            self.tail = 3
        self.uncovered.discard(tok)
        self.prev = tok


def _step_logits(w: np.ndarray, spec: FeatureSpec, ctx: _Ctx, state: _State) -> np.ndarray:
    b = spec.bigram_base + state.prev * spec.V
    logits = w[b:b + spec.V] + w[ctx.dom_row:ctx.dom_row + spec.V]
    if not state.marker_seen:
        logits[spec.vocab.marker_id] += w[spec.f_marker]
    if state.tail == 2:
        # a started answer admits only further digits or the close
        logits[spec.vocab.eos_id] += w[spec.f_close]
        kept = logits[spec.answer_keep]
        logits = np.full(spec.V, MASKED_SCORE)
        logits[spec.answer_keep] = kept
    else:
        # voluntary termination is only well formed right after a completed
        # answer; everywhere else the close carries no probability mass
        logits[spec.vocab.eos_id] = MASKED_SCORE
        if spec.sec_id is not None and state.prev == spec.sec_id:
            # a section break straight after a section break would open an
            # empty section, which is equally ill-formed
            logits[spec.sec_id] = MASKED_SCORE
    if state.uncovered:
        for t in state.uncovered:
            logits[t] += w[spec.f_cover]
    return logits


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max()
    return logits - (m + math.log(np.exp(logits - m).sum()))


def _walk_states(spec: FeatureSpec, ctx: _Ctx, response: Iterable[int]):
    """Yield (position, state-before, token) for each response step."""
    state = _State(ctx)
    for pos, tok in enumerate(response):
        yield pos, state, tok
        state.advance(spec, tok)


def validate_response(spec: FeatureSpec, response: list[int]) -> None:
    if not response:
        raise DataError("empty response")
    if len(response) > spec.max_response_len:
        raise DataError(
            f"response of {len(response)} tokens exceeds the cap {spec.max_response_len}"
        )
    eos = spec.vocab.eos_id
    if response[-1] != eos:
        raise DataError("unterminated response (no trailing end-of-sequence)")
    for tok in response[:-1]:
        if tok == eos:
            raise DataError("end-of-sequence token before the final position")
        spec.vocab.surface(tok)


def next_token_dist(
    params: PolicyParams, spec: FeatureSpec, prompt: Prompt, prefix: list[int]
) -> np.ndarray:
    """Distribution over the next token given the response prefix.

    At the last allowed position the distribution is a point mass on
    end-of-sequence, which is what makes the policy normalize over the set
    of terminated sequences.
    """
    if params.spec_id != spec.spec_id:
        raise DataError(f"params bound to {params.spec_id}, spec is {spec.spec_id}")
    if len(prefix) >= spec.max_response_len:
        raise DataError("prefix already at the response cap")
    if len(prefix) == spec.max_response_len - 1:
        forced = np.zeros(spec.V)
        forced[spec.vocab.eos_id] = 1.0
        return forced
    ctx = _Ctx(spec, prompt)
    state = _State(ctx)
    for tok in prefix:
        state.advance(spec, tok)
    logits = _step_logits(params.weights, spec, ctx, state)
    p = np.exp(_log_softmax(logits))
    return p / p.sum()


def sample_response(
    params: PolicyParams, spec: FeatureSpec, prompt: Prompt, rng_seed: int
) -> list[int]:
    """Inverse-CDF sampling in fixed token order; deterministic in rng_seed."""
    rng = derive_rng("sample", rng_seed)
    ctx = _Ctx(spec, prompt)
    state = _State(ctx)
    eos = spec.vocab.eos_id
    out: list[int] = []
    w = params.weights
    for pos in range(spec.max_response_len):
        if pos == spec.max_response_len - 1:
            out.append(eos)
            break
        logits = _step_logits(w, spec, ctx, state)
        p = np.exp(_log_softmax(logits))
        cum = np.cumsum(p)
        u = rng.random() * cum[-1]
        tok = int(np.searchsorted(cum, u, side="right"))
        tok = min(tok, spec.V - 1)
        out.append(tok)
        if tok == eos:
            break
        state.advance(spec, tok)
    return out


def sequence_logprob(
    params: PolicyParams, spec: FeatureSpec, prompt: Prompt, response: list[int]
) -> float:
    """Sum of per-step log-probabilities; forced steps contribute zero."""
    validate_response(spec, response)
    ctx = _Ctx(spec, prompt)
    total = 0.0
    w = params.weights
    for pos, state, tok in _walk_states(spec, ctx, response):
        if pos == spec.max_response_len - 1:
            continue
        logits = _step_logits(w, spec, ctx, state)
        total += float(_log_softmax(logits)[tok])
    return total


def logprob_gradient(
    params: PolicyParams, spec: FeatureSpec, prompt: Prompt, response: list[int]
) -> np.ndarray:
    """Exact gradient of sequence_logprob with respect to the weights."""
    validate_response(spec, response)
    grad = np.zeros(spec.total_dim)
    accumulate_logprob_gradient(grad, params, spec, prompt, response)
    return grad


def accumulate_logprob_gradient(
    grad: np.ndarray,
    params: PolicyParams,
    spec: FeatureSpec,
    prompt: Prompt,
    response: list[int],
    step_coeffs: np.ndarray | None = None,
) -> None:
    """Add the (optionally per-step weighted) log-prob gradient into grad.

    step_coeffs lets PPO weight each step by its advantage without
    materializing one dense vector per token.
    """
    ctx = _Ctx(spec, prompt)
    w = params.weights
    V = spec.V
    marker = spec.vocab.marker_id
    eos = spec.vocab.eos_id
    for pos, state, tok in _walk_states(spec, ctx, response):
        if pos == spec.max_response_len - 1:
            continue
        c = 1.0 if step_coeffs is None else float(step_coeffs[pos])
        if c == 0.0:
            continue
        logits = _step_logits(w, spec, ctx, state)
        p = np.exp(_log_softmax(logits))
        b = spec.bigram_base + state.prev * V
        grad[b:b + V] -= c * p
        grad[b + tok] += c
        grad[ctx.dom_row:ctx.dom_row + V] -= c * p
        grad[ctx.dom_row + tok] += c
        if not state.marker_seen:
            grad[spec.f_marker] += c * ((1.0 if tok == marker else 0.0) - p[marker])
        if state.tail == 2:
            grad[spec.f_close] += c * ((1.0 if tok == eos else 0.0) - p[eos])
        if state.uncovered:
            mass = sum(p[t] for t in state.uncovered)
            grad[spec.f_cover] += c * ((1.0 if tok in state.uncovered else 0.0) - mass)


def exact_step_kl(
    params: PolicyParams,
    ref: PolicyParams,
    spec: FeatureSpec,
    prompt: Prompt,
    prefix: list[int],
) -> float:
    """KL(policy || ref) of the next-token distribution, full-vocabulary sum."""
    if len(prefix) >= spec.max_response_len:
        raise DataError("prefix already at the response cap")
    if len(prefix) == spec.max_response_len - 1:
        return 0.0
    ctx = _Ctx(spec, prompt)
    state = _State(ctx)
    for tok in prefix:
        state.advance(spec, tok)
    lp = _log_softmax(_step_logits(params.weights, spec, ctx, state))
    lq = _log_softmax(_step_logits(ref.weights, spec, ctx, state))
    kl = float(np.dot(np.exp(lp), lp - lq))
    return max(kl, 0.0)


def greedy_response(params: PolicyParams, spec: FeatureSpec, prompt: Prompt) -> list[int]:
    """Argmax decode; ties break toward the lowest token id."""
    ctx = _Ctx(spec, prompt)
    state = _State(ctx)
    eos = spec.vocab.eos_id
    out: list[int] = []
    for pos in range(spec.max_response_len):
        if pos == spec.max_response_len - 1:
            out.append(eos)
            break
        logits = _step_logits(params.weights, spec, ctx, state)
        tok = int(np.argmax(logits))
        out.append(tok)
        if tok == eos:
            break
        state.advance(spec, tok)
    return out


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(params: PolicyParams, spec: FeatureSpec, path: str | Path, meta: dict | None = None) -> None:
    """Single JSON object; weights carry 17 significant digits."""
    meta = dict(meta or {})
    meta.setdefault("max_response_len", spec.max_response_len)
    meta.setdefault("domains", list(spec.domains))
    weights = ",".join(fmt17(float(x)) for x in params.weights)
    body = (
        "{"
        + f"\"spec_id\":{json.dumps(params.spec_id)},"
        + f"\"vocab_size\":{spec.V},"
        + f"\"weights\":[{weights}],"
        + f"\"meta\":{dumps_compact(meta, sort_keys=True)}"
        + "}"
    )
    atomic_write_text(path, body + "\n")


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, dict]:
    rows = read_jsonl(path)
    if len(rows) != 1:
        raise DataError(f"{path}: checkpoint must be a single JSON object")
    data = rows[0]
    for key in ("spec_id", "vocab_size", "weights", "meta"):
        if key not in data:
            raise DataError(f"{path}: checkpoint missing key {key!r}")
    params = PolicyParams(np.asarray(data["weights"], dtype=np.float64), data["spec_id"])
    meta = dict(data["meta"])
    meta["vocab_size"] = int(data["vocab_size"])
    return params, meta


def spec_from_checkpoint_meta(meta: dict) -> FeatureSpec:
    return FeatureSpec(
        build_vocabulary(int(meta["vocab_size"])),
        max_response_len=int(meta.get("max_response_len", DEFAULT_MAX_RESPONSE_LEN)),
        domains=tuple(meta.get("domains", DEFAULT_DOMAINS)),
    )


def bind_checkpoint(params: PolicyParams, spec: FeatureSpec) -> PolicyParams:
    """Attach loaded params to a spec, refusing a mismatched layout."""
    if params.spec_id != spec.spec_id:
        raise DataError(
            f"checkpoint spec {params.spec_id} does not match feature spec {spec.spec_id}"
        )
    if params.weights.shape[0] != spec.total_dim:
        raise DataError(
            f"checkpoint has {params.weights.shape[0]} weights, spec expects {spec.total_dim}"
        )
    return params
