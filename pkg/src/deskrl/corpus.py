"""Synthetic task corpus: prompts, pools, suite generation, and the topic audit.

Four task families share one vocabulary:

* arithmetic: single-operator expressions ("3 + 4 =") whose value stays in
  0..9, so gold is always a single digit token; a held-out hard split uses
  two-operator expressions.
* sort / copy: transduction over a letter alphabet ("sort c a b ="), used
  as evaluation-only verifiable domains.
* structured writing: open-ended prompts ("write tech climate ...") that
  name required aspect tokens; these have no gold and are scored by a
  reward model.

A correct verifiable response is the answer marker, the gold tokens, then
end-of-sequence. Open-ended scoring rewards the same surface discipline
(marker, one-digit close, voluntary termination) plus aspect coverage, which
is what lets format skills learned on one family carry to the others.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import vocab as V
from .errors import ConfigError, DataError
from .util import derive_rng, write_jsonl, read_jsonl

DEFAULT_MAX_PROMPT_LEN = 16
DEFAULT_MAX_RESPONSE_LEN = 32

PROMPT_KINDS = ("verifiable", "open")
POOL_KINDS = ("open", "in_domain", "mixed")

# Minimum vocabulary size each family needs (prefix layout, see vocab.py).
# Arithmetic needs the parens for its hard benchmark split.
_FAMILY_MIN_VOCAB = {"arithmetic": 18, "sort": 32, "copy": 32, "open": 44}

HARD_BENCH_SIZE = 40
HARD_MODE_SHARE = 0.25
TRAIN_MODE_SHARE = 0.30


@dataclass(frozen=True)
class Prompt:
    """One task instance; tokens are vocabulary ids."""

    id: str
    domain: str
    kind: str
    tokens: tuple[int, ...]
    gold: tuple[int, ...] | None = None
    required_aspects: tuple[str, ...] = ()

    def validate(self, vocabulary: V.Vocabulary, max_prompt_len: int = DEFAULT_MAX_PROMPT_LEN) -> None:
        if self.kind not in PROMPT_KINDS:
            raise DataError(f"prompt {self.id}: unknown kind {self.kind!r}")
        if not self.tokens:
            raise DataError(f"prompt {self.id}: empty token sequence")
        if len(self.tokens) > max_prompt_len:
            raise DataError(
                f"prompt {self.id}: {len(self.tokens)} tokens exceeds prompt limit {max_prompt_len}"
            )
        for t in self.tokens:
            vocabulary.surface(t)
        if self.kind == "verifiable":
            if not self.gold:
                raise DataError(f"prompt {self.id}: verifiable prompt without gold")
            if self.required_aspects:
                raise DataError(f"prompt {self.id}: verifiable prompt must not carry required_aspects")
            for t in self.gold:
                vocabulary.surface(t)
        else:
            if self.gold is not None:
                raise DataError(f"prompt {self.id}: open prompt must not carry gold")
            if not self.required_aspects:
                raise DataError(f"prompt {self.id}: open prompt without required_aspects")
            for s in self.required_aspects:
                if s not in vocabulary:
                    raise DataError(f"prompt {self.id}: required aspect {s!r} not in vocabulary")

    def surfaces(self, vocabulary: V.Vocabulary) -> list[str]:
        return vocabulary.decode(list(self.tokens))


@dataclass
class PromptPool:
    name: str
    kind: str
    prompts: tuple[Prompt, ...]
    vocab: V.Vocabulary

    def __post_init__(self):
        if self.kind not in POOL_KINDS:
            raise DataError(f"pool {self.name}: unknown pool kind {self.kind!r}")
        seen: set[str] = set()
        for p in self.prompts:
            if p.id in seen:
                raise DataError(f"pool {self.name}: duplicate prompt id {p.id!r}")
            seen.add(p.id)
            if self.kind == "open" and p.kind != "open":
                raise DataError(f"pool {self.name}: verifiable prompt {p.id} in an open pool")
            if self.kind == "in_domain" and p.kind != "verifiable":
                raise DataError(f"pool {self.name}: open prompt {p.id} in an in_domain pool")

    def __len__(self) -> int:
        return len(self.prompts)

    def ids(self) -> set[str]:
        return {p.id for p in self.prompts}


@dataclass
class TaskSuite:
    """Everything one experiment needs: vocabulary, train pools, benchmarks."""

    vocab: V.Vocabulary
    open_train: PromptPool
    in_domain_train: PromptPool
    benchmarks: dict[str, PromptPool] = field(default_factory=dict)


def _require_vocab(family: str, vocab_size: int, requested: int) -> None:
    if requested <= 0:
        return
    need = _FAMILY_MIN_VOCAB[family]
    if vocab_size < need:
        raise ConfigError(
            f"vocab_size {vocab_size} is too small for the {family} family (needs >= {need})"
        )


def _easy_expressions() -> list[tuple[tuple[str, ...], int]]:
    """All single-operator expressions over 0..9 with a single-digit value."""
    out = []
    for a in range(10):
        for b in range(10):
            if a + b <= 9:
                out.append(((str(a), "+", str(b), "="), a + b))
            if a - b >= 0:
                out.append(((str(a), "-", str(b), "="), a - b))
            if a * b <= 9:
                out.append(((str(a), "*", str(b), "="), a * b))
    return out


def _hard_expressions() -> list[tuple[tuple[str, ...], int]]:
    """Two-operator expressions (plain and parenthesized) with value in 0..9."""
    ops = ("+", "-", "*")
    val = {"+": lambda x, y: x + y, "-": lambda x, y: x - y, "*": lambda x, y: x * y}
    out = []
    seen = set()
    for a in range(10):
        for b in range(10):
            for c in range(10):
                for o1 in ops:
                    for o2 in ops:
                        # plain form, usual precedence
                        if o2 == "*" and o1 != "*":
                            v = val[o1](a, val["*"](b, c))
                        else:
                            v = val[o2](val[o1](a, b), c)
                        toks = (str(a), o1, str(b), o2, str(c), "=")
                        if 0 <= v <= 9 and toks not in seen:
                            seen.add(toks)
                            out.append((toks, v))
                        # explicit left grouping when it differs
                        vg = val[o2](val[o1](a, b), c)
                        gtoks = ("(", str(a), o1, str(b), ")", o2, str(c), "=")
                        if 0 <= vg <= 9 and vg != v and gtoks not in seen:
                            seen.add(gtoks)
                            out.append((gtoks, vg))
    return out


def _digit_histogram(n: int, mode_digit: int, mode_share: float) -> dict[int, int]:
    """Target answer counts: the mode digit gets mode_share, rest spread evenly."""
    counts = {d: 0 for d in range(10)}
    counts[mode_digit] = max(1, round(n * mode_share))
    rest = n - counts[mode_digit]
    others = [d for d in range(10) if d != mode_digit]
    for i, d in enumerate(others):
        counts[d] = rest // len(others) + (1 if i < rest % len(others) else 0)
    return counts


def _sample_histogram(
    by_value: dict[int, list], target: dict[int, int], rng: np.random.Generator, replace: bool
) -> list:
    picked = []
    short = 0
    for d in range(10):
        bucket = by_value.get(d, [])
        want = target[d]
        if not bucket:
            short += want
            continue
        idx = rng.choice(len(bucket), size=want, replace=replace or want > len(bucket))
        picked.extend(bucket[i] for i in idx)
    if short:
        all_items = [x for b in by_value.values() for x in b]
        idx = rng.choice(len(all_items), size=short, replace=True)
        picked.extend(all_items[i] for i in idx)
    order = rng.permutation(len(picked))
    return [picked[i] for i in order]


def _make_arith_prompt(vocabulary: V.Vocabulary, pid: str, toks: tuple[str, ...], value: int) -> Prompt:
    return Prompt(
        id=pid,
        domain="arithmetic",
        kind="verifiable",
        tokens=tuple(vocabulary.encode(list(toks))),
        gold=(vocabulary.id_of(str(value)),),
    )


def _gen_transduction(
    vocabulary: V.Vocabulary, domain: str, n: int, rng: np.random.Generator
) -> list[Prompt]:
    letters = list(V.LETTER_SURFACES)
    prompts = []
    seen: set[tuple[str, ...]] = set()
    attempts = 0
    while len(prompts) < n:
        attempts += 1
        if attempts > 200 * max(n, 1):
            raise DataError(f"cannot generate {n} distinct {domain} prompts")
        k = int(rng.integers(2, 5))
        payload = [letters[i] for i in rng.choice(len(letters), size=k, replace=False)]
        toks = tuple([domain] + payload + ["="])
        if toks in seen:
            continue
        seen.add(toks)
        gold = sorted(payload) if domain == "sort" else payload
        prompts.append(
            Prompt(
                id=f"bench-{domain}-{len(prompts):04d}",
                domain=domain,
                kind="verifiable",
                tokens=tuple(vocabulary.encode(list(toks))),
                gold=tuple(vocabulary.encode(gold)),
            )
        )
    return prompts


def _gen_open(
    vocabulary: V.Vocabulary, n: int, rng: np.random.Generator, role: str,
    seen: set[tuple[str, ...]],
) -> list[Prompt]:
    aspects = [s for s in V.ASPECT_SURFACES if s in vocabulary]
    fillers = [s for s in V.FILLER_SURFACES if s in vocabulary]
    prompts = []
    attempts = 0
    while len(prompts) < n:
        attempts += 1
        if attempts > 200 * max(n, 1):
            raise DataError(f"cannot generate {n} distinct open prompts")
        m = int(rng.integers(2, 5))
        req = [aspects[i] for i in rng.choice(len(aspects), size=m, replace=False)]
        pad = [fillers[i] for i in rng.choice(len(fillers), size=int(rng.integers(1, 4)), replace=False)] if fillers else []
        toks = tuple(["write"] + req + pad)
        if toks in seen:
            continue
        seen.add(toks)
        prompts.append(
            Prompt(
                id=f"{role}-open-{len(prompts):04d}",
                domain="open",
                kind="open",
                tokens=tuple(vocabulary.encode(list(toks))),
                required_aspects=tuple(req),
            )
        )
    return prompts


def generate_task_suite(
    seed: int, counts: dict[str, int], vocab_size: int = 64
) -> TaskSuite:
    """Deterministic task suite from (seed, counts, vocab_size).

    counts keys: "arithmetic" and "open" size the train pools; "sort" and
    "copy" size their held-out transduction benchmark (those families are
    evaluation-only). Unknown keys are rejected. Benchmark pools are
    disjoint from train pools by construction: held-out expression sets are
    reserved before train sampling, and ids are namespaced by role.
    """
    known = ("arithmetic", "sort", "copy", "open")
    for key in counts:
        if key not in known:
            raise ConfigError(f"unknown task family {key!r} in counts")
    if any(counts.get(k, 0) < 0 for k in known):
        raise ConfigError("counts must be non-negative")
    vocabulary = V.build_vocabulary(vocab_size)
    for fam in known:
        _require_vocab(fam, vocab_size, counts.get(fam, 0))

    n_arith = counts.get("arithmetic", 0)
    n_open = counts.get("open", 0)

    benchmarks: dict[str, PromptPool] = {}
    arith_prompts: list[Prompt] = []

    if n_arith > 0:
        rng = derive_rng(seed, "arithmetic")
        mode_digit = int(rng.integers(2, 8))
        easy = _easy_expressions()
        order = rng.permutation(len(easy))
        bench_n = min(24, max(8, n_arith // 5))
        bench_items = [easy[i] for i in order[:bench_n]]
        train_items = [easy[i] for i in order[bench_n:]]

        by_value: dict[int, list] = {}
        for item in train_items:
            by_value.setdefault(item[1], []).append(item)
        target = _digit_histogram(n_arith, mode_digit, TRAIN_MODE_SHARE)
        picked = _sample_histogram(by_value, target, rng, replace=True)
        arith_prompts = [
            _make_arith_prompt(vocabulary, f"train-arith-{i:04d}", t, v) for i, (t, v) in enumerate(picked)
        ]
        bench_prompts = [
            _make_arith_prompt(vocabulary, f"bench-arith-{i:04d}", t, v) for i, (t, v) in enumerate(bench_items)
        ]
        benchmarks["arith"] = PromptPool("arith", "in_domain", tuple(bench_prompts), vocabulary)

        hard = _hard_expressions()
        hard_by_value: dict[int, list] = {}
        for item in hard:
            hard_by_value.setdefault(item[1], []).append(item)
        hard_target = _digit_histogram(HARD_BENCH_SIZE, mode_digit, HARD_MODE_SHARE)
        hard_picked = _sample_histogram(hard_by_value, hard_target, rng, replace=False)
        hard_prompts = [
            _make_arith_prompt(vocabulary, f"bench-arith-hard-{i:04d}", t, v)
            for i, (t, v) in enumerate(hard_picked)
        ]
        benchmarks["arith-hard"] = PromptPool("arith-hard", "in_domain", tuple(hard_prompts), vocabulary)

    transduce: list[Prompt] = []
    if counts.get("sort", 0) > 0:
        transduce.extend(_gen_transduction(vocabulary, "sort", counts["sort"], derive_rng(seed, "sort")))
    if counts.get("copy", 0) > 0:
        transduce.extend(_gen_transduction(vocabulary, "copy", counts["copy"], derive_rng(seed, "copy")))
    if transduce:
        benchmarks["transduce"] = PromptPool("transduce", "in_domain", tuple(transduce), vocabulary)

    open_train_prompts: list[Prompt] = []
    if n_open > 0:
        rng = derive_rng(seed, "open")
        seen: set[tuple[str, ...]] = set()
        bench_n = min(24, max(8, n_open // 5))
        open_bench = _gen_open(vocabulary, bench_n, rng, "bench", seen)
        open_train_prompts = _gen_open(vocabulary, n_open, rng, "train", seen)
        benchmarks["open-quality"] = PromptPool("open-quality", "open", tuple(open_bench), vocabulary)

    suite = TaskSuite(
        vocab=vocabulary,
        open_train=PromptPool("open-train", "open", tuple(open_train_prompts), vocabulary),
        in_domain_train=PromptPool("in-domain-train", "in_domain", tuple(arith_prompts), vocabulary),
        benchmarks=benchmarks,
    )
    for pool in [suite.open_train, suite.in_domain_train, *benchmarks.values()]:
        for p in pool.prompts:
            p.validate(vocabulary)
    return suite


# ---------------------------------------------------------------------------
# JSONL persistence


def save_prompt_pool(pool: PromptPool, path: str | Path) -> None:
    """Header object first, then one record per prompt."""
    records: list[dict] = [{"pool": pool.name, "kind": pool.kind}]
    for p in pool.prompts:
        rec = {
            "id": p.id,
            "domain": p.domain,
            "kind": p.kind,
            "prompt": p.surfaces(pool.vocab),
        }
        if p.kind == "verifiable":
            rec["gold"] = pool.vocab.decode(list(p.gold))
        else:
            rec["required_aspects"] = list(p.required_aspects)
        records.append(rec)
    write_jsonl(path, records)


_RECORD_KEYS = {"id", "domain", "kind", "prompt", "gold", "required_aspects"}


def load_prompt_pool(
    path: str | Path,
    vocabulary: V.Vocabulary,
    max_prompt_len: int = DEFAULT_MAX_PROMPT_LEN,
) -> PromptPool:
    """Strict loader; every rejection names the offending line."""
    rows = read_jsonl(path)
    if not rows:
        raise DataError(f"{path}: missing header object")
    header = rows[0]
    if not isinstance(header, dict) or set(header) != {"pool", "kind"}:
        raise DataError(f"{path}: line 1: header must be an object with exactly 'pool' and 'kind'")
    if header["kind"] not in POOL_KINDS:
        raise DataError(f"{path}: line 1: unknown pool kind {header['kind']!r}")

    prompts: list[Prompt] = []
    seen_ids: set[str] = set()
    for lineno, rec in enumerate(rows[1:], start=2):
        where = f"{path}: line {lineno}"
        if not isinstance(rec, dict):
            raise DataError(f"{where}: record must be an object")
        unknown = set(rec) - _RECORD_KEYS
        if unknown:
            raise DataError(f"{where}: unknown key {sorted(unknown)[0]!r}")
        for req in ("id", "domain", "kind", "prompt"):
            if req not in rec:
                raise DataError(f"{where}: missing key {req!r}")
        if rec["kind"] not in PROMPT_KINDS:
            raise DataError(f"{where}: unknown prompt kind {rec['kind']!r}")
        if rec["id"] in seen_ids:
            raise DataError(f"{where}: duplicate prompt id {rec['id']!r}")
        seen_ids.add(rec["id"])
        if not isinstance(rec["prompt"], list) or not all(isinstance(s, str) for s in rec["prompt"]):
            raise DataError(f"{where}: prompt must be a list of token surfaces")
        try:
            tokens = tuple(vocabulary.encode(rec["prompt"]))
            gold = tuple(vocabulary.encode(rec["gold"])) if "gold" in rec else None
        except DataError as exc:
            raise DataError(f"{where}: {exc}") from None
        prompt = Prompt(
            id=rec["id"],
            domain=rec["domain"],
            kind=rec["kind"],
            tokens=tokens,
            gold=gold,
            required_aspects=tuple(rec.get("required_aspects", ())),
        )
        try:
            prompt.validate(vocabulary, max_prompt_len)
        except DataError as exc:
            raise DataError(f"{where}: {exc}") from None
        prompts.append(prompt)
    try:
        return PromptPool(header["pool"], header["kind"], tuple(prompts), vocabulary)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Topic audit

DEFAULT_AUDIT_RULES: tuple[tuple[str, str], ...] = (
    ("policy", "policy and history"),
    ("history", "policy and history"),
    ("health", "biomedicine and health"),
    ("bio", "biomedicine and health"),
    ("tech", "technology and engineering"),
    ("eng", "technology and engineering"),
    ("climate", "environment and earth"),
    ("earth", "environment and earth"),
    ("culture", "humanities and culture"),
    ("art", "humanities and culture"),
    ("*", "general analysis"),
)


def topic_audit(
    pool: PromptPool, rules: Sequence[tuple[str, str]] = DEFAULT_AUDIT_RULES
) -> dict[str, float]:
    """Assign each prompt to the first matching rule; return bucket percentages.

    A rule matches when its keyword equals the prompt's domain or one of its
    token surfaces; "*" matches everything and must be present so no prompt
    falls through. Percentages are full precision and sum to 100.
    """
    if not rules:
        raise ConfigError("audit needs at least one rule")
    if not any(kw == "*" for kw, _ in rules):
        raise ConfigError("audit rules must include a catch-all '*' rule")
    if len(pool) == 0:
        raise DataError(f"pool {pool.name} is empty, nothing to audit")

    buckets: dict[str, int] = {}
    for _, bucket in rules:
        buckets.setdefault(bucket, 0)
    for p in pool.prompts:
        surfaces = set(p.surfaces(pool.vocab)) | set(p.required_aspects) | {p.domain}
        for kw, bucket in rules:
            if kw == "*" or kw in surfaces:
                buckets[bucket] += 1
                break
    total = len(pool)
    return {bucket: 100.0 * n / total for bucket, n in buckets.items()}


def format_audit_table(percentages: dict[str, float]) -> str:
    """Two-column text table, one decimal per row, as used in reports."""
    width = max(len(b) for b in percentages)
    lines = [f"{bucket:<{width}}  {pct:5.1f}" for bucket, pct in percentages.items()]
    return "\n".join(lines)
