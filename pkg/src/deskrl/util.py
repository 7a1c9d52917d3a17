"""Seed derivation, canonical JSON, and atomic file writes.

Everything that touches randomness or disk goes through here so that runs
are reproducible byte-for-byte: seeds are derived by hashing declared parts
(never by consuming a shared RNG stream), floats are serialized with 17
significant digits (exact round-trip for IEEE754 doubles), and files are
written to a temp path then renamed.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .errors import DataError, NumericError


def stable_seed(*parts: Any) -> int:
    """Derive a 128-bit seed from the given parts.

    Parts are joined by their repr, so (7, "x") and ("7x",) differ. The
    result depends only on the values, not on call order elsewhere, which is
    what makes per-rollout seeding independent of scheduling.
    """
    text = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def derive_rng(*parts: Any) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(stable_seed(*parts))))


def rollout_seed(run_seed: int, prompt_id: str, rollout_index: int) -> int:
    """Seed for one rollout; a pure function of its identifying triple."""
    return stable_seed("rollout", run_seed, prompt_id, rollout_index)


def fmt17(x: float) -> str:
    """Format a float with 17 significant digits; exact round-trip.

    The string always parses back as a JSON float (never an int), and
    negative zero keeps its sign.
    """
    if not math.isfinite(x):
        raise NumericError(f"cannot serialize non-finite value {x!r}")
    if x == 0.0:
        return "-0.0" if math.copysign(1.0, x) < 0 else "0.0"
    s = format(x, ".17g")
    if "." not in s and "e" not in s and "E" not in s:
        s += ".0"
    return s


def _dump(obj: Any, out: list, sort_keys: bool) -> None:
    if obj is None or obj is True or obj is False:
        out.append("null" if obj is None else ("true" if obj else "false"))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, (int, np.integer)) and not isinstance(obj, bool):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(fmt17(float(obj)))
    elif isinstance(obj, dict):
        keys = sorted(obj) if sort_keys else list(obj)
        out.append("{")
        for i, k in enumerate(keys):
            if not isinstance(k, str):
                raise DataError(f"JSON object keys must be strings, got {k!r}")
            if i:
                out.append(",")
            out.append(json.dumps(k))
            out.append(":")
            _dump(obj[k], out, sort_keys)
        out.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        out.append("[")
        for i, item in enumerate(seq):
            if i:
                out.append(",")
            _dump(item, out, sort_keys)
        out.append("]")
    else:
        raise DataError(f"cannot serialize {type(obj).__name__} to JSON")


def dumps_compact(obj: Any, sort_keys: bool = False) -> str:
    """Deterministic single-line JSON with 17-digit floats."""
    out: list = []
    _dump(obj, out, sort_keys)
    return "".join(out)


def canonical_json(obj: Any) -> str:
    """Canonical form used for hashing: sorted keys, compact separators."""
    return dumps_compact(obj, sort_keys=True)


def config_hash(mapping: dict) -> str:
    return hashlib.sha256(canonical_json(mapping).encode("utf-8")).hexdigest()


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    lines = [dumps_compact(rec, sort_keys=True) for rec in records]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON ({exc})") from exc
    return out
