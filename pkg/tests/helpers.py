"""Shared oracles: brute-force enumeration and finite differences.

These deliberately avoid every shortcut the library takes, so that a test
failure points at the library, not at a shared assumption.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from deskrl.corpus import Prompt
from deskrl.policy import FeatureSpec, PolicyParams, next_token_dist


def random_policy(spec: FeatureSpec, seed: int, scale: float = 1.0) -> PolicyParams:
    rng = np.random.default_rng(seed)
    return PolicyParams(rng.normal(0.0, scale, size=spec.total_dim), spec.spec_id)


def enumerate_terminated(params: PolicyParams, spec: FeatureSpec, prompt: Prompt):
    """Yield (response, probability) for every terminated sequence.

    Walks next_token_dist recursively over all positive-probability
    continuations; feasible only for tiny vocabularies and response caps.
    """
    eos = spec.vocab.eos_id

    def walk(prefix: list[int], prob: float):
        dist = next_token_dist(params, spec, prompt, prefix)
        for tok, p in enumerate(dist):
            if p <= 0.0:
                continue
            if tok == eos:
                yield prefix + [tok], prob * float(p)
            else:
                yield from walk(prefix + [tok], prob * float(p))

    yield from walk([], 1.0)


def total_sequence_mass(params: PolicyParams, spec: FeatureSpec, prompt: Prompt) -> float:
    return sum(p for _, p in enumerate_terminated(params, spec, prompt))


def central_difference(f: Callable[[np.ndarray], float], w: np.ndarray, step: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(w)
    for i in range(w.size):
        up = w.copy()
        up[i] += step
        down = w.copy()
        down[i] -= step
        grad[i] = (f(up) - f(down)) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(numeric)), 1e-8)
    return float(np.linalg.norm(analytic - numeric)) / scale


def brute_force_pass_at_k(n: int, c: int, k: int) -> float:
    """Average the any-pass indicator over all C(n, k) subsets."""
    from itertools import combinations

    items = [1] * c + [0] * (n - c)
    subsets = list(combinations(range(n), k))
    hits = sum(1 for s in subsets if any(items[i] for i in s))
    return hits / len(subsets)
