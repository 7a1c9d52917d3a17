"""Shared token vocabulary for all task families.

One fixed vocabulary backs every pool in a suite: two reserved control
tokens (end-of-sequence and the answer marker), digits and operators for
arithmetic, a small letter alphabet for transduction, aspect words for the
structured-writing family, and filler words. Smaller vocabularies are
prefixes of the full layout, so a 16-token vocabulary is exactly the
arithmetic core.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .errors import ConfigError, DataError

EOS = "<eos>"
MARKER = "<ans>"

DIGIT_SURFACES = tuple(str(d) for d in range(10))
OPERATOR_SURFACES = ("+", "-", "*", "=")
PAREN_SURFACES = ("(", ")")
INSTRUCTION_SURFACES = ("sort", "copy", "write")
SECTION = "sec"
LETTER_SURFACES = tuple("abcdefghij")
ASPECT_SURFACES = (
    "history", "policy", "health", "bio", "tech", "eng",
    "climate", "earth", "culture", "art", "logic", "data",
)
FILLER_SURFACES = (
    "the", "and", "of", "to", "in", "is", "for", "with", "on", "by",
    "at", "or", "as", "it", "be", "we", "an", "so", "if", "then",
)

_FULL_LAYOUT = (
    (EOS, MARKER)
    + DIGIT_SURFACES
    + OPERATOR_SURFACES
    + PAREN_SURFACES
    + INSTRUCTION_SURFACES
    + (SECTION,)
    + LETTER_SURFACES
    + ASPECT_SURFACES
    + FILLER_SURFACES
)
assert len(_FULL_LAYOUT) == 64


@dataclass(frozen=True)
class Token:
    id: int
    surface: str


class Vocabulary:
    """Immutable id <-> surface mapping with reserved control tokens."""

    def __init__(self, surfaces: tuple[str, ...]):
        if len(set(surfaces)) != len(surfaces):
            raise DataError("vocabulary surfaces must be unique")
        if EOS not in surfaces or MARKER not in surfaces:
            raise DataError("vocabulary must contain the reserved eos and answer-marker tokens")
        self.tokens = tuple(Token(i, s) for i, s in enumerate(surfaces))
        self._by_surface = {s: i for i, s in enumerate(surfaces)}
        self.eos_id = self._by_surface[EOS]
        self.marker_id = self._by_surface[MARKER]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, surface: str) -> bool:
        return surface in self._by_surface

    def id_of(self, surface: str) -> int:
        try:
            return self._by_surface[surface]
        except KeyError:
            raise DataError(f"unknown token surface {surface!r}") from None

    def surface(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise DataError(f"token id {token_id} out of range for vocabulary of {len(self.tokens)}")
        return self.tokens[token_id].surface

    def encode(self, surfaces: list[str]) -> list[int]:
        return [self.id_of(s) for s in surfaces]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.surface(i) for i in ids]

    def ids_of(self, surfaces) -> list[int]:
        return [self._by_surface[s] for s in surfaces if s in self._by_surface]

    def fingerprint(self) -> str:
        text = "\x1f".join(t.surface for t in self.tokens)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def build_vocabulary(vocab_size: int = 64) -> Vocabulary:
    """Deterministic vocabulary of the requested size.

    Sizes up to 64 are prefixes of the full layout; larger sizes append
    numbered filler words. The reserved tokens always occupy ids 0 and 1.
    """
    if vocab_size < 4:
        raise ConfigError(f"vocab_size must be at least 4, got {vocab_size}")
    if vocab_size <= len(_FULL_LAYOUT):
        return Vocabulary(_FULL_LAYOUT[:vocab_size])
    extra = tuple(f"w{i}" for i in range(vocab_size - len(_FULL_LAYOUT)))
    return Vocabulary(_FULL_LAYOUT + extra)
