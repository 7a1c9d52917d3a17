"""Recursive-descent arithmetic parser with exact rational evaluation.

Grammar (usual precedence, left associative):

    expr    := term (('+' | '-') term)*
    term    := factor (('*' | '/') factor)*
    factor  := '-' factor | primary
    primary := NUMBER | '(' expr ')'
    NUMBER  := digits ['.' digits]

Values are fractions.Fraction throughout, so 1/2 and 0.5 compare equal and
no float rounding can flip an equivalence verdict. The unicode minus and
multiplication signs are accepted as aliases for '-' and '*'.
"""

from __future__ import annotations

import logging
from fractions import Fraction

from .errors import ExpressionSyntaxError

logger = logging.getLogger(__name__)

_MINUS = {"-", "−"}
_TIMES = {"*", "×"}


class DivisionByZero(ArithmeticError):
    """Division by zero inside an otherwise well-formed expression."""


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def _peek(self) -> str:
        self._skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def parse(self) -> Fraction:
        value = self.expr()
        self._skip_ws()
        if self.pos != len(self.text):
            raise ExpressionSyntaxError(
                f"unexpected {self.text[self.pos]!r}", self.pos, "operator or end of input"
            )
        return value

    def expr(self) -> Fraction:
        value = self.term()
        while True:
            ch = self._peek()
            if ch == "+":
                self.pos += 1
                value = value + self.term()
            elif ch in _MINUS:
                self.pos += 1
                value = value - self.term()
            else:
                return value

    def term(self) -> Fraction:
        value = self.factor()
        while True:
            ch = self._peek()
            if ch in _TIMES:
                self.pos += 1
                value = value * self.factor()
            elif ch == "/":
                op_pos = self.pos
                self.pos += 1
                denom = self.factor()
                if denom == 0:
                    raise DivisionByZero(f"division by zero at position {op_pos}")
                value = value / denom
            else:
                return value

    def factor(self) -> Fraction:
        ch = self._peek()
        if ch in _MINUS:
            self.pos += 1
            return -self.factor()
        return self.primary()

    def primary(self) -> Fraction:
        ch = self._peek()
        if ch == "(":
            self.pos += 1
            value = self.expr()
            if self._peek() != ")":
                raise ExpressionSyntaxError("unbalanced parenthesis", self.pos, "')'")
            self.pos += 1
            return value
        if ch.isdigit():
            return self.number()
        what = repr(ch) if ch else "end of input"
        raise ExpressionSyntaxError(f"unexpected {what}", self.pos, "number or '('")

    def number(self) -> Fraction:
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        if self.pos < len(self.text) and self.text[self.pos] == ".":
            self.pos += 1
            frac_start = self.pos
            while self.pos < len(self.text) and self.text[self.pos].isdigit():
                self.pos += 1
            if self.pos == frac_start:
                raise ExpressionSyntaxError("bare decimal point", self.pos, "digit")
        return Fraction(self.text[start:self.pos])


def evaluate(text: str) -> Fraction:
    """Parse and evaluate an expression exactly.

    Raises ExpressionSyntaxError on malformed input (with position and the
    expected token class) and DivisionByZero when a denominator is zero.
    """
    if not isinstance(text, str) or not text.strip():
        raise ExpressionSyntaxError("empty expression", 0, "number or '('")
    return _Parser(text).parse()


def expressions_equivalent(left: str, right: str) -> bool:
    """Exact rational equality of two expressions.

    Syntax errors propagate; division by zero makes the pair non-equivalent
    and logs a warning rather than raising, since a malformed answer should
    score zero instead of aborting an evaluation run.
    """
    try:
        lv = evaluate(left)
        rv = evaluate(right)
    except DivisionByZero as exc:
        logger.warning("expression flagged, not equivalent: %s", exc)
        return False
    return lv == rv
