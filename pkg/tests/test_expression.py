"""Parser and equivalence checks against independently constructed values."""

from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskrl.errors import DataError, ExpressionSyntaxError
from deskrl.expression import DivisionByZero, evaluate, expressions_equivalent


def test_identity():
    assert expressions_equivalent("7", "7")


def test_rational_vs_decimal():
    # exact rationals: no float rounding in either direction
    assert expressions_equivalent("1/2", "0.5")
    assert expressions_equivalent("0.1", "1/10")
    assert not expressions_equivalent("1/3", "0.3333333333333333")


def test_precedence():
    assert expressions_equivalent("2+3*2", "8")
    assert not expressions_equivalent("2+3*2", "10")


def test_left_associativity_and_unary_minus():
    assert evaluate("2-3-4") == Fraction(-5)
    assert evaluate("12/8") == Fraction(3, 2)
    assert evaluate("-(2+3)") == Fraction(-5)
    assert evaluate("--2") == Fraction(2)


def test_unicode_operator_aliases():
    assert evaluate("3 × −2") == Fraction(-6)


def test_division_by_zero():
    with pytest.raises(DivisionByZero):
        evaluate("1/0")
    # equivalence treats it as a scoring question: flagged, not equivalent
    assert not expressions_equivalent("1/0", "0")
    assert not expressions_equivalent("0", "1/(2-2)")


@pytest.mark.parametrize(
    "text, position, expected",
    [
        ("2+", 2, "number or '('"),
        ("(2", 2, "')'"),
        ("2)", 1, "operator or end of input"),
        ("", 0, "number or '('"),
        (".5", 0, "number or '('"),
        ("2.", 2, "digit"),
        ("1//2", 2, "number or '('"),
    ],
)
def test_syntax_errors_carry_position_and_expectation(text, position, expected):
    with pytest.raises(ExpressionSyntaxError) as exc:
        evaluate(text)
    assert exc.value.position == position
    assert exc.value.expected == expected
    assert str(position) in str(exc.value)


def test_syntax_error_is_a_data_error():
    with pytest.raises(DataError):
        evaluate("2+")


# --- random expression trees with values computed during construction


@st.composite
def expression_trees(draw, depth=0):
    """(text, exact value) pairs built bottom-up."""
    if depth >= 3 or draw(st.booleans()):
        n = draw(st.integers(min_value=0, max_value=99))
        return str(n), Fraction(n)
    op = draw(st.sampled_from(["+", "-", "*", "/"]))
    lt, lv = draw(expression_trees(depth=depth + 1))
    rt, rv = draw(expression_trees(depth=depth + 1))
    if op == "/" and rv == 0:
        op = "+"
    value = {"+": lv + rv, "-": lv - rv, "*": lv * rv, "/": lv / rv if rv else None}[op]
    return f"({lt} {op} {rt})", value


@given(expression_trees())
@settings(max_examples=200, deadline=None)
def test_evaluate_matches_constructed_value(tree):
    text, value = tree
    assert evaluate(text) == value


@given(expression_trees(), expression_trees())
@settings(max_examples=100, deadline=None)
def test_equivalence_is_reflexive_and_symmetric(a, b):
    ta, va = a
    tb, vb = b
    assert expressions_equivalent(ta, ta)
    assert expressions_equivalent(ta, tb) == expressions_equivalent(tb, ta)
    assert expressions_equivalent(ta, tb) == (va == vb)
