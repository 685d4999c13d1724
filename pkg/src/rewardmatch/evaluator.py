"""Integer-expression evaluation: the ground-truth property oracle.

Evaluates python-style integer arithmetic with ``+ - * //`` and
parentheses.  ``//`` is floor division (rounds toward negative infinity),
``*`` and ``//`` bind tighter than ``+`` and ``-``, all operators are
left-associative.  Evaluation is a total function: every failure mode is
encoded in the returned outcome, nothing is raised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "EvalOutcome",
    "eval_expr",
    "is_valid",
    "expression_properties",
    "PropertyOracle",
    "ScalarValueOracle",
    "StandardizedVectorOracle",
    "PARSE_ERROR",
    "DIVISION_BY_ZERO",
    "OVERFLOW",
    "OUT_OF_RANGE",
    "TOO_LONG",
]

PARSE_ERROR = "parse_error"
DIVISION_BY_ZERO = "division_by_zero"
OVERFLOW = "overflow"
OUT_OF_RANGE = "out_of_range"
TOO_LONG = "too_long"

MAX_EXPR_CHARS = 30
VALUE_BOUND = 1000          # final value must lie in the open (-1000, 1000)
_INT128_MAX = 2**127 - 1    # intermediate values are 128-bit checked
_INT128_MIN = -(2**127)


@dataclass(frozen=True)
class EvalOutcome:
    """Either an exact integer value or the reason the string is invalid."""

    value: int | None = None
    invalid_reason: str | None = None

    @property
    def ok(self):
        return self.value is not None

    def __post_init__(self):
        if (self.value is None) == (self.invalid_reason is None):
            raise ValueError("exactly one of value/invalid_reason must be set")


class _Invalid(Exception):
    def __init__(self, reason):
        self.reason = reason


class _Parser:
    """Recursive-descent parser/evaluator over a character stream.

    Two-character lookahead distinguishes ``//`` from a lone ``/``, which
    is a parse error (the grammar never emits one, model samples can).
    """

    def __init__(self, text):
        self.text = text
        self.pos = 0

    def peek(self, offset=0):
        i = self.pos + offset
        return self.text[i] if i < len(self.text) else ""

    def expr(self):
        value = self.term()
        while True:
            ch = self.peek()
            if ch == "+":
                self.pos += 1
                value = self._checked(value + self.term())
            elif ch == "-":
                self.pos += 1
                value = self._checked(value - self.term())
            else:
                return value

    def term(self):
        value = self.atom()
        while True:
            ch = self.peek()
            if ch == "*":
                self.pos += 1
                value = self._checked(value * self.atom())
            elif ch == "/":
                if self.peek(1) != "/":
                    raise _Invalid(PARSE_ERROR)
                self.pos += 2
                divisor = self.atom()
                if divisor == 0:
                    raise _Invalid(DIVISION_BY_ZERO)
                value = self._checked(value // divisor)
            else:
                return value

    def atom(self):
        ch = self.peek()
        if ch == "(":
            self.pos += 1
            value = self.expr()
            if self.peek() != ")":
                raise _Invalid(PARSE_ERROR)
            self.pos += 1
            return value
        if ch.isdigit():
            return self.number()
        raise _Invalid(PARSE_ERROR)

    def number(self):
        start = self.pos
        while self.peek().isdigit():
            self.pos += 1
        digits = self.text[start:self.pos]
        if len(digits) > 1 and digits[0] == "0":
            raise _Invalid(PARSE_ERROR)       # leading zeros never occur in the grammar
        value = int(digits)
        if value > _INT128_MAX:
            raise _Invalid(OVERFLOW)
        return value

    @staticmethod
    def _checked(value):
        if value > _INT128_MAX or value < _INT128_MIN:
            raise _Invalid(OVERFLOW)
        return value


def eval_expr(s):
    """Evaluate an expression string; total over all inputs.

    The 30-character length filter applies first, then parsing and exact
    arithmetic with 128-bit overflow checks, then the (-1000, 1000) range
    check on the final value only.
    """
    if len(s) > MAX_EXPR_CHARS:
        return EvalOutcome(invalid_reason=TOO_LONG)
    parser = _Parser(s)
    try:
        value = parser.expr()
        if parser.pos != len(s):
            raise _Invalid(PARSE_ERROR)
    except _Invalid as exc:
        return EvalOutcome(invalid_reason=exc.reason)
    if not (-VALUE_BOUND < value < VALUE_BOUND):
        return EvalOutcome(invalid_reason=OUT_OF_RANGE)
    return EvalOutcome(value=value)


def is_valid(s):
    """True iff the string parses, evaluates, and passes all filters."""
    return eval_expr(s).ok


def _operator_count(s):
    count = 0
    i = 0
    while i < len(s):
        ch = s[i]
        if ch in "+-*":
            count += 1
        elif ch == "/":
            count += 1
            i += 1          # '//' counts once
        i += 1
    return count


def expression_properties(s):
    """Raw 3-vector [value, character length, operator count], or None."""
    outcome = eval_expr(s)
    if not outcome.ok:
        return None
    return np.array([outcome.value, len(s), _operator_count(s)], dtype=np.float64)


class PropertyOracle:
    """Deterministic map from an expression string to its property vector.

    Total over all strings: returns None for invalid input instead of
    raising.
    """

    arity: int

    def evaluate(self, s):
        raise NotImplementedError


class ScalarValueOracle(PropertyOracle):
    """The 1-property oracle: the expression's integer value."""

    arity = 1

    def evaluate(self, s):
        outcome = eval_expr(s)
        if not outcome.ok:
            return None
        return np.array([outcome.value], dtype=np.float64)


class StandardizedVectorOracle(PropertyOracle):
    """[value, length, operator count], standardized by training statistics.

    Each component is shifted/scaled to zero mean and unit standard
    deviation over the strings the oracle was fit on.
    """

    arity = 3

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        if self.mean.shape != (3,) or self.std.shape != (3,):
            raise ValueError("mean/std must be 3-vectors")
        if np.any(self.std <= 0):
            raise ValueError("std components must be positive")

    @classmethod
    def fit(cls, strings):
        raw = [expression_properties(s) for s in strings]
        raw = np.array([r for r in raw if r is not None])
        if len(raw) == 0:
            raise ValueError("no valid strings to fit on")
        std = raw.std(axis=0)
        std[std == 0] = 1.0
        return cls(raw.mean(axis=0), std)

    def evaluate(self, s):
        raw = expression_properties(s)
        if raw is None:
            return None
        return (raw - self.mean) / self.std

    def evaluate_raw(self, s):
        return expression_properties(s)
