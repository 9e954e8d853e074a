"""Exception types shared across the package."""
from __future__ import annotations


class CtrlTuneError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(CtrlTuneError):
    """Two distributions (or vectors) that must share a length do not."""


class SupportMismatch(CtrlTuneError):
    """KL divergence requested where the reference assigns zero mass to a
    token the left-hand distribution uses."""


class UnknownToken(CtrlTuneError):
    """A token string is not part of the vocabulary."""


class ParseError(CtrlTuneError):
    """A corpus/oracle/config file line could not be parsed."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f" ({path}" + (f":{line}" if line is not None else "") + ")"
        super().__init__(message + loc)
        self.path = path
        self.line = line


class BudgetExceeded(CtrlTuneError):
    """Exact enumeration would visit more suffixes than the configured budget."""


class UnsupportedOracle(CtrlTuneError):
    """The oracle cannot be compiled to a finite automaton."""


class DegenerateGuide(CtrlTuneError):
    """Every candidate next token received (numerically) zero guided mass."""


class InfeasibleConstraint(CtrlTuneError):
    """No sequence in the support satisfies the constraint."""


class EmptyAfterFilter(CtrlTuneError):
    """Filtering removed every training example."""


class ShapeMismatch(CtrlTuneError):
    """A checkpoint or parameter vector does not match the expected shape."""


class MissingLabel(CtrlTuneError):
    """An operation that needs oracle labels met an unlabeled example."""


class UnmatchedExample(CtrlTuneError):
    """An example matched zero (or several) subset rules of an adaptive run."""


class TemplateTokenMissing(CtrlTuneError):
    """The vocabulary lacks a token the classification template requires."""
