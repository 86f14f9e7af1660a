"""Model-formula mini-language and design-matrix construction.

The grammar is deliberately tiny: ``resp ~ 1 + term (+ term)*`` where a term
is a variable name, a pairwise interaction ``a:b``, or a square ``a^2``.
Whitespace is insignificant and duplicate terms are rejected.  A formula also
carries the nesting level at which its design matrix is built: one row per
unit, per subcluster, or per cluster.

Cluster- and subcluster-level formulas may only reference variables that are
constant within each of their groups; referencing anything finer is reported
as a level violation, since it would break the conditional-exchangeability /
no-interference restrictions the missingness models rely on.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .data_model import ClusteredDataset, Level, Nesting
from .exceptions import FormulaSyntaxError, LevelViolation, UnknownVariable

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


@dataclass(frozen=True)
class Intercept:
    def column_name(self) -> str:
        return "1"

    def variables(self) -> tuple:
        return ()


@dataclass(frozen=True)
class Main:
    name: str

    def column_name(self) -> str:
        return self.name

    def variables(self) -> tuple:
        return (self.name,)


@dataclass(frozen=True)
class Interaction:
    left: str
    right: str

    def column_name(self) -> str:
        return f"{self.left}:{self.right}"

    def variables(self) -> tuple:
        return (self.left, self.right)

    def canonical(self) -> tuple:
        return ("interaction",) + tuple(sorted((self.left, self.right)))


@dataclass(frozen=True)
class Square:
    name: str

    def column_name(self) -> str:
        return f"{self.name}^2"

    def variables(self) -> tuple:
        return (self.name,)


Term = Union[Intercept, Main, Interaction, Square]


@dataclass(frozen=True)
class Formula:
    """Parsed model formula: response, right-hand terms, and its level."""

    response: str
    terms: tuple
    level: Level

    @property
    def column_names(self) -> tuple:
        return tuple(t.column_name() for t in self.terms)

    def text(self) -> str:
        return f"{self.response} ~ {' + '.join(self.column_names)}"

    def with_level(self, level: Level) -> "Formula":
        return Formula(self.response, self.terms, level)


def _term_key(term: Term):
    if isinstance(term, Interaction):
        return term.canonical()
    return term


def _check_name(name: str, position: int) -> str:
    if not _NAME_RE.match(name):
        raise FormulaSyntaxError(f"invalid variable name {name!r}", position)
    return name


def parse_formula(text: str, level: Level = Level.INDIVIDUAL) -> Formula:
    """Parse a formula string into a :class:`Formula`.

    Raises :class:`FormulaSyntaxError` with the character position of the
    offending token.  Unknown variables are only detected later, when a
    design matrix is built against a dataset.
    """
    if "~" not in text:
        raise FormulaSyntaxError("formula must contain '~'", len(text))
    lhs, rhs = text.split("~", 1)
    lhs_pos = 0
    response = lhs.strip()
    if not response:
        raise FormulaSyntaxError("missing response name", lhs_pos)
    _check_name(response, lhs_pos)

    terms = []
    seen = set()
    pos = text.index("~") + 1
    for raw in rhs.split("+"):
        token = raw.strip()
        tok_pos = pos + (len(raw) - len(raw.lstrip()))
        if not token:
            raise FormulaSyntaxError("empty term", tok_pos)
        if token == "1":
            term: Term = Intercept()
        elif ":" in token:
            left, _, right = token.partition(":")
            left, right = left.strip(), right.strip()
            if not left or not right:
                raise FormulaSyntaxError("malformed interaction", tok_pos)
            term = Interaction(_check_name(left, tok_pos),
                               _check_name(right, tok_pos))
        elif token.endswith("^2"):
            base = token[:-2].strip()
            if not base:
                raise FormulaSyntaxError("malformed square term", tok_pos)
            term = Square(_check_name(base, tok_pos))
        elif "^" in token:
            raise FormulaSyntaxError("only squares (name^2) are supported", tok_pos)
        else:
            term = Main(_check_name(token, tok_pos))
        key = _term_key(term)
        if key in seen:
            raise FormulaSyntaxError(f"duplicate term {token!r}", tok_pos)
        seen.add(key)
        terms.append(term)
        pos += len(raw) + 1

    if not terms:
        raise FormulaSyntaxError("formula has no right-hand terms", len(text))
    return Formula(response=response, terms=tuple(terms), level=level)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Dense design matrix aligned to units or to (sub)clusters."""

    values: np.ndarray
    column_names: tuple
    level: Level
    formula: Optional[Formula] = None

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]


def _variable_at_level(ds: ClusteredDataset, name: str, level: Level) -> np.ndarray:
    """Fetch a variable reduced to the formula's level, enforcing constancy."""
    if not ds.has_variable(name):
        raise UnknownVariable(name)
    column = ds.variable(name)
    if level is Level.INDIVIDUAL:
        return column
    if level is Level.SUBCLUSTER and ds.nesting is not Nesting.THREE_LEVEL:
        raise LevelViolation(name, level)
    if not ds.is_constant_within(name, level):
        raise LevelViolation(name, level)
    if level is Level.CLUSTER:
        return column[ds.cluster_starts]
    return column[ds.group_starts]


def build_design_matrix(formula: Formula, ds: ClusteredDataset,
                        ms=None) -> DesignMatrix:
    """Evaluate a formula against a dataset.

    Returns one row per unit for individual-level formulas, one per
    subcluster or cluster otherwise.  Columns follow the formula's term
    order; an intercept is an all-ones column.
    """
    level = formula.level
    if level is Level.INDIVIDUAL:
        n_rows = ds.n_units
    elif level is Level.CLUSTER:
        n_rows = ds.n_clusters
    else:
        if ds.nesting is not Nesting.THREE_LEVEL:
            raise LevelViolation("<subcluster formula>", level)
        n_rows = ds.n_subclusters

    cache: dict = {}

    def fetch(name: str) -> np.ndarray:
        if name not in cache:
            cache[name] = _variable_at_level(ds, name, level)
        return cache[name]

    cols = np.empty((n_rows, len(formula.terms)), dtype=np.float64)
    for j, term in enumerate(formula.terms):
        if isinstance(term, Intercept):
            cols[:, j] = 1.0
        elif isinstance(term, Main):
            cols[:, j] = fetch(term.name)
        elif isinstance(term, Interaction):
            cols[:, j] = fetch(term.left) * fetch(term.right)
        elif isinstance(term, Square):
            base = fetch(term.name)
            cols[:, j] = base * base
        else:  # pragma: no cover
            raise TypeError(f"unknown term type {term!r}")
    if np.isnan(cols).any():
        raise UnknownVariable("design matrix contains NaN entries")
    return DesignMatrix(values=cols, column_names=formula.column_names,
                        level=level, formula=formula)
