"""Candidate-function libraries for sparse regression.

A library is an ordered list of named terms; evaluating it on named feature
columns produces the dense regression matrix.  Standard terms are monomials
in the features (products of powers, including square roots), parsed from
compact names like ``"x^2*u_xx"`` so specs serialize as plain string lists.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_same_length

__all__ = ["Term", "LibrarySpec", "LibraryMatrix", "build_library"]

_FACTOR_RE = re.compile(r"^(?:sqrt\((?P<sq>\w+)\)|(?P<base>\w+)(?:\^(?P<pow>-?\d+(?:\.\d+)?))?)$")


def _parse_monomial(name):
    """Parse ``"x^2*u_xx"`` style names into {feature: exponent}."""
    powers: dict[str, float] = {}
    for factor in name.split("*"):
        factor = factor.strip()
        if factor == "1":
            continue
        m = _FACTOR_RE.match(factor)
        if m is None:
            raise ValueError(f"cannot parse library term factor {factor!r}")
        if m.group("sq") is not None:
            feat, power = m.group("sq"), 0.5
        else:
            feat = m.group("base")
            power = float(m.group("pow")) if m.group("pow") else 1.0
        powers[feat] = powers.get(feat, 0.0) + power
    return powers


@dataclass(frozen=True)
class Term:
    """One candidate function: a named scalar function of named features."""

    name: str
    powers: dict = None
    func: object = None  # optional callable(features: dict) -> ndarray

    @classmethod
    def parse(cls, name):
        return cls(name, powers=_parse_monomial(name))

    @property
    def features(self):
        if self.powers is not None:
            return frozenset(self.powers)
        return frozenset()

    def evaluate(self, features):
        if self.func is not None:
            return np.asarray(self.func(features), dtype=float)
        n = len(next(iter(features.values()))) if features else 0
        out = np.ones(n)
        for feat, power in self.powers.items():
            if feat not in features:
                raise KeyError(f"term {self.name!r} needs feature {feat!r}")
            col = np.asarray(features[feat], dtype=float)
            out = out * (col**power)
        return out


@dataclass(frozen=True)
class LibrarySpec:
    """Ordered collection of uniquely named candidate terms."""

    terms: tuple

    def __post_init__(self):
        terms = tuple(self.terms)
        names = [t.name for t in terms]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate term names in library: {names}")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def from_names(cls, names):
        return cls(tuple(Term.parse(n) for n in names))

    @property
    def names(self):
        return [t.name for t in self.terms]

    @property
    def required_features(self):
        out = set()
        for t in self.terms:
            out |= t.features
        return out

    def __len__(self):
        return len(self.terms)


@dataclass(frozen=True)
class LibraryMatrix:
    """Evaluated library: rows are samples, columns are terms."""

    values: np.ndarray
    names: list
    column_norms: np.ndarray = field(default=None, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("library matrix must be 2-dimensional")
        if values.shape[1] != len(self.names):
            raise ValueError("column count does not match term names")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", list(self.names))

    @property
    def shape(self):
        return self.values.shape


def build_library(spec, features):
    """Evaluate ``spec`` on named feature columns; rejects non-finite output."""
    features = {k: np.asarray(v, dtype=float) for k, v in features.items()}
    if features:
        n = check_same_length(**features)
    else:
        n = 0
    if len(spec) == 0:
        return LibraryMatrix(np.empty((n, 0)), [])
    cols = []
    for term in spec.terms:
        col = term.evaluate(features)
        bad = ~np.isfinite(col)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ValueError(f"term {term.name!r} produced a non-finite value at row {row}")
        cols.append(col)
    return LibraryMatrix(np.column_stack(cols), spec.names)
