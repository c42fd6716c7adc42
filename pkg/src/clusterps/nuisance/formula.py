"""Feature-term formulas for the nuisance designs.

A formula is a list of terms. Each term is a product of factors joined by
``*`` (or ``:``). A factor is ``A``, ``D``, ``N``, a single feature column
(``x_2``, ``v_1``, ``xbar_1``) or a group: ``X`` (all ``x_k``), ``Xbar``
(all ``xbar_k``) and ``V`` (all ``v_k``). Groups expand to one column per
member; a product of groups expands to every combination. Terms whose group
is empty (e.g. ``V`` when the trial has no cluster covariates) vanish.

The intercept is always the first design column.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ConfigError

_GROUPS = {"X": r"x_\d+", "Xbar": r"xbar_\d+", "V": r"v_\d+"}


def parse_terms(spec: str | Sequence[str]) -> tuple[tuple[str, ...], ...]:
    if isinstance(spec, str):
        spec = [t for t in re.split(r"[,+]", spec) if t.strip()]
    terms = []
    for t in spec:
        factors = tuple(f.strip() for f in re.split(r"[*:]", t) if f.strip())
        if not factors:
            raise ConfigError(f"empty term in formula {spec!r}")
        terms.append(factors)
    return tuple(terms)


def _expand(factor: str, names: Sequence[str]) -> list[str]:
    if factor in ("A", "D"):
        return [factor]
    if factor in _GROUPS:
        pat = re.compile(_GROUPS[factor] + "$")
        return [n for n in names if pat.match(n)]
    if factor in names:
        return [factor]
    raise ConfigError(f"unknown formula factor {factor!r}; available: A, D, X, Xbar, V, {list(names)}")


@dataclass(frozen=True)
class Design:
    """Compiled formula: knows which columns to multiply for each design column."""

    terms: tuple[tuple[str, ...], ...]
    columns: tuple[tuple[str, ...], ...]  # expanded products, intercept excluded

    @classmethod
    def compile(cls, spec: str | Sequence[str], names: Sequence[str]) -> "Design":
        terms = parse_terms(spec)
        cols: list[tuple[str, ...]] = []
        for term in terms:
            for combo in itertools.product(*(_expand(f, names) for f in term)):
                key = tuple(sorted(combo))
                if key not in cols:
                    cols.append(key)
        return cls(terms, tuple(cols))

    def drop(self, factor: str) -> "Design":
        """Same design without columns involving ``factor``."""
        return Design(self.terms, tuple(c for c in self.columns if factor not in c))

    @property
    def labels(self) -> list[str]:
        return ["(intercept)"] + ["*".join(c) for c in self.columns]

    @property
    def uses(self) -> set[str]:
        return {f for c in self.columns for f in c}

    def matrix(self, features: np.ndarray, names: Sequence[str], A=None, D=None) -> np.ndarray:
        """Design matrix with intercept; ``A``/``D`` may be scalars or arrays."""
        n = features.shape[0]
        index = {nm: i for i, nm in enumerate(names)}
        out = np.empty((n, len(self.columns) + 1))
        out[:, 0] = 1.0
        special = {"A": A, "D": D}
        for k, combo in enumerate(self.columns, start=1):
            col = np.ones(n)
            for f in combo:
                if f in special:
                    val = special[f]
                    if val is None:
                        raise ConfigError(f"design needs {f} but none was supplied")
                    col = col * val
                else:
                    col = col * features[:, index[f]]
            out[:, k] = col
        return out
