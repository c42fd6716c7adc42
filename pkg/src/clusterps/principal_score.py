"""Principal scores and stratum proportions.

Each stratum g is encoded by a tuple (a_dag, d_dag, h) so that

    e_g(C) = p(a_dag, d_dag, C) - h * p(0, 1, C)

and by the uptake d* its members show in each valid (a, a*) cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import IndividualData
from .errors import ConfigError, InvalidCell, StratumUnavailable

STRATA = ("at", "co", "nt", "de")
MODES = ("standard", "strong")


@dataclass(frozen=True)
class StratumScheme:
    stratum: str
    a_dagger: int
    d_dagger: int
    h: int
    valid_cells: tuple[tuple[int, int], ...]

    def d_star(self, a: int, a_star: int) -> int:
        if self.stratum == "at":
            return 1
        if self.stratum == "nt":
            return 0
        if self.stratum == "co":
            return a_star
        raise StratumUnavailable("defiers have no identified cells")

    def check_cell(self, cell: tuple[int, int]) -> tuple[int, int]:
        cell = (int(cell[0]), int(cell[1]))
        if cell not in self.valid_cells:
            raise InvalidCell(f"cell {cell} is not valid for stratum {self.stratum}; valid: {self.valid_cells}")
        return cell


SCHEMES = {
    "at": StratumScheme("at", 0, 1, 0, ((1, 0), (0, 0))),
    "co": StratumScheme("co", 1, 1, 1, ((1, 1), (1, 0), (0, 0))),
    "nt": StratumScheme("nt", 1, 0, 0, ((1, 0), (0, 0))),
    "de": StratumScheme("de", 0, 1, 1, ()),
}


def scheme(g: str, mode: str = "standard") -> StratumScheme:
    """Scheme of an estimable stratum; rejects defiers and, under strong monotonicity, always-takers."""
    if g not in SCHEMES:
        raise ConfigError(f"unknown stratum {g!r}; expected one of {STRATA}")
    if mode not in MODES:
        raise ConfigError(f"monotonicity mode must be one of {MODES}, got {mode!r}")
    if g == "de":
        raise StratumUnavailable("defier effects are not identified under monotonicity")
    if g == "at" and mode == "strong":
        raise StratumUnavailable("always-takers do not exist under strong monotonicity")
    return SCHEMES[g]


def p_cell(p11: np.ndarray, p01: np.ndarray, a: int, d: int) -> np.ndarray:
    q = p11 if a == 1 else p01
    return q if d == 1 else 1.0 - q


@dataclass(frozen=True, eq=False)
class PrincipalScore:
    raw: np.ndarray
    floored: np.ndarray

    @property
    def n_floored(self) -> int:
        return int(np.sum(self.raw < 0.0))


def principal_score_raw(g: str, p11, p01) -> np.ndarray:
    """p(a_dag, d_dag) - h * p(0,1) without flooring (defiers give exactly 0)."""
    s = SCHEMES[g]
    p11 = np.asarray(p11, dtype=float)
    p01 = np.asarray(p01, dtype=float)
    if g == "de":
        return np.zeros(np.broadcast(p11, p01).shape)
    base = p_cell(p11, p01, s.a_dagger, s.d_dagger)
    return base - p01 if s.h else base + 0.0 * p01


def principal_score(g: str, p11, p01) -> PrincipalScore:
    """Principal score of stratum ``g`` from the uptake surface, floored at 0."""
    if g not in SCHEMES:
        raise ConfigError(f"unknown stratum {g!r}")
    raw = principal_score_raw(g, p11, p01)
    return PrincipalScore(raw, np.maximum(raw, 0.0))


def stratum_proportion(g: str, data: IndividualData, p11, p01) -> float:
    """(1/K) sum_i (W_i/N_i) sum_j e_g over (1/K) sum_i W_i, with floored scores."""
    e = principal_score(g, p11, p01).floored
    return float(data.cluster_sum(e).sum() / data.W.sum())


def score_diagnostics(p11, p01, mode: str) -> dict:
    """Per-stratum floored-score counts and the maximum pre-floor sum-to-one error."""
    strata = ("co", "nt") if mode == "strong" else ("at", "co", "nt")
    raws = {g: principal_score_raw(g, p11, p01) for g in STRATA}
    total = sum(raws.values())
    return {
        "floored": {g: int(np.sum(raws[g] < 0.0)) for g in strata},
        "max_sum_error": float(np.max(np.abs(total - 1.0))) if np.size(total) else 0.0,
    }
