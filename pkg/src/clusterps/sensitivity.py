"""Sensitivity analysis for departures from principal ignorability.

Three positive sensitivity functions compare conditional outcome means
across strata that are pooled in an observed (A, D) cell:

* alpha: compliers over never-takers under control without uptake,
* beta: compliers over always-takers under treatment with uptake,
* gamma: compliers over never-takers under treatment without uptake.

They enter the estimators through cell weights ``omega``; all functions
equal to 1 recovers the estimators that assume ignorability.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import IndividualData
from .errors import ConfigError, NonPositiveDenominator
from .estimators import (
    assemble_effects,
    default_strata,
    eif_components,
    eif_estimates,
    theta_mo,
    theta_name,
    var_np,
)
from .expr import Expression
from .inference import wald_ci
from .nuisance.fit import NuisanceTable
from .principal_score import scheme

PARAMS = ("alpha", "beta", "gamma")


@dataclass(frozen=True)
class SensitivityFunctions:
    """Each function is a positive constant or an expression over feature names."""

    alpha: float | str = 1.0
    beta: float | str = 1.0
    gamma: float | str = 1.0

    def __post_init__(self):
        for name in PARAMS:
            v = getattr(self, name)
            if isinstance(v, str):
                try:
                    v = float(v)
                except ValueError:
                    Expression(v)  # validate syntax now
                    continue
                object.__setattr__(self, name, v)
            if not float(v) > 0.0:
                raise ConfigError(f"sensitivity function {name} must be positive, got {v}")

    def values(self, name: str, features: np.ndarray | None = None, names: Sequence[str] = ()) -> np.ndarray | float:
        v = getattr(self, name)
        if not isinstance(v, str):
            return float(v)
        env = {n: features[:, i] for i, n in enumerate(names)}
        out = np.asarray(Expression(v)(env), dtype=float) * np.ones(features.shape[0])
        bad = np.flatnonzero(~(out > 0.0))
        if bad.size:
            raise NonPositiveDenominator(f"sensitivity function {name} is not positive", int(bad[0]))
        return out

    def is_identity(self) -> bool:
        return all(getattr(self, n) == 1.0 for n in PARAMS)

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in PARAMS}


def _check_denominator(den, what: str):
    den = np.asarray(den)
    bad = np.flatnonzero(~(den > 0.0))
    if bad.size:
        raise NonPositiveDenominator(f"omega denominator for {what} is not positive", int(bad[0]) if den.ndim else None)


def omega_weight(g: str, cell, p11, p01, alpha=1.0, beta=1.0, gamma=1.0, mode: str = "standard"):
    """Cell weight omega_g(a, a*) from the uptake surface and sensitivity values."""
    s = scheme(g, mode)
    a, a_star = s.check_cell(cell)
    p11 = np.asarray(p11, dtype=float)
    p01 = np.asarray(p01, dtype=float)
    one = np.ones(np.broadcast(p11, p01).shape)

    def w_at():
        den = beta * p11 + (1.0 - beta) * p01
        _check_denominator(den, "always-takers")
        return p11 / den

    def w_nt():
        den = 1.0 - alpha * p01 + (alpha - 1.0) * p11
        _check_denominator(den, "never-takers")
        return (1.0 - p01) / den

    if g == "at":
        return w_at() if (a, a_star) == (1, 0) else one
    if g == "nt":
        return w_nt() if (a, a_star) == (0, 0) else one
    if (a, a_star) == (1, 1):
        # always-takers are absent under strong monotonicity, so beta drops out
        return one if mode == "strong" else beta * w_at()
    if (a, a_star) == (0, 0):
        return alpha * w_nt()
    return gamma * one


def _omega_fn(data: IndividualData, table: NuisanceTable, s: SensitivityFunctions):
    vals = {n: s.values(n, data.features, data.names) for n in PARAMS}

    def fn(g, cell):
        return omega_weight(g, cell, table.p11, table.p01, vals["alpha"], vals["beta"], vals["gamma"], table.mode)

    return fn


def theta_bc(g: str, cell, data: IndividualData, table: NuisanceTable, s: SensitivityFunctions,
             method: str = "np") -> tuple[float, float | None]:
    """Bias-corrected cell estimate; ``table`` should be cross-fitted for ``np``."""
    sch = scheme(g, table.mode)
    cell = sch.check_cell(cell)
    omega = _omega_fn(data, table, s)(g, cell)
    if method == "mo":
        return theta_mo(g, cell, data, table, omega=omega), None
    if method not in ("np", "dr"):
        raise ConfigError(f"unknown bias-corrected method {method!r}")
    c = eif_components(g, cell, data, table, omega=omega)
    se = float(np.sqrt(var_np(c.psi1, c.psi2, c.theta, data))) if method == "np" else None
    return c.theta, se


def bc_estimates(data: IndividualData, table: NuisanceTable, s: SensitivityFunctions, strata=None,
                 method: str = "np", effect_variance: str = "cellwise") -> dict[str, tuple[float, float | None]]:
    """All bias-corrected cell estimates and effects for ``strata``."""
    omega = _omega_fn(data, table, s)
    if method == "np":
        return eif_estimates(data, table, strata, omega=omega, effect_variance=effect_variance)
    if method == "mo":
        return {k: (v, None) for k, v in _mo_estimates(data, table, strata, omega).items()}
    raise ConfigError(f"unknown bias-corrected method {method!r}")


def _mo_estimates(data, table, strata, omega):
    strata = default_strata(table.mode) if strata is None else tuple(strata)
    out = {}
    for g in strata:
        sch = scheme(g, table.mode)
        th = {c: theta_mo(g, c, data, table, omega=omega(g, c)) for c in sch.valid_cells}
        out.update({theta_name(g, c): v for c, v in th.items()})
        out.update(assemble_effects(g, th, table.mode))
    return out


# Which sensitivity functions each effect depends on.
_DEPENDENCE = {
    "standard": {
        "co": {"PCE": {"alpha", "beta"}, "ICE": {"beta", "gamma"}, "NAE": {"alpha", "gamma"}},
        "nt": {"PCE": {"alpha"}, "ICE": set(), "NAE": {"alpha"}},
        "at": {"PCE": {"beta"}, "ICE": set(), "NAE": {"beta"}},
    },
    "strong": {
        "co": {"PCE": {"alpha"}, "ICE": {"gamma"}, "NAE": {"alpha", "gamma"}},
        "nt": {"PCE": {"alpha"}, "ICE": set(), "NAE": {"alpha"}},
    },
}


def dependence_filter(g: str, estimand: str, mode: str = "standard") -> frozenset[str]:
    """Sensitivity functions that the bias-corrected ``estimand`` of stratum ``g`` depends on."""
    scheme(g, mode)
    try:
        return frozenset(_DEPENDENCE[mode][g][estimand])
    except KeyError:
        raise ConfigError(f"unknown estimand {estimand!r}; expected PCE, ICE or NAE") from None


def parse_estimand(name: str) -> tuple[str, str]:
    """``'NAE_co'`` -> ``('co', 'NAE')``."""
    try:
        eff, g = name.split("_")
    except ValueError:
        raise ConfigError(f"estimand must look like NAE_co, got {name!r}") from None
    if eff not in ("PCE", "ICE", "NAE"):
        raise ConfigError(f"unknown effect {eff!r} in {name!r}")
    return g, eff


def grid_axis(lo: float, hi: float, step: float) -> np.ndarray:
    if not (lo > 0 and hi >= lo):
        raise ConfigError(f"sensitivity range must be positive and ordered, got [{lo}, {hi}]")
    if not step > 0:
        raise ConfigError(f"grid step must be positive, got {step}")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return np.round(lo + step * np.arange(n), 12)


@dataclass(frozen=True)
class GridRow:
    alpha: float
    beta: float
    gamma: float
    estimand: str
    estimate: float
    se: float | None
    ci_lo: float | None
    ci_hi: float | None


def grid_scan(estimands: Sequence[str], data: IndividualData, table: NuisanceTable,
              ranges: dict | None = None, step: float = 0.25, level: float = 0.95,
              method: str = "np", effect_variance: str = "cellwise") -> list[GridRow]:
    """Bias-corrected effects over a constant (alpha, beta, gamma) grid.

    The grid spans the union of the axes the requested estimands depend on;
    each estimand is evaluated only over its own axes (others fixed at 1)
    and repeated along the rest. Rows are ordered by grid index (alpha
    slowest, then beta, then gamma) and then by estimand order.
    """
    ranges = dict(ranges or {})
    for k in ranges:
        if k not in PARAMS:
            raise ConfigError(f"unknown sensitivity parameter {k!r}")
    parsed = [parse_estimand(e) for e in estimands]
    deps = [dependence_filter(g, eff, table.mode) for g, eff in parsed]
    union = [p for p in PARAMS if any(p in d for d in deps)]
    axes = {p: grid_axis(*ranges.get(p, (0.5, 2.0)), step) if p in union else np.array([1.0]) for p in PARAMS}

    cache: dict = {}

    def evaluate(g, eff, point):
        key = (g, tuple(sorted(point.items())))
        if key not in cache:
            s = SensitivityFunctions(**point)
            cache[key] = bc_estimates(data, table, s, strata=[g], method=method, effect_variance=effect_variance)
        return cache[key][f"{eff}_{g}"]

    rows = []
    for a, b, c in itertools.product(axes["alpha"], axes["beta"], axes["gamma"]):
        full = {"alpha": float(a), "beta": float(b), "gamma": float(c)}
        for name, (g, eff), dep in zip(estimands, parsed, deps):
            point = {p: (full[p] if p in dep else 1.0) for p in PARAMS}
            est, se = evaluate(g, eff, point)
            lo = hi = None
            if se is not None:
                lo, hi = wald_ci(est, se, level)
            rows.append(GridRow(full["alpha"], full["beta"], full["gamma"], name, est, se, lo, hi))
    return rows
