"""Estimators of theta_g(a, a*) = E[W/N sum_j e_g mu(a, d*)] / E[W/N sum_j e_g] and derived effects.

Three estimators share the same building blocks:

* ``mo``: plug-in ratio of weighted sums of e_g * mu(a, d*).
* ``dr``: ratio of weighted sums of the influence-function components
  psi1 and psi2 with full-data parametric nuisances.
* ``np``: the same ratio with cross-fitted nuisances, plus a closed-form
  variance from the empirical second moment of the cluster-level EIF.

All sums run over individuals and are aggregated per cluster with weight
W_i / N_i, in cluster order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import IndividualData
from .errors import ArmMissing, ConfigError, ZeroDenominator
from .inference import contrast_variance
from .nuisance.fit import NuisanceTable
from .principal_score import p_cell, principal_score, principal_score_raw, scheme

DENOM_GUARD = 1e-8


def pi_arm(pi: float, a: int) -> float:
    return pi if a == 1 else 1.0 - pi


def eif_psi2(g: str, A, D, p11, p01, pi: float) -> np.ndarray:
    """Augmented principal score psi2 (depends on the stratum only)."""
    s = scheme(g)
    A = np.asarray(A, dtype=float)
    D = np.asarray(D, dtype=float)
    pdag = p_cell(p11, p01, s.a_dagger, s.d_dagger)
    ind_a = A if s.a_dagger == 1 else 1.0 - A
    ind_d = D if s.d_dagger == 1 else 1.0 - D
    out = ind_a * (ind_d - pdag) / pi_arm(pi, s.a_dagger) + pdag
    if s.h:
        out = out - (1.0 - A) * (D - p01) / pi_arm(pi, 0) - p01
    return out


def eif_psi1(g: str, cell, A, D, Y, p11, p01, mu, pi: float, psi2=None, omega=1.0) -> np.ndarray:
    """Influence component psi1 for theta_g(a, a*).

    ``mu`` is mu(a, d*, C). ``omega`` scales both the residual augmentation
    and the regression term (sensitivity weights); 1 gives the base EIF.
    """
    s = scheme(g)
    a, a_star = s.check_cell(cell)
    d_star = s.d_star(a, a_star)
    A = np.asarray(A, dtype=float)
    D = np.asarray(D, dtype=float)
    if psi2 is None:
        psi2 = eif_psi2(g, A, D, p11, p01, pi)
    ind = (A if a == 1 else 1.0 - A) * (D if d_star == 1 else 1.0 - D)
    e = principal_score_raw(g, p11, p01)
    ipw = ind / (pi_arm(pi, a) * p_cell(p11, p01, a, d_star))
    return omega * ipw * (Y - mu) * e + psi2 * omega * mu


def ratio(data: IndividualData, num: np.ndarray, den: np.ndarray, what: str = "theta") -> float:
    """sum_i (W/N) sum_j num / sum_i (W/N) sum_j den, guarded at 1e-8 mean mass."""
    d = data.cluster_sum(den).sum()
    if not d / data.K > DENOM_GUARD:
        raise ZeroDenominator(f"{what}: estimated stratum mass {d / data.K:.3g} is not positive")
    return float(data.cluster_sum(num).sum() / d)


def theta_mo(g: str, cell, data: IndividualData, table: NuisanceTable, omega=1.0) -> float:
    s = scheme(g, table.mode)
    a, a_star = s.check_cell(cell)
    e = principal_score(g, table.p11, table.p01).floored
    mu = table.mu_at(a, s.d_star(a, a_star))
    return ratio(data, (omega * e) * mu, e, f"theta_mo[{g}{cell}]")


@dataclass(frozen=True, eq=False)
class EifComponents:
    g: str
    cell: tuple[int, int]
    psi1: np.ndarray
    psi2: np.ndarray
    theta: float
    denominator_hat: float  # (1/K) sum_i (W/N) sum_j psi2


def eif_components(g: str, cell, data: IndividualData, table: NuisanceTable, omega=1.0,
                   psi2=None) -> EifComponents:
    s = scheme(g, table.mode)
    a, a_star = s.check_cell(cell)
    if psi2 is None:
        psi2 = eif_psi2(g, data.A, data.D, table.p11, table.p01, data.pi)
    mu = table.mu_at(a, s.d_star(a, a_star))
    psi1 = eif_psi1(g, (a, a_star), data.A, data.D, data.Y, table.p11, table.p01, mu, data.pi,
                    psi2=psi2, omega=omega)
    theta = ratio(data, psi1, psi2, f"theta[{g}{cell}]")
    den = float(data.cluster_sum(psi2).sum() / data.K)
    return EifComponents(g, (a, a_star), psi1, psi2, theta, den)


def theta_dr(g: str, cell, data: IndividualData, table: NuisanceTable) -> float:
    """EIF ratio with full-data (parametric) nuisance predictions in ``table``."""
    return eif_components(g, cell, data, table).theta


def theta_np(g: str, cell, data: IndividualData, table: NuisanceTable) -> tuple[float, float]:
    """EIF ratio with cross-fitted predictions in ``table``, and its standard error."""
    c = eif_components(g, cell, data, table)
    return c.theta, float(np.sqrt(var_np(c.psi1, c.psi2, c.theta, data)))


def var_np(psi1, psi2, theta: float, data: IndividualData) -> float:
    K = data.K
    infl = data.cluster_sum(psi1 - psi2 * theta)
    den = data.cluster_sum(psi2).sum() / K
    if abs(den) <= DENOM_GUARD:
        raise ZeroDenominator(f"stratum mass {den:.3g} too small for a variance")
    return float(np.sum(infl ** 2) / K ** 2 / den ** 2)


# --- effects ------------------------------------------------------------------

# Each effect as a contrast over cells (a, a*) of one stratum. ICE of
# always-/never-takers is identically zero and carries no contrast.
EFFECT_CONTRASTS = {
    "co": {
        "ICE": {(1, 1): 1.0, (1, 0): -1.0},
        "NAE": {(1, 0): 1.0, (0, 0): -1.0},
        "PCE": {(1, 1): 1.0, (0, 0): -1.0},
    },
    "nt": {"NAE": {(1, 0): 1.0, (0, 0): -1.0}, "PCE": {(1, 0): 1.0, (0, 0): -1.0}, "ICE": {}},
    "at": {"NAE": {(1, 0): 1.0, (0, 0): -1.0}, "PCE": {(1, 0): 1.0, (0, 0): -1.0}, "ICE": {}},
}


def assemble_effects(g: str, theta: dict, mode: str = "standard") -> dict[str, float]:
    """ICE/NAE/PCE of stratum ``g`` from its cell estimates ``theta[(a, a*)]``.

    PCE of compliers is formed as ICE + NAE so the decomposition holds
    exactly in floating point.
    """
    scheme(g, mode)
    if g == "co":
        ice = theta[(1, 1)] - theta[(1, 0)]
        nae = theta[(1, 0)] - theta[(0, 0)]
        return {"ICE_co": ice, "NAE_co": nae, "PCE_co": ice + nae}
    nae = theta[(1, 0)] - theta[(0, 0)]
    return {f"ICE_{g}": 0.0, f"NAE_{g}": nae, f"PCE_{g}": nae}


def itt_estimate(data: IndividualData) -> float:
    """Difference in W-weighted cluster-mean outcomes between arms."""
    ybar = np.bincount(data.cluster, weights=data.Y, minlength=data.K) / data.N
    arm = np.zeros(data.K)
    arm[data.cluster] = data.A
    means = []
    for a in (1.0, 0.0):
        sel = arm == a
        if not sel.any():
            raise ArmMissing(f"no clusters with A={int(a)}")
        means.append(np.sum(data.W[sel] * ybar[sel]) / np.sum(data.W[sel]))
    return float(means[0] - means[1])


def default_strata(mode: str) -> tuple[str, ...]:
    return ("co", "nt") if mode == "strong" else ("co", "nt", "at")


def cells(g: str) -> tuple[tuple[int, int], ...]:
    return scheme(g).valid_cells


def theta_name(g: str, cell) -> str:
    return f"theta_{g}({cell[0]},{cell[1]})"


def point_estimates(method: str, data: IndividualData, table: NuisanceTable,
                    strata=None) -> dict[str, float]:
    """All cell estimates and effects for ``strata`` with one method (mo, dr or np)."""
    strata = default_strata(table.mode) if strata is None else tuple(strata)
    out: dict[str, float] = {}
    for g in strata:
        s = scheme(g, table.mode)
        if method == "mo":
            th = {c: theta_mo(g, c, data, table) for c in s.valid_cells}
        else:
            psi2 = eif_psi2(g, data.A, data.D, table.p11, table.p01, data.pi)
            th = {c: eif_components(g, c, data, table, psi2=psi2).theta for c in s.valid_cells}
        for c, v in th.items():
            out[theta_name(g, c)] = v
        out.update(assemble_effects(g, th, table.mode))
    return out


EFFECT_VARIANCES = ("cellwise", "delta")


def eif_estimates(data: IndividualData, table: NuisanceTable, strata=None,
                  omega=None, effect_variance: str = "cellwise") -> dict[str, tuple[float, float]]:
    """Cell estimates and effects with closed-form standard errors.

    Used with cross-fitted tables for the ``np`` estimator. ``omega(g, cell)``
    optionally returns sensitivity weights for each cell.

    ``effect_variance`` selects the variance of an effect (a contrast of
    cells): ``"cellwise"`` adds the cell variances, ignoring their
    covariance; ``"delta"`` is the shared-denominator delta method over the
    joint cell influence functions. The two agree when the cells are
    uncorrelated; cellwise is conservative when they are positively
    correlated, as the two treated-arm cells of ICE_co are.
    """
    if effect_variance not in EFFECT_VARIANCES:
        raise ConfigError(f"effect_variance must be one of {EFFECT_VARIANCES}, got {effect_variance!r}")
    strata = default_strata(table.mode) if strata is None else tuple(strata)
    out: dict[str, tuple[float, float]] = {}
    for g in strata:
        s = scheme(g, table.mode)
        psi2 = eif_psi2(g, data.A, data.D, table.p11, table.p01, data.pi)
        comps = {
            c: eif_components(g, c, data, table, psi2=psi2, omega=1.0 if omega is None else omega(g, c))
            for c in s.valid_cells
        }
        th = {c: comp.theta for c, comp in comps.items()}
        psi1 = {(g, *c): comp.psi1 for c, comp in comps.items()}
        thk = {(g, *c): v for c, v in th.items()}
        var = {c: var_np(comp.psi1, psi2, comp.theta, data) for c, comp in comps.items()}
        for c, comp in comps.items():
            out[theta_name(g, c)] = (comp.theta, float(np.sqrt(var[c])))
        for name, value in assemble_effects(g, th, table.mode).items():
            lam = EFFECT_CONTRASTS[g][name.split("_")[0]]
            if not lam:
                out[name] = (value, 0.0)
            elif effect_variance == "cellwise":
                out[name] = (value, float(np.sqrt(sum(v * v * var[c] for c, v in lam.items()))))
            else:
                coef = {(g, *c): v for c, v in lam.items()}
                out[name] = (value, float(np.sqrt(contrast_variance(psi1, psi2, thk, coef, data))))
    return out


@dataclass
class EstimateReport:
    estimand: str
    method: str
    point: float
    se: float | None = None
    ci: tuple[float, float, float] | None = None  # (lo, hi, level)
    ci_method: str | None = None
    diagnostics: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "method": self.method,
            "point": self.point,
            "se": self.se,
            "ci": None if self.ci is None else {"lo": self.ci[0], "hi": self.ci[1], "level": self.ci[2]},
            "ci_method": self.ci_method,
            "diagnostics": self.diagnostics,
        }
