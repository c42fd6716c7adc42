"""Cluster bootstrap, percentile and Wald intervals, and contrast variances."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Callable, Mapping

import numpy as np

from .errors import (
    ClusterPSError,
    ConfigError,
    InsufficientReplicates,
    MixedStrata,
    TooManyFailedReplicates,
    ZeroDenominator,
)

MIN_CI_REPLICATES = 100
DENOM_GUARD = 1e-8


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 1000
    level: float = 0.95
    seed: int = 0
    max_fail_frac: float = 0.10

    def __post_init__(self):
        if self.B < 1:
            raise ConfigError(f"bootstrap B must be positive, got {self.B}")
        if not 0.0 < self.level < 1.0:
            raise ConfigError(f"level must lie in (0, 1), got {self.level}")


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Replicate values in replicate-index order (failed replicates removed).

    ``values`` maps estimand name to an array when the estimator returns a
    mapping; estimators returning a scalar are stored under the key ``None``.
    """

    values: dict
    B: int
    n_failed: int
    failures: dict = field(default_factory=dict)  # error code -> count

    def __getitem__(self, key):
        return self.values[key]

    @property
    def n_ok(self) -> int:
        return self.B - self.n_failed


def replicate_indices(K: int, cfg: BootstrapConfig) -> list[np.ndarray]:
    """Per-replicate cluster draws from independent spawned seeds."""
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.B)
    return [np.random.default_rng(c).integers(0, K, size=K) for c in children]


def cluster_bootstrap(estimator: Callable, data, cfg: BootstrapConfig = BootstrapConfig(),
                      threads: int = 1) -> BootstrapResult:
    """Evaluate ``estimator`` on ``cfg.B`` with-replacement cluster resamples.

    ``data`` is anything with ``K`` and ``resample(indices)`` (a
    :class:`TrialDataset` or :class:`IndividualData`). Replicates raising a
    package error are dropped and counted; more than ``max_fail_frac`` of them
    failing is an error.
    """
    draws = replicate_indices(data.K, cfg)

    def one(idx):
        try:
            return estimator(data.resample(idx))
        except (ClusterPSError, np.linalg.LinAlgError) as exc:
            return exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(one, draws))
    else:
        out = [one(idx) for idx in draws]

    failures: dict[str, int] = {}
    ok = []
    for r in out:
        if isinstance(r, Exception):
            code = getattr(r, "code", type(r).__name__)
            failures[code] = failures.get(code, 0) + 1
        else:
            ok.append(r)
    n_failed = cfg.B - len(ok)
    if n_failed > cfg.max_fail_frac * cfg.B:
        raise TooManyFailedReplicates(f"{n_failed} of {cfg.B} bootstrap replicates failed: {failures}")
    if ok and isinstance(ok[0], Mapping):
        keys = list(ok[0].keys())
        values = {k: np.array([float(r[k]) for r in ok]) for k in keys}
    else:
        values = {None: np.array([float(r) for r in ok])}
    return BootstrapResult(values, cfg.B, n_failed, failures)


def percentile_ci(values, level: float = 0.95) -> tuple[float, float]:
    """Empirical alpha/2 and 1-alpha/2 quantiles with linear interpolation."""
    v = np.asarray(values, dtype=float)
    if v.size < MIN_CI_REPLICATES:
        raise InsufficientReplicates(f"need at least {MIN_CI_REPLICATES} replicates, got {v.size}")
    alpha = 1.0 - level
    lo, hi = np.quantile(v, [alpha / 2.0, 1.0 - alpha / 2.0], method="linear")
    return float(lo), float(hi)


def normal_quantile(p: float) -> float:
    return NormalDist().inv_cdf(p)


def wald_ci(point: float, se: float, level: float = 0.95) -> tuple[float, float]:
    if se < 0:
        raise ConfigError(f"standard error must be non-negative, got {se}")
    z = normal_quantile(1.0 - (1.0 - level) / 2.0)
    return point - z * se, point + z * se


def contrast_variance(psi1_by_cell: Mapping, psi2: np.ndarray, theta_by_cell: Mapping,
                      coef: Mapping, data) -> float:
    """Variance of a linear contrast of cell estimates sharing one stratum.

    Keys of ``psi1_by_cell``/``theta_by_cell``/``coef`` are ``(g, a, a_star)``.
    The cluster-level contrast influence term is
    ``(W/N) sum_j (sum_c lam_c psi1_c - psi2 * sum_c lam_c theta_c)``; its mean
    square over clusters is divided by the squared mean of the cluster-level
    ``psi2`` sums and by K.
    """
    strata = {c[0] for c in coef}
    if len(strata) != 1:
        raise MixedStrata(f"contrast mixes strata {sorted(strata)}")
    num = np.zeros_like(np.asarray(psi2, dtype=float))
    lam_theta = 0.0
    for cell, lam in coef.items():
        if lam == 0:
            continue
        num = num + lam * psi1_by_cell[cell]
        lam_theta += lam * theta_by_cell[cell]
    K = data.K
    infl = data.cluster_sum(num - psi2 * lam_theta)
    den = data.cluster_sum(psi2).sum() / K
    if abs(den) <= DENOM_GUARD:
        raise ZeroDenominator(f"stratum mass {den:.3g} too small for a variance")
    return float(np.sum(infl ** 2) / K ** 2 / den ** 2)
