"""Data-generating process for the simulation study.

Per cluster: N ~ U{10..50}, V ~ Normal(3N/50, 1), X_ij ~ Normal(2V, 1),
A ~ Bernoulli(pi). Uptake and outcomes are drawn through exchangeable
Gaussian copulas. The uptake latent vector is shared by both assignment
worlds (comonotone coupling), so D(1) >= D(0) pathwise and every individual
carries a principal-stratum label.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import Mapping

import numba
import numpy as np

from ..data import Cluster, FeatureSummary, IndividualData, TrialDataset, WeightSpec, eval_weight, register_transform
from ..errors import ConfigError
from ..nuisance.glm import expit

STRATUM_CODES = {"nt": 0, "co": 1, "at": 2, "de": 3}


@dataclass(frozen=True)
class DGPConfig:
    """Generator parameters.

    ``multipliers`` maps ``"g,a,d"`` (e.g. ``"nt,0,0"``) to a factor applied
    to the conditional outcome mean of stratum ``g`` in cell (a, d). Factors
    other than 1 break principal ignorability in a controlled way.
    """

    K: int = 100
    size_range: tuple[int, int] = (10, 50)
    copula_rho: float = 0.1
    pi: float = 0.5
    outcome_sd: float = 6.0
    seed: int = 0
    # uptake: expit(u0 + uA*A + uN*(1-A)*N/50 + uX*X + uV*V)
    uptake_coef: tuple[float, float, float, float, float] = (-8.0, 4.0, 1.0, 1.0, 1.0)
    multipliers: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        lo, hi = self.size_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid size_range {self.size_range}")
        if not 0.0 <= self.copula_rho < 1.0:
            raise ConfigError(f"copula_rho must lie in [0, 1), got {self.copula_rho}")
        if not 0.0 < self.pi < 1.0:
            raise ConfigError(f"pi must lie in (0, 1), got {self.pi}")
        if self.K < 2:
            raise ConfigError("K must be at least 2")
        if self.outcome_sd <= 0:
            raise ConfigError("outcome_sd must be positive")
        mult = self.multipliers.items() if isinstance(self.multipliers, Mapping) else self.multipliers
        norm = []
        for key, val in mult:
            parts = [t.strip() for t in str(key).split(",")]
            if len(parts) != 3 or parts[0] not in STRATUM_CODES or parts[1] not in "01" or parts[2] not in "01":
                raise ConfigError(f"multiplier key must look like 'nt,0,0', got {key!r}")
            norm.append((",".join(parts), float(val)))
        object.__setattr__(self, "multipliers", tuple(sorted(norm)))
        object.__setattr__(self, "size_range", (int(lo), int(hi)))

    def multiplier_table(self) -> np.ndarray:
        """Array ``[stratum_code, a, d]`` of mean multipliers."""
        t = np.ones((4, 2, 2))
        for key, val in self.multipliers:
            g, a, d = key.split(",")
            t[STRATUM_CODES[g], int(a), int(d)] = val
        return t


def uptake_prob(cfg: DGPConfig, a, X, V, N) -> np.ndarray:
    u0, uA, uN, uX, uV = cfg.uptake_coef
    a = np.asarray(a, dtype=float)
    return expit(u0 + uA * a + uN * (1.0 - a) * np.asarray(N) / 50.0 + uX * np.asarray(X) + uV * np.asarray(V))


def outcome_mean(a, d, X, V, N) -> np.ndarray:
    """Conditional outcome mean m(a, d, C) under principal ignorability."""
    a = np.asarray(a, dtype=float)
    d = np.asarray(d, dtype=float)
    N = np.asarray(N, dtype=float)
    X = np.asarray(X, dtype=float)
    return (0.5 + 3 * N / 100 + 1.5 * X) * a + (0.2 + 3 * N / 100 + 1.5 * X) * d + X + V + N / 25


@dataclass(frozen=True, eq=False)
class SimDraw:
    """Flat individual-level draw with latent quantities.

    Cluster-level arrays (length K): ``N``, ``V``, ``A``. Individual arrays:
    ``cluster``, ``X``, ``D0``/``D1`` (potential uptakes), ``D``, ``Y``,
    ``stratum`` (codes of :data:`STRATUM_CODES`), ``z_uptake``, ``z_outcome``.
    """

    N: np.ndarray
    V: np.ndarray
    A: np.ndarray
    cluster: np.ndarray
    X: np.ndarray
    D0: np.ndarray
    D1: np.ndarray
    D: np.ndarray
    Y: np.ndarray
    stratum: np.ndarray
    z_uptake: np.ndarray
    z_outcome: np.ndarray
    pi: float
    extra: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.N)


def _copula_latent(rng: np.random.Generator, cluster: np.ndarray, K: int, rho: float) -> np.ndarray:
    shared = rng.standard_normal(K)
    own = rng.standard_normal(len(cluster))
    return np.sqrt(rho) * shared[cluster] + np.sqrt(1.0 - rho) * own


def draw_population(cfg: DGPConfig, K: int, rng: np.random.Generator) -> SimDraw:
    """Draw ``K`` clusters in one vectorized pass."""
    lo, hi = cfg.size_range
    N = rng.integers(lo, hi + 1, size=K)
    V = rng.normal(3.0 * N / 50.0, 1.0)
    A = (rng.random(K) < cfg.pi).astype(np.int8)
    cluster = np.repeat(np.arange(K), N)
    Ni, Vi, Ai = N[cluster].astype(float), V[cluster], A[cluster]
    X = rng.normal(2.0 * Vi, 1.0)
    z = _copula_latent(rng, cluster, K, cfg.copula_rho)
    u = _phi(z)
    D1 = (u <= uptake_prob(cfg, 1, X, Vi, Ni)).astype(np.int8)
    D0 = (u <= uptake_prob(cfg, 0, X, Vi, Ni)).astype(np.int8)
    D = np.where(Ai == 1, D1, D0)
    stratum = np.where(D1 == 1, np.where(D0 == 1, 2, 1), np.where(D0 == 1, 3, 0)).astype(np.int8)
    zy = _copula_latent(rng, cluster, K, cfg.copula_rho)
    mean = outcome_mean(Ai, D, X, Vi, Ni) * cfg.multiplier_table()[stratum, Ai, D]
    Y = mean + cfg.outcome_sd * zy
    return SimDraw(N, V, A, cluster, X, D0, D1, D, Y, stratum, z, zy, cfg.pi)


@numba.vectorize(["float64(float64)"], cache=True)
def _phi(z):
    # standard normal CDF via erfc, accurate in both tails
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def draw_trial(cfg: DGPConfig, rng: np.random.Generator) -> SimDraw:
    return draw_population(cfg, cfg.K, rng)


def draw_cluster(cfg: DGPConfig, rng: np.random.Generator) -> tuple[Cluster, SimDraw]:
    """One cluster plus its latent record."""
    d = draw_population(cfg, 1, rng)
    return to_dataset_clusters(d)[0], d


def to_dataset_clusters(d: SimDraw) -> list[Cluster]:
    out = []
    starts = np.concatenate([[0], np.cumsum(d.N)])
    for i in range(d.K):
        rows = slice(starts[i], starts[i + 1])
        out.append(Cluster(
            id=str(i + 1),
            cluster_covariates=np.array([d.V[i]]),
            indiv_covariates=d.X[rows].reshape(-1, 1),
            assignment=int(d.A[i]),
            uptake=d.D[rows],
            outcome=d.Y[rows],
        ))
    return out


def to_dataset(d: SimDraw) -> TrialDataset:
    return TrialDataset(tuple(to_dataset_clusters(d)), d.pi)


def to_individual(d: SimDraw, weight: WeightSpec = WeightSpec()) -> IndividualData:
    """Flat view equal to ``flatten(to_dataset(d), FeatureSummary('own'), weight)``."""
    Ni = d.N[d.cluster].astype(float)
    feats = np.column_stack([d.X, d.V[d.cluster], Ni])
    W = np.array([eval_weight(weight, int(n), [v]) for n, v in zip(d.N, d.V)])
    return IndividualData(
        cluster=d.cluster.astype(np.int64),
        A=d.A[d.cluster].astype(float),
        D=d.D.astype(float),
        Y=d.Y,
        features=feats,
        names=("x_1", "v_1", "N"),
        W=W,
        N=d.N.astype(float),
        pi=d.pi,
    )


# --- misspecification -------------------------------------------------------

def misspecify_features(X, V, N):
    """Transformed covariates (U1, U2, U3) that replace (X, V, N)."""
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    N = np.asarray(N, dtype=float)
    return np.exp(-0.3 * X), V / (1.0 + 0.05 * X), (N * V / 25.0 + 0.6) ** 3


def _misspecified_transform(feats: np.ndarray, names: tuple[str, ...]) -> np.ndarray:
    ix, iv, iN = names.index("x_1"), names.index("v_1"), names.index("N")
    out = feats.copy()
    out[:, ix], out[:, iv], out[:, iN] = misspecify_features(feats[:, ix], feats[:, iv], feats[:, iN])
    return out


register_transform("misspecified", _misspecified_transform)

FEATURE_SUMMARY = FeatureSummary("own")
