"""Nuisance surfaces p(a,d,C) and mu(a,d,C): specification, fitting, folds, cross-fitting."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..data import FEATURE_TRANSFORMS, IndividualData, TrialDataset
from ..errors import ConfigError, EstimationError, FoldDegenerate, TooFewClusters
from .ensemble import ForestParams, fit_stack
from .formula import Design
from .glm import fit_linear, fit_logistic

MODES = ("standard", "strong")


@dataclass(frozen=True)
class NuisanceSpec:
    """Working models for the uptake and outcome surfaces.

    ``mu_strategy='arm'`` fits mu within each assignment arm with ``D`` as a
    regressor; ``'cell'`` fits each observed (a, d) cell separately (terms
    involving ``A`` or ``D`` are dropped). ``p_transform``/``mu_transform``
    name entries of the feature-transform registry applied before the design
    is built.
    """

    learner: str = "glm"
    p_formula: tuple[str, ...] = ("A", "A*N", "X", "V", "N")
    mu_formula: tuple[str, ...] = ("D", "D*N", "D*X", "X", "V", "N")
    mu_strategy: str = "arm"
    ensemble_members: tuple[str, ...] = ("glm", "forest")
    stack_folds: int = 5
    forest: ForestParams = ForestParams()
    p_transform: str = "identity"
    mu_transform: str = "identity"
    clip: float = 1e-3

    def __post_init__(self):
        if self.learner not in ("glm", "ensemble"):
            raise ConfigError(f"learner must be glm or ensemble, got {self.learner!r}")
        if self.mu_strategy not in ("arm", "cell"):
            raise ConfigError(f"mu_strategy must be arm or cell, got {self.mu_strategy!r}")
        if self.stack_folds < 2:
            raise ConfigError("stack_folds must be at least 2")
        if not 0.0 <= self.clip < 0.5:
            raise ConfigError(f"clip must lie in [0, 0.5), got {self.clip}")
        for t in (self.p_transform, self.mu_transform):
            if t not in FEATURE_TRANSFORMS:
                raise ConfigError(f"unknown feature transform {t!r}")
        for m in self.ensemble_members:
            if m not in ("glm", "forest"):
                raise ConfigError(f"unknown ensemble member {m!r}")
        object.__setattr__(self, "p_formula", tuple(self.p_formula))
        object.__setattr__(self, "mu_formula", tuple(self.mu_formula))
        object.__setattr__(self, "ensemble_members", tuple(self.ensemble_members))

    def with_(self, **kw) -> "NuisanceSpec":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return NuisanceSpec(**d)

    def as_dict(self) -> dict:
        return {
            "learner": self.learner,
            "p_formula": list(self.p_formula),
            "mu_formula": list(self.mu_formula),
            "mu_strategy": self.mu_strategy,
            "ensemble_members": list(self.ensemble_members),
            "stack_folds": self.stack_folds,
            "forest": vars(self.forest).copy(),
            "p_transform": self.p_transform,
            "mu_transform": self.mu_transform,
            "clip": self.clip,
        }


@dataclass(frozen=True)
class _Surface:
    """One fitted regression: design plus predictor and its diagnostics."""

    design: Design
    predict: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    info: dict


def _fit_surface(design: Design, feats, names, y, groups, task, spec: NuisanceSpec, seed: int,
                 A=None, D=None) -> _Surface:
    X = design.matrix(feats, names, A=A, D=D)
    info: dict = {"terms": design.labels, "n": int(len(y))}
    if spec.learner == "glm":
        if task == "binary":
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                fit = fit_logistic(X, y)
            info.update(coef=fit.coef.tolist(), iterations=fit.iterations,
                        converged=fit.converged, separated=fit.separated)
            if caught:
                info["warnings"] = [str(w.message) for w in caught]
        else:
            fit = fit_linear(X, y)
            info["coef"] = fit.coef.tolist()
        return _Surface(design, fit.predict, info)
    stack = fit_stack(X, y, groups, task, spec.ensemble_members, spec.stack_folds, seed, spec.forest)
    info.update(stack.diagnostics())
    return _Surface(design, stack.predict, info)


@dataclass(frozen=True, eq=False)
class FittedNuisance:
    """Prediction surfaces with fold provenance.

    ``predict_p`` returns clipped probabilities with
    ``predict_p(a, 1) + predict_p(a, 0) == 1`` exactly. Under strong
    monotonicity ``p(0, 1) = 0`` identically. ``train_mask`` marks the
    clusters (of the dataset it was fit on) used for training.
    """

    spec: NuisanceSpec
    mode: str
    names: tuple[str, ...]
    fold_tag: str
    train_mask: np.ndarray
    p_surface: _Surface
    mu_surfaces: dict
    diagnostics: dict

    def _p_feats(self, feats):
        return FEATURE_TRANSFORMS[self.spec.p_transform](feats, self.names)

    def _mu_feats(self, feats):
        return FEATURE_TRANSFORMS[self.spec.mu_transform](feats, self.names)

    def raw_p1(self, a: int, feats: np.ndarray) -> np.ndarray:
        """Unclipped P(D=1 | A=a, C)."""
        if self.mode == "strong":
            if a == 0:
                return np.zeros(feats.shape[0])
            X = self.p_surface.design.matrix(self._p_feats(feats), self.names)
        else:
            X = self.p_surface.design.matrix(self._p_feats(feats), self.names, A=float(a))
        return self.p_surface.predict(X)

    def p1(self, a: int, feats: np.ndarray) -> np.ndarray:
        raw = self.raw_p1(a, feats)
        if self.mode == "strong" and a == 0:
            return raw
        eps = self.spec.clip
        return np.clip(raw, eps, 1.0 - eps)

    def predict_p(self, a: int, d: int, feats: np.ndarray) -> np.ndarray:
        q = self.p1(a, feats)
        return q if d == 1 else 1.0 - q

    def predict_mu(self, a: int, d: int, feats: np.ndarray) -> np.ndarray:
        key = (a, d) if self.spec.mu_strategy == "cell" else a
        surf = self.mu_surfaces.get(key)
        if surf is None:
            raise EstimationError(f"no outcome model available for cell (a={a}, d={d})")
        X = surf.design.matrix(self._mu_feats(feats), self.names, A=float(a), D=float(d))
        return surf.predict(X)


def _seed_for(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def fit_nuisance(data: IndividualData, spec: NuisanceSpec, seed: int = 0, mode: str = "standard",
                 fold_tag: str = "full", train_mask: np.ndarray | None = None) -> FittedNuisance:
    """Fit p and mu on ``data`` (all rows, or clusters in ``train_mask``)."""
    if mode not in MODES:
        raise ConfigError(f"monotonicity mode must be one of {MODES}, got {mode!r}")
    mask = np.ones(data.K, dtype=bool) if train_mask is None else np.asarray(train_mask, dtype=bool)
    tr = data if train_mask is None else data.subset_clusters(mask)
    names = data.names
    diag: dict = {"fold_tag": fold_tag, "n_train_clusters": int(mask.sum())}
    if not ((tr.A == 1).any() and (tr.A == 0).any()):
        raise FoldDegenerate(f"training set for fold {fold_tag} lacks an assignment arm")

    pf = FEATURE_TRANSFORMS[spec.p_transform](tr.features, names)
    p_design = Design.compile(spec.p_formula, names)
    if mode == "strong":
        if (tr.D[tr.A == 0] == 1).any():
            raise ConfigError("strong monotonicity assumed but some control-arm individuals took up treatment")
        rows = tr.A == 1
        p_design = p_design.drop("A")
        p_surf = _fit_surface(p_design, pf[rows], names, tr.D[rows], tr.cluster[rows], "binary",
                              spec, _seed_for(seed, 0))
    else:
        p_surf = _fit_surface(p_design, pf, names, tr.D, tr.cluster, "binary", spec,
                              _seed_for(seed, 0), A=tr.A)
    diag["p"] = p_surf.info

    mf = FEATURE_TRANSFORMS[spec.mu_transform](tr.features, names)
    mu_design = Design.compile(spec.mu_formula, names).drop("A")
    mu: dict = {}
    diag["mu"] = {}
    if spec.mu_strategy == "arm":
        for a in (0, 1):
            rows = tr.A == a
            des = mu_design
            if np.ptp(tr.D[rows]) == 0:
                # uptake constant in this arm: D terms are not estimable
                des = des.drop("D")
            mu[a] = _fit_surface(des, mf[rows], names, tr.Y[rows], tr.cluster[rows], "continuous",
                                 spec, _seed_for(seed, 1, a), D=tr.D[rows])
            diag["mu"][f"a={a}"] = mu[a].info
    else:
        des = mu_design.drop("D")
        for a in (0, 1):
            for d in (0, 1):
                rows = (tr.A == a) & (tr.D == d)
                if not rows.any():
                    continue
                mu[(a, d)] = _fit_surface(des, mf[rows], names, tr.Y[rows], tr.cluster[rows],
                                          "continuous", spec, _seed_for(seed, 2, 2 * a + d))
                diag["mu"][f"a={a},d={d}"] = mu[(a, d)].info
    return FittedNuisance(spec, mode, names, fold_tag, mask, p_surf, mu, diag)


# --- folds --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FoldAssignment:
    L: int
    cluster_to_fold: np.ndarray  # fold index per cluster, in cluster order
    seed: int

    def sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_to_fold, minlength=self.L)


def make_folds(dataset: TrialDataset | IndividualData | np.ndarray, L: int, seed: int) -> FoldAssignment:
    """Cluster-level partition into ``L`` folds, stratified by assignment arm.

    Clusters of each arm are shuffled, the arms are concatenated and folds
    are dealt round-robin, so fold sizes differ by at most one and each arm
    is spread as evenly as possible.
    """
    if isinstance(dataset, TrialDataset):
        arms = np.asarray(dataset.assignments)
    elif isinstance(dataset, IndividualData):
        arms = np.zeros(dataset.K, dtype=np.int8)
        arms[dataset.cluster] = dataset.A.astype(np.int8)
    else:
        arms = np.asarray(dataset)
    K = len(arms)
    if L < 2:
        raise ConfigError(f"fold count must be at least 2, got {L}")
    if L > K:
        raise TooFewClusters(f"cannot split {K} clusters into {L} folds")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(arms == a)) for a in (0, 1)])
    fold = np.empty(K, dtype=np.int64)
    fold[order] = np.arange(K) % L
    return FoldAssignment(int(L), fold, int(seed))


def cross_fit(data: IndividualData, spec: NuisanceSpec, folds: FoldAssignment, seed: int = 0,
              mode: str = "standard") -> list[FittedNuisance]:
    """One fit per fold, each trained on the clusters outside that fold."""
    if len(folds.cluster_to_fold) != data.K:
        raise ConfigError("fold assignment does not match the dataset")
    out = []
    for l in range(folds.L):
        mask = folds.cluster_to_fold != l
        rows = mask[data.cluster]
        if not ((data.A[rows] == 1).any() and (data.A[rows] == 0).any()):
            raise FoldDegenerate(f"training complement of fold {l} lacks an assignment arm")
        if np.ptp(data.D[rows]) == 0:
            raise FoldDegenerate(f"training complement of fold {l} has a single uptake value")
        out.append(fit_nuisance(data, spec, _seed_for(seed, 3, l), mode, fold_tag=str(l), train_mask=mask))
    return out


# --- prediction tables ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NuisanceTable:
    """Per-individual nuisance predictions used by every estimator.

    ``p11``/``p01`` are clipped P(D=1 | A=1, C) and P(D=1 | A=0, C);
    ``mu[(a, d)]`` is the outcome surface at cell (a, d).
    """

    p11: np.ndarray
    p01: np.ndarray
    raw_p11: np.ndarray
    raw_p01: np.ndarray
    mu: dict
    mode: str
    fold: np.ndarray | None = None  # per-cluster fold, None for full-data fits
    diagnostics: dict = field(default_factory=dict)

    def p(self, a: int, d: int) -> np.ndarray:
        q = self.p11 if a == 1 else self.p01
        if d == 1:
            return q
        # p00 computed as 1 - p01 and p10 as 1 - p11 so complements are exact
        return 1.0 - q

    def mu_at(self, a: int, d: int) -> np.ndarray:
        try:
            return self.mu[(a, d)]
        except KeyError:
            raise EstimationError(f"no outcome predictions for cell (a={a}, d={d})") from None

    @property
    def clip_count(self) -> int:
        return int(np.sum(self.p11 != self.raw_p11) + np.sum(self.p01 != self.raw_p01))


def _clip_diag(raw11, raw01, p11, p01):
    return {"clipped_p": int(np.sum(p11 != raw11) + np.sum(p01 != raw01))}


def _predict_rows(fit: FittedNuisance, feats: np.ndarray):
    r11, r01 = fit.raw_p1(1, feats), fit.raw_p1(0, feats)
    p11, p01 = fit.p1(1, feats), fit.p1(0, feats)
    mu = {}
    for a in (0, 1):
        for d in (0, 1):
            try:
                mu[(a, d)] = fit.predict_mu(a, d, feats)
            except EstimationError:
                pass
    return r11, r01, p11, p01, mu


def full_table(data: IndividualData, fit: FittedNuisance) -> NuisanceTable:
    r11, r01, p11, p01, mu = _predict_rows(fit, data.features)
    diag = {"nuisance": fit.diagnostics, **_clip_diag(r11, r01, p11, p01)}
    return NuisanceTable(p11, p01, r11, r01, mu, fit.mode, None, diag)


def crossfit_table(data: IndividualData, fits: list[FittedNuisance], folds: FoldAssignment) -> NuisanceTable:
    """Stitch out-of-fold predictions: rows of fold ``l`` come from ``fits[l]``."""
    n = data.n
    r11, r01, p11, p01 = (np.empty(n) for _ in range(4))
    mu: dict = {}
    row_fold = folds.cluster_to_fold[data.cluster]
    for l, fit in enumerate(fits):
        rows = row_fold == l
        if fit.train_mask[data.cluster[rows]].any():
            raise EstimationError(f"fold {l} predictor would be evaluated on its own training clusters")
        a, b, c, d, m = _predict_rows(fit, data.features[rows])
        r11[rows], r01[rows], p11[rows], p01[rows] = a, b, c, d
        for key, vals in m.items():
            mu.setdefault(key, np.full(n, np.nan))[rows] = vals
    mu = {k: v for k, v in mu.items() if not np.isnan(v).any()}
    diag = {
        "folds": {"L": folds.L, "seed": folds.seed, "sizes": folds.sizes().tolist()},
        "nuisance": [f.diagnostics for f in fits],
        **_clip_diag(r11, r01, p11, p01),
    }
    return NuisanceTable(p11, p01, r11, r01, mu, fits[0].mode, folds.cluster_to_fold, diag)
