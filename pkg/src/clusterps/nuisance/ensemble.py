"""Stacked ensemble: convex combination of base learners chosen by cross-validated loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigError
from .forest import fit_forest
from .glm import fit_linear, fit_logistic

PROB_FLOOR = 1e-6


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    max_depth: int = 6
    min_leaf: int = 5
    n_bins: int = 64


def _logloss(y: np.ndarray, q: np.ndarray) -> float:
    q = np.clip(q, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return float(-np.mean(y * np.log(q) + (1.0 - y) * np.log1p(-q)))


def _sqloss(y: np.ndarray, q: np.ndarray) -> float:
    return float(np.mean((y - q) ** 2))


def loss_fn(task: str) -> Callable[[np.ndarray, np.ndarray], float]:
    return _logloss if task == "binary" else _sqloss


def fit_member(kind: str, X: np.ndarray, y: np.ndarray, task: str, seed: int,
               forest: ForestParams = ForestParams()) -> Callable[[np.ndarray], np.ndarray]:
    """Fit one base learner on a design ``X`` whose first column is the intercept."""
    if kind == "glm":
        fit = fit_logistic(X, y) if task == "binary" else fit_linear(X, y)
        return fit.predict
    if kind == "forest":
        f = fit_forest(X[:, 1:], y, n_trees=forest.n_trees, max_depth=forest.max_depth,
                       min_leaf=forest.min_leaf, n_bins=forest.n_bins, seed=seed)
        return lambda Z, _f=f: _f.predict(Z[:, 1:])
    raise ConfigError(f"unknown ensemble member {kind!r}")


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = 1}."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def _gradient(P: np.ndarray, y: np.ndarray, w: np.ndarray, task: str) -> np.ndarray:
    q = P @ w
    if task == "binary":
        q = np.clip(q, PROB_FLOOR, 1.0 - PROB_FLOOR)
        r = (q - y) / (q * (1.0 - q))
    else:
        r = 2.0 * (q - y)
    return P.T @ r / len(y)


def stack_weights(P: np.ndarray, y: np.ndarray, task: str, iters: int = 500,
                  step: float = 0.1) -> tuple[np.ndarray, bool]:
    """Simplex weights minimizing the CV loss of ``P @ w`` by projected gradient.

    Returns ``(weights, degenerate)``; ``degenerate`` is set when all members
    have the same CV loss, in which case the weights are uniform.
    """
    M = P.shape[1]
    loss = loss_fn(task)
    member_losses = np.array([loss(y, P[:, m]) for m in range(M)])
    uniform = np.full(M, 1.0 / M)
    if M == 1:
        return np.ones(1), False
    if np.ptp(member_losses) <= 1e-12 * (1.0 + np.abs(member_losses).max()):
        return uniform, True
    w = uniform
    f = loss(y, P @ w)
    for _ in range(iters):
        g = _gradient(P, y, w, task)
        t = step
        while True:
            cand = project_simplex(w - t * g)
            fc = loss(y, P @ cand)
            # Armijo condition along the projection arc
            if fc <= f + 1e-4 * g @ (cand - w) or t < 1e-12:
                break
            t *= 0.5
        moved = np.max(np.abs(cand - w))
        if fc <= f:
            w, f = cand, fc
        if moved < 1e-12:
            break
    best = int(np.argmin(member_losses))
    if member_losses[best] < f:
        w = np.zeros(M)
        w[best] = 1.0
    return w, False


@dataclass(frozen=True)
class StackedLearner:
    members: tuple[str, ...]
    weights: np.ndarray
    predictors: tuple[Callable[[np.ndarray], np.ndarray], ...] = field(repr=False)
    cv_losses: np.ndarray
    stacked_cv_loss: float
    degenerate: bool = False

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.zeros(X.shape[0])
        for w, f in zip(self.weights, self.predictors):
            if w > 0.0:
                out += w * f(X)
        return out

    def diagnostics(self) -> dict:
        return {
            "members": list(self.members),
            "weights": [float(w) for w in self.weights],
            "cv_losses": [float(v) for v in self.cv_losses],
            "stacked_cv_loss": float(self.stacked_cv_loss),
            "degenerate": bool(self.degenerate),
        }


def group_folds(groups: np.ndarray, n_folds: int, seed: int) -> np.ndarray:
    """Assign each row to a fold so that rows sharing a group stay together."""
    uniq = np.unique(groups)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(uniq))
    fold_of_group = np.empty(len(uniq), dtype=np.int64)
    fold_of_group[order] = np.arange(len(uniq)) % n_folds
    return fold_of_group[np.searchsorted(uniq, groups)]


def fit_stack(X: np.ndarray, y: np.ndarray, groups: np.ndarray, task: str,
              members: Sequence[str] = ("glm", "forest"), stack_folds: int = 5,
              seed: int = 0, forest: ForestParams = ForestParams()) -> StackedLearner:
    """Cross-validated stacking of ``members`` on design ``X``.

    Base learners are fit on stack-fold training splits (folds respect
    ``groups``, i.e. clusters), their held-out predictions define the CV
    loss, and simplex weights are chosen on that loss. Members are then
    refit on all rows.
    """
    members = tuple(members)
    if stack_folds < 2:
        raise ConfigError("stack_folds must be at least 2")
    if len(y) < 2 * stack_folds:
        raise ConfigError(f"need at least {2 * stack_folds} rows to stack, got {len(y)}")
    seeds = np.random.SeedSequence(seed).generate_state(len(members) * (stack_folds + 1))
    loss = loss_fn(task)
    if len(members) == 1:
        f = fit_member(members[0], X, y, task, int(seeds[0]), forest)
        return StackedLearner(members, np.ones(1), (f,), np.array([np.nan]), float("nan"))
    folds = group_folds(groups, stack_folds, int(seeds[-1]))
    P = np.empty((len(y), len(members)))
    for k in range(stack_folds):
        tr, te = folds != k, folds == k
        if not te.any():
            continue
        for m, kind in enumerate(members):
            f = fit_member(kind, X[tr], y[tr], task, int(seeds[m * (stack_folds + 1) + k]), forest)
            P[te, m] = f(X[te])
    cv_losses = np.array([loss(y, P[:, m]) for m in range(len(members))])
    w, degenerate = stack_weights(P, y, task)
    full = tuple(
        fit_member(kind, X, y, task, int(seeds[m * (stack_folds + 1) + stack_folds]), forest)
        for m, kind in enumerate(members)
    )
    return StackedLearner(members, w, full, cv_losses, loss(y, P @ w), degenerate)
