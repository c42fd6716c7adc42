"""Working-independence GLM fits: logistic regression by IRLS and weighted least squares."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import SingularDesign

SEPARATION_BOUND = 30.0


def expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_rank(Xw: np.ndarray, what: str) -> None:
    if Xw.shape[0] < Xw.shape[1] or np.linalg.matrix_rank(Xw) < Xw.shape[1]:
        raise SingularDesign(f"{what} design of shape {Xw.shape} is rank deficient")


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    iterations: int
    converged: bool
    separated: bool = False

    def predict(self, X: np.ndarray) -> np.ndarray:
        return expit(X @ self.coef)


@dataclass(frozen=True)
class LinearFit:
    coef: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        return X @ self.coef


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> LogisticFit:
    """Maximize the weighted independence log-likelihood by IRLS.

    Iterates Newton steps until the largest coefficient change drops below
    ``tol`` or ``max_iter`` is reached. If any coefficient exceeds 30 in
    absolute value the data are treated as (quasi-)separated: the fit is
    stopped, coefficients are clipped to ``[-30, 30]`` and ``separated`` is set.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    _check_rank(X * np.sqrt(w)[:, None], "logistic")
    beta = np.zeros(X.shape[1])
    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        v = w * p * (1.0 - p)
        H = X.T @ (X * v[:, None])
        g = X.T @ (w * (y - p))
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.full_like(beta, np.inf)
        if not np.all(np.isfinite(step)):
            warnings.warn("logistic fit: Hessian became singular; treating as separation", RuntimeWarning)
            return LogisticFit(np.clip(beta, -SEPARATION_BOUND, SEPARATION_BOUND), it, False, True)
        beta = beta + step
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            warnings.warn("logistic fit: separation detected, coefficients clipped", RuntimeWarning)
            return LogisticFit(np.clip(beta, -SEPARATION_BOUND, SEPARATION_BOUND), it, False, True)
        if np.max(np.abs(step)) < tol:
            return LogisticFit(beta, it, True)
    return LogisticFit(beta, max_iter, False)


def fit_linear(X: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None) -> LinearFit:
    """Weighted least squares via an orthogonal (SVD-based) solve."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    sw = np.ones(len(y)) if weights is None else np.sqrt(np.asarray(weights, dtype=float))
    Xw = X * sw[:, None]
    _check_rank(Xw, "linear")
    coef, *_ = np.linalg.lstsq(Xw, y * sw, rcond=None)
    return LinearFit(coef)
