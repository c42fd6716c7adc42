"""Shared fixtures and independent reference computations for the tests."""

import dataclasses

import numpy as np

from clusterps.simulation import DGPConfig, draw_trial, to_individual


def cluster_robust_se(X, resid, cluster, hessian_weights=None):
    """Sandwich standard errors for an M-estimator with cluster-summed scores."""
    h = np.ones(len(resid)) if hessian_weights is None else hessian_weights
    bread = np.linalg.inv(X.T @ (X * h[:, None]))
    K = int(cluster.max()) + 1
    scores = np.zeros((K, X.shape[1]))
    np.add.at(scores, cluster, X * resid[:, None])
    cov = bread @ (scores.T @ scores) @ bread
    return np.sqrt(np.diag(cov))


def small_trial(K=20, seed=0, strong=False, **dgp):
    """Simulated individual-level trial; ``strong`` zeroes control-arm uptake."""
    data = to_individual(draw_trial(DGPConfig(K=K, **dgp), np.random.default_rng(seed)))
    if strong:
        data = dataclasses.replace(data, D=np.where(data.A == 1, data.D, 0))
    return data


def true_table(draw, cfg=None, mode="standard"):
    """Nuisance table holding the generator's true uptake and outcome surfaces."""
    from clusterps.nuisance import NuisanceTable
    from clusterps.simulation.dgp import outcome_mean, uptake_prob

    cfg = DGPConfig() if cfg is None else cfg
    c = draw.cluster
    X, V, N = draw.X, draw.V[c], draw.N[c].astype(float)
    p11 = uptake_prob(cfg, 1, X, V, N)
    p01 = np.zeros_like(p11) if mode == "strong" else uptake_prob(cfg, 0, X, V, N)
    mu = {(a, d): outcome_mean(a, d, X, V, N) for a in (0, 1) for d in (0, 1)}
    return NuisanceTable(p11, p01, p11, p01, mu, mode)


def cluster_z(data, diff):
    """z-statistic of the weighted mean of ``diff`` against 0, with cluster-level SE."""
    s = data.cluster_sum(diff)
    return s.mean() / (s.std(ddof=1) / np.sqrt(len(s)))
