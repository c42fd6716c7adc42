import math

import numpy as np
import pytest

from clusterps.errors import ConfigError
from clusterps.nuisance import expit
from clusterps.simulation import (
    DGPConfig,
    draw_cluster,
    draw_population,
    misspecify_features,
    outcome_mean,
    to_dataset,
    to_individual,
    uptake_prob,
)
from clusterps.simulation.dgp import _copula_latent
from clusterps.simulation.experiment import (
    ROW_FIELDS,
    SUMMARY_FIELDS,
    ExperimentConfig,
    read_rows,
    rows_csv,
    run_replicate,
    run_replicates,
    summarize,
)
from clusterps.data import flatten
from clusterps.simulation.oracle import truth_oracle


def test_uptake_example():
    assert uptake_prob(DGPConfig(), 1, 3.0, 2.0, 30) == pytest.approx(0.731059, abs=1e-6)
    assert uptake_prob(DGPConfig(), 1, 3.0, 2.0, 30) == pytest.approx(float(expit(1.0)), abs=1e-15)


def test_config_validation():
    with pytest.raises(ConfigError):
        DGPConfig(copula_rho=1.0)
    with pytest.raises(ConfigError):
        DGPConfig(multipliers={"xx,0,0": 2.0})
    with pytest.raises(ConfigError):
        DGPConfig(size_range=(5, 2))


def _pair_corr(rho, n_pairs=100_000, seed=0):
    cluster = np.repeat(np.arange(n_pairs), 2)
    z = _copula_latent(np.random.default_rng(seed), cluster, n_pairs, rho)
    return np.corrcoef(z[0::2], z[1::2])[0, 1]


def test_latent_correlation():
    assert abs(_pair_corr(0.1) - 0.1) < 0.01
    assert abs(_pair_corr(0.0)) < 0.01


def test_exchangeable_correlation_positive_definite():
    for n in (10, 50):
        for rho in (0.0, 0.1, 0.9):
            R = (1 - rho) * np.eye(n) + rho * np.ones((n, n))
            assert np.linalg.eigvalsh(R).min() > 0


@pytest.fixture(scope="module")
def big_population():
    cfg = DGPConfig()
    pop = draw_population(cfg, 34_000, np.random.default_rng(2024))
    assert len(pop.cluster) >= 1_000_000
    return cfg, pop


def test_uptake_marginal_fidelity(big_population):
    cfg, pop = big_population
    c = pop.cluster
    p = uptake_prob(cfg, pop.A[c], pop.X, pop.V[c], pop.N[c])
    lp = np.log(p) - np.log1p(-p)
    edges = np.quantile(lp, np.linspace(0, 1, 11))
    bins = np.clip(np.searchsorted(edges, lp, side="right") - 1, 0, 9)
    for b in range(10):
        sel = bins == b
        resid = np.where(sel, pop.D - p, 0.0)
        # within-cluster dependence from the copula: cluster-level SE
        per_cluster = np.bincount(c, weights=resid, minlength=pop.K)
        se = per_cluster.std(ddof=1) * math.sqrt(pop.K) / sel.sum()
        assert abs(resid.sum() / sel.sum()) < 3 * se, b


def test_outcome_residual_sd(big_population):
    cfg, pop = big_population
    c = pop.cluster
    resid = pop.Y - outcome_mean(pop.A[c], pop.D, pop.X, pop.V[c], pop.N[c])
    assert abs(resid.std() - 6.0) < 0.05


def test_pathwise_monotonicity(big_population):
    _, pop = big_population
    assert np.all(pop.D1 >= pop.D0)


def test_draw_cluster_marginals():
    cfg = DGPConfig()
    rng = np.random.default_rng(0)
    sizes = [draw_cluster(cfg, rng)[0].size for _ in range(300)]
    assert min(sizes) >= 10 and max(sizes) <= 50


def test_flat_view_matches_dataset_flatten():
    d = draw_population(DGPConfig(), 5, np.random.default_rng(1))
    a, b = to_individual(d), flatten(to_dataset(d))
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.Y, b.Y)
    assert a.names == b.names


def test_misspecify_examples():
    np.testing.assert_allclose(misspecify_features(0.0, 1.0, 25.0), (1.0, 1.0, 4.096))
    u = misspecify_features(10.0, 0.0, 30.0)
    np.testing.assert_allclose(u, (math.exp(-3.0), 0.0, 0.216))


def test_misspecify_not_idempotent():
    once = misspecify_features(1.0, 2.0, 20.0)
    twice = misspecify_features(*once)
    assert not np.allclose(once, twice)


# --- oracle ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def oracle():
    return truth_oracle(DGPConfig(), 10_000, seed=1)


def test_oracle_structure(oracle):
    assert oracle.defiers == 0
    assert oracle.truths["e_de"] == (0.0, 0.0)
    assert oracle.value("PCE_co") - (oracle.value("NAE_co") + oracle.value("ICE_co")) == pytest.approx(0, abs=1e-12)
    assert oracle.value("ICE_nt") == 0.0 and oracle.value("ICE_at") == 0.0
    assert sum(oracle.value(f"e_{g}") for g in ("at", "co", "nt")) == pytest.approx(1.0, abs=1e-12)
    for k in ("NAE_co", "ICE_co", "PCE_co", "NAE_nt", "NAE_at", "ITT"):
        assert oracle.se(k) > 0


def test_oracle_reproducible(oracle):
    again = truth_oracle(DGPConfig(), 10_000, seed=1)
    assert again.truths == oracle.truths


def test_oracle_fresh_seed_consistent(oracle):
    other = truth_oracle(DGPConfig(), 10_000, seed=2)
    for k in ("ICE_co", "NAE_co", "NAE_nt"):
        se = math.hypot(oracle.se(k), other.se(k))
        assert abs(oracle.value(k) - other.value(k)) < 3 * se, k


def test_ice_co_is_complier_average_of_uptake_effect(oracle):
    # independent computation on a fresh draw: complier average of 0.2 + 3N/100 + 1.5X with weight 1/N
    pop = draw_population(DGPConfig(), 10_000, np.random.default_rng(99))
    c = pop.cluster
    co = (pop.stratum == 1).astype(float)
    wn = 1.0 / pop.N[c]
    f = 0.2 + 3 * pop.N[c] / 100 + 1.5 * pop.X
    num = np.bincount(c, weights=wn * co * f, minlength=pop.K)
    den = np.bincount(c, weights=wn * co, minlength=pop.K)
    value = num.sum() / den.sum()
    infl = (num - value * den) / den.mean()
    se = infl.std(ddof=1) / math.sqrt(pop.K)
    assert abs(value - oracle.value("ICE_co")) < 3 * math.hypot(se, oracle.se("ICE_co"))


def test_identification_matches_truth(oracle):
    for k, (v, se) in oracle.identification.items():
        if se > 0:
            assert abs(v - oracle.value(k)) < 3 * se, k


def test_pi_violation_shifts_identification():
    o = truth_oracle(DGPConfig(multipliers={"nt,0,0": 0.5}), 10_000, seed=1)
    v, se = o.identification["NAE_co"]
    assert abs(v - o.value("NAE_co")) > 3 * se


# --- experiment runner -------------------------------------------------------------------

SMALL = ExperimentConfig(dgp=DGPConfig(K=30), scenarios=("a", "d"), estimators=("mo", "dr", "np"),
                         estimands=("NAE_co", "ICE_co"), reps=2, seed=3, bootstrap_B=0,
                         flexible=ExperimentConfig().parametric)


def test_replicate_rows():
    rows = run_replicate(SMALL, 0)
    assert len(rows) == 2 * 3 * 2
    assert {r.scenario for r in rows} == {"a", "d"}
    np_rows = [r for r in rows if r.estimator == "np"]
    assert all(r.ci_lo <= r.estimate <= r.ci_hi for r in np_rows)


def test_replicates_byte_identical_and_thread_independent():
    a = rows_csv(run_replicates(SMALL), ROW_FIELDS)
    b = rows_csv(run_replicates(SMALL, threads=2), ROW_FIELDS)
    assert a == b
    assert rows_csv(read_rows(a), ROW_FIELDS) == a


def test_summary_fields():
    truth = truth_oracle(SMALL.dgp, 2_000, seed=0)
    summ = summarize(run_replicates(SMALL), truth)
    assert len(summ) == 2 * 3 * 2
    s = summ[0]
    assert s.n == 2 and s.failures == 0
    assert s.bias == pytest.approx(s.mean - s.truth)
    assert set(SUMMARY_FIELDS) <= set(vars(s))


def test_unknown_scenario():
    with pytest.raises(ConfigError):
        ExperimentConfig(scenarios=("z",))
