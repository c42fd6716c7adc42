import numpy as np
import pytest
from hypothesis import given, strategies as st

from clusterps.errors import ConfigError, InvalidCell, StratumUnavailable
from clusterps.principal_score import (
    SCHEMES,
    STRATA,
    principal_score,
    principal_score_raw,
    scheme,
    score_diagnostics,
    stratum_proportion,
)
from clusterps.simulation import DGPConfig, draw_population, to_individual

from helpers import true_table

probs = st.floats(0.0, 1.0)


def test_scores_example():
    e = {g: principal_score(g, 0.7, 0.2).floored for g in STRATA}
    assert e["at"] == pytest.approx(0.2) and e["co"] == pytest.approx(0.5)
    assert e["nt"] == pytest.approx(0.3) and e["de"] == 0.0


def test_strong_mode_reduction():
    assert principal_score("co", 0.64, 0.0).floored == 0.64
    assert principal_score("at", 0.64, 0.0).floored == 0.0


@given(probs, probs)
def test_defiers_exactly_zero(p11, p01):
    assert principal_score_raw("de", p11, p01) == 0.0


@given(probs, probs)
def test_scores_sum_to_one(p11, p01):
    total = sum(principal_score_raw(g, p11, p01) for g in STRATA)
    assert abs(total - 1.0) <= 1e-12


@given(probs)
def test_strong_mode_invariants(p11):
    assert principal_score_raw("at", p11, 0.0) == 0.0
    assert abs(principal_score_raw("co", p11, 0.0) + principal_score_raw("nt", p11, 0.0) - 1.0) <= 1e-12


def test_flooring_counted():
    # p01 > p11 makes the complier score negative before flooring
    ps = principal_score("co", np.array([0.3, 0.6]), np.array([0.4, 0.1]))
    np.testing.assert_allclose(ps.raw, [-0.1, 0.5])
    np.testing.assert_allclose(ps.floored, [0.0, 0.5])
    assert ps.n_floored == 1
    diag = score_diagnostics(np.array([0.3, 0.6]), np.array([0.4, 0.1]), "standard")
    assert diag["floored"] == {"at": 0, "co": 1, "nt": 0}
    assert diag["max_sum_error"] <= 1e-12


def test_d_star_and_cells():
    assert SCHEMES["at"].d_star(1, 0) == 1 and SCHEMES["nt"].d_star(1, 0) == 0
    assert SCHEMES["co"].d_star(1, 1) == 1 and SCHEMES["co"].d_star(1, 0) == 0
    assert set(SCHEMES["co"].valid_cells) == {(1, 1), (1, 0), (0, 0)}
    for g in ("at", "nt"):
        assert set(SCHEMES[g].valid_cells) == {(1, 0), (0, 0)}
        with pytest.raises(InvalidCell):
            SCHEMES[g].check_cell((1, 1))


def test_unavailable_strata():
    with pytest.raises(StratumUnavailable):
        scheme("de")
    with pytest.raises(StratumUnavailable):
        scheme("at", "strong")
    with pytest.raises(ConfigError):
        scheme("xx")


def _constant_data(n_clusters=4):
    from clusterps.data import IndividualData

    cluster = np.repeat(np.arange(n_clusters), 3)
    n = len(cluster)
    return IndividualData(cluster, (cluster % 2).astype(float), np.zeros(n), np.zeros(n), np.zeros((n, 1)),
                          ("x_1",), np.ones(n_clusters), np.full(n_clusters, 3.0), 0.5)


def test_proportion_constant_score():
    data = _constant_data()
    # e_nt = 1 - p11 = 0.5 everywhere
    assert stratum_proportion("nt", data, np.full(data.n, 0.5), np.zeros(data.n)) == pytest.approx(0.5)


def test_proportion_strong_mode_no_always_takers():
    data = _constant_data()
    assert stratum_proportion("at", data, np.full(data.n, 0.7), np.zeros(data.n)) == 0.0


def test_proportion_matches_complier_labels():
    cfg = DGPConfig()
    draw = draw_population(cfg, 20_000, np.random.default_rng(17))
    data = to_individual(draw)
    tab = true_table(draw, cfg)
    est = stratum_proportion("co", data, tab.p11, tab.p01)
    e = tab.p11 - tab.p01
    is_co = (draw.stratum == 1).astype(float)
    # same weighting for labels and scores; cluster-level SE of the paired difference
    s = data.cluster_sum(is_co - e) / data.W.mean()
    z = s.mean() / (s.std(ddof=1) / np.sqrt(data.K))
    assert abs(z) < 3
    assert est == pytest.approx(data.cluster_sum(is_co).sum() / data.W.sum(), abs=0.01)
