import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polbc.core_math import make_rng
from polbc.gmm import (
    VARIANCE_FLOOR,
    DiagGmm,
    EmTrace,
    StateDataset,
    em_fit,
    kmeans_init,
    mean_log_likelihood,
    responsibilities,
)


def symmetric_pair():
    return DiagGmm([0.5, 0.5], [[-1.0], [1.0]], [[1.0], [1.0]])


def test_dataset_invariants():
    ds = StateDataset(np.zeros((5, 2)), [2, 3], [1.0, 2.0])
    assert ds.n_states == 5 and ds.n_episodes == 2 and ds.d == 2
    with pytest.raises(ValueError):
        StateDataset(np.zeros((5, 2)), [2, 2], [1.0, 2.0])
    with pytest.raises(ValueError):
        StateDataset(np.zeros((5, 2)), [2, 3], [1.0])
    with pytest.raises(ValueError):
        StateDataset(np.full((2, 1), np.nan), [2], [0.0])


def test_select_episodes():
    ds = StateDataset(np.arange(6.0)[:, None], [1, 2, 3], [1.0, 2.0, 3.0])
    sub = ds.select_episodes([2])
    np.testing.assert_array_equal(sub.states[:, 0], [3, 4, 5])
    assert list(sub.returns) == [3.0]


def test_kmeans_single_cluster_is_mean():
    x = make_rng(0).normal(size=(50, 3))
    np.testing.assert_allclose(kmeans_init(x, 1, make_rng(1))[0], x.mean(axis=0))


def test_kmeans_two_point_masses():
    x = np.array([[0.0]] * 10 + [[10.0]] * 10)
    centers = sorted(kmeans_init(x, 2, make_rng(0))[:, 0])
    assert centers == [0.0, 10.0]


def test_kmeans_too_few_points():
    with pytest.raises(ValueError):
        kmeans_init(np.array([[1.0], [1.0], [2.0]]), 3, make_rng(0))


def test_em_single_component_closed_form():
    x = make_rng(2).normal(3.0, 2.0, size=(400, 2))
    g = em_fit(x, 1, make_rng(0))
    np.testing.assert_allclose(g.means[0], x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(g.variances[0], x.var(axis=0), rtol=1e-10)
    assert g.weights[0] == 1.0


def test_em_separated_clusters():
    rng = make_rng(3)
    x = np.concatenate([rng.normal(-10, 0.5, 300), rng.normal(10, 0.5, 300)])[:, None]
    g = em_fit(x, 2, make_rng(1))
    means = sorted(g.means[:, 0])
    assert means[0] == pytest.approx(x[:300].mean(), abs=0.1)
    assert means[1] == pytest.approx(x[300:].mean(), abs=0.1)


def test_em_constant_data_hits_floor():
    g = em_fit(np.full((20, 2), 4.0), 1, make_rng(0))
    np.testing.assert_array_equal(g.variances, VARIANCE_FLOOR)
    assert np.all(np.isfinite(g.means))


def test_em_degenerate_more_components_than_unique_points():
    g = em_fit(np.array([[0.0], [0.0], [1.0], [1.0]]), 3, make_rng(0))
    assert g.k == 3 and np.all(g.variances >= VARIANCE_FLOOR)


def test_em_deterministic():
    x = make_rng(4).normal(size=(300, 2))
    a = em_fit(x, 4, make_rng(9))
    b = em_fit(x, 4, make_rng(9))
    assert a.ubm_id == b.ubm_id


def test_em_needs_enough_states():
    with pytest.raises(ValueError):
        em_fit(np.zeros((2, 1)), 3, make_rng(0))


def test_responsibility_examples():
    g = symmetric_pair()
    np.testing.assert_allclose(responsibilities(g, [0.0]), [0.5, 0.5], atol=1e-15)
    e2 = np.exp(2.0)
    np.testing.assert_allclose(responsibilities(g, [1.0]), [1 / (1 + e2), e2 / (1 + e2)], atol=1e-12)
    assert responsibilities(DiagGmm([1.0], [[0.0]], [[1.0]]), [7.0])[0] == 1.0
    with pytest.raises(ValueError):
        responsibilities(g, [0.0, 1.0])


def test_responsibilities_extreme_state_stay_finite():
    p = responsibilities(symmetric_pair(), [1e6])
    assert np.all(np.isfinite(p)) and p.sum() == pytest.approx(1.0)


def test_mean_log_likelihood():
    g = DiagGmm([1.0], [[0.0]], [[1.0]])
    assert mean_log_likelihood(g, np.array([[0.0]])) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)
    x = make_rng(0).normal(size=(30, 1))
    assert mean_log_likelihood(g, 3 * x) < mean_log_likelihood(g, x)
    with pytest.raises(ValueError):
        mean_log_likelihood(g, np.zeros((0, 1)))


def test_gmm_validation():
    with pytest.raises(ValueError):
        DiagGmm([0.7, 0.7], [[0.0], [1.0]], [[1.0], [1.0]])
    with pytest.raises(ValueError):
        DiagGmm([1.0], [[0.0]], [[0.0]])
    with pytest.raises(ValueError):
        DiagGmm([1.0], [[0.0, 1.0]], [[1.0]])


def test_gmm_json_round_trip():
    g = em_fit(make_rng(5).normal(size=(100, 2)), 3, make_rng(0))
    doc = json.loads(g.to_json())
    assert doc["type"] == "diag_gmm" and doc["k"] == 3 and doc["d"] == 2
    back = DiagGmm.from_json(g.to_json())
    assert back.ubm_id == g.ubm_id
    np.testing.assert_array_equal(back.means, g.means)
    doc["means"][0][0] += 1.0
    with pytest.raises(ValueError):
        DiagGmm.from_json(json.dumps(doc))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 3))
def test_em_log_likelihood_never_decreases(seed, k, d):
    rng = make_rng(seed)
    n = int(rng.integers(k * 5, 200))
    x = rng.normal(size=(n, d)) * rng.uniform(0.1, 5, size=d) + rng.integers(-3, 3, size=(n, 1))
    trace = EmTrace([], False)
    g = em_fit(x, k, make_rng(seed, 1), trace=trace)
    assert np.all(np.diff(trace.log_likelihoods) >= -1e-9)
    assert np.all(g.variances >= VARIANCE_FLOOR)
    assert abs(g.weights.sum() - 1.0) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_responsibilities_sum_to_one(seed):
    rng = make_rng(seed)
    k, d = int(rng.integers(1, 6)), int(rng.integers(1, 4))
    w = rng.dirichlet(np.ones(k))
    g = DiagGmm(w, rng.normal(size=(k, d)) * 5, rng.uniform(0.01, 3, size=(k, d)))
    p = responsibilities(g, rng.normal(size=(10, d)) * 10)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
