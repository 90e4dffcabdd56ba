import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polbc.core_math import make_rng
from polbc.evaluation import (
    MetricReport,
    coefficient_of_variation,
    distance_error,
    graded_path_policies,
    metric_study,
    minmax_normalize,
    return_correlation,
)
from polbc.supervector import DistanceMatrix, symmetric_matrix


def dm(values):
    v = np.asarray(values, float)
    return DistanceMatrix(v, tuple(str(i) for i in range(v.shape[0])))


def from_pairs(n, pairs):
    """Symmetric matrix from upper-triangle values in row-major order."""
    m = np.zeros((n, n))
    m[np.triu_indices(n, 1)] = pairs
    return dm(m + m.T)


def test_minmax_example():
    # off-diagonal must be symmetric with zero diagonal, so scale a valid matrix
    m = from_pairs(3, [2.0, 4.0, 1.0])
    out = minmax_normalize(m)
    np.testing.assert_allclose(out.values, from_pairs(3, [0.5, 1.0, 0.25]).values)


def test_minmax_fixed_point_and_constant():
    m = from_pairs(3, [0.2, 1.0, 0.7])
    np.testing.assert_array_equal(minmax_normalize(m).values, m.values)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        z = minmax_normalize(dm(np.zeros((3, 3))))
    assert not np.any(z.values) and caught


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_minmax_preserves_order(seed):
    rng = make_rng(seed)
    n = int(rng.integers(2, 7))
    m = symmetric_matrix(rng.uniform(0, 10, size=(n, n)))
    out = minmax_normalize(m)
    assert out.values.min() >= 0 and out.values.max() <= 1
    a, b = m.values.ravel(), out.values.ravel()
    for i in range(a.size):
        for j in range(a.size):
            if a[i] < a[j]:
                assert b[i] <= b[j]


def test_correlation_extremes():
    returns = np.array([0.0, 1.0, 3.0, 7.0])
    gap = np.abs(returns[:, None] - returns[None, :])
    assert return_correlation(dm(2.0 * gap), returns) == pytest.approx(1.0)
    anti = 20.0 - gap
    np.fill_diagonal(anti, 0.0)
    assert return_correlation(dm(anti), returns) == pytest.approx(-1.0)


def test_correlation_hand_case():
    # pairs (0,1), (0,2), (1,2): return gaps 1, 2, 1; distances 1, 3, 2
    r = return_correlation(from_pairs(3, [1.0, 3.0, 2.0]), [0.0, 1.0, 2.0])
    x, y = np.array([1.0, 3.0, 2.0]), np.array([1.0, 2.0, 1.0])
    xc, yc = x - x.mean(), y - y.mean()
    assert r == pytest.approx(xc @ yc / np.sqrt((xc @ xc) * (yc @ yc)), abs=1e-12)
    assert r == pytest.approx(np.sqrt(3) / 2, abs=1e-12)


def test_correlation_errors():
    with pytest.raises(ValueError):
        return_correlation(from_pairs(3, [1.0, 1.0, 1.0]), [0.0, 1.0, 2.0])
    with pytest.raises(ValueError):
        return_correlation(from_pairs(3, [1.0, 2.0, 3.0]), [1.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        return_correlation(dm([[0.0, 1.0], [1.0, 0.0]]), [0.0, 1.0])
    with pytest.raises(ValueError):
        return_correlation(from_pairs(3, [1.0, 2.0, 3.0]), [0.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_correlation_relabeling_invariant(seed):
    rng = make_rng(seed)
    n = 6
    m = symmetric_matrix(rng.uniform(0, 1, size=(n, n)))
    r = rng.normal(size=n)
    perm = rng.permutation(n)
    permuted = dm(m.values[np.ix_(perm, perm)])
    assert return_correlation(permuted, r[perm]) == pytest.approx(return_correlation(m, r), abs=1e-12)


def test_distance_error_cases():
    truth = from_pairs(3, [0.5, 1.0, 0.0])
    assert distance_error(truth, truth) == 0.0
    pred = from_pairs(3, [0.4, 1.0, 0.3])
    # the zero-truth pair is skipped; 0.1 / 0.5 and 0 / 1 remain
    assert distance_error(pred, truth) == pytest.approx(0.1)
    doubled = from_pairs(3, [1.0, 2.0, 0.0])
    assert distance_error(minmax_normalize(doubled), minmax_normalize(truth)) == 0.0
    with pytest.raises(ValueError):
        distance_error(truth, dm(np.zeros((2, 2))))


def test_cv_cases():
    a = from_pairs(2, [1.0])
    assert coefficient_of_variation([a, a, a]) == 0.0
    reps = [from_pairs(2, [v]) for v in (1.0, 1.0, 4.0)]
    assert coefficient_of_variation(reps) == pytest.approx(np.sqrt(2) / 2, abs=1e-12)
    scaled = [from_pairs(2, [3 * v]) for v in (1.0, 1.0, 4.0)]
    assert coefficient_of_variation(scaled) == pytest.approx(coefficient_of_variation(reps), abs=1e-12)
    with pytest.raises(ValueError):
        coefficient_of_variation([a])


def test_cv_skips_zero_mean_pairs():
    reps = [from_pairs(3, [0.0, 1.0, 2.0]), from_pairs(3, [0.0, 1.0, 2.0])]
    assert coefficient_of_variation(reps) == 0.0


def test_report_round_trip_and_ranges():
    r = MetricReport("supervector", 0.5, 0.2, 0.1, 10, 3)
    assert MetricReport.from_json(r.to_json()) == r
    with pytest.raises(ValueError):
        MetricReport("x", float("nan"), 0.2, 0.1, 10, 3)
    with pytest.raises(ValueError):
        MetricReport("x", 1.5, 0.2, 0.1, 10, 3)


def test_graded_policies():
    pols = graded_path_policies(0, 5, 20)
    assert [p.epsilon for p in pols] == [i / 20 for i in range(20)]


def test_small_metric_study_runs_every_method():
    res = metric_study(("supervector", "gaussian", "histogram"), budgets=(3, 5), repetitions=2,
                       n_policies=5)
    assert {(r.method, r.trajectories) for r in res.reports} == {
        (m, b) for m in ("supervector", "gaussian", "histogram") for b in (3, 5)}
    assert len(res.rows) == 3 * 2 * 2
    header = res.to_csv().splitlines()[0]
    assert header == "method,trajectories,repetition,correlation,distance_error"
    with pytest.raises(ValueError):
        metric_study(repetitions=1)
