import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polbc.core_math import make_rng
from polbc.environments import GridLayout, load_scenario
from polbc.policies import (
    AnglePolicy,
    PathPolicy,
    SoftmaxPolicy,
    TabularPolicy,
    policy_flat_params,
    policy_from_flat,
    policy_from_json,
    policy_to_json,
)


def test_tabular_one_hot_is_deterministic():
    layout = GridLayout.parse("S .")
    pol = TabularPolicy.parse("R L", layout)
    rng = make_rng(0)
    assert {pol.sample([0, 0], rng) for _ in range(50)} == {3}


def test_tabular_wall_query_fails():
    layout = GridLayout.parse("S #")
    pol = TabularPolicy.parse("R #", layout)
    with pytest.raises(ValueError):
        pol.sample([0, 1], make_rng(0))


def test_tabular_text_round_trip():
    _, blue, _ = load_scenario("doorway")
    back = TabularPolicy.parse(blue.to_text())
    np.testing.assert_array_equal(back.probs, blue.probs)
    mixed = TabularPolicy.parse("0.25,0.25,0.25,0.25 U")
    np.testing.assert_array_equal(TabularPolicy.parse(mixed.to_text()).probs, mixed.probs)


def test_tabular_rejects_bad_rows():
    with pytest.raises(ValueError):
        TabularPolicy.parse("0.5,0.6,0,0")
    with pytest.raises(ValueError):
        TabularPolicy.parse("U U\nU")


def test_zero_softmax_is_uniform():
    pol = SoftmaxPolicy.zeros(3, 5)
    rng = make_rng(1)
    counts = np.bincount([pol.sample(np.ones(3), rng) for _ in range(10_000)], minlength=5)
    chi2 = np.sum((counts - 2000.0) ** 2 / 2000.0)
    assert chi2 < 18.47  # 0.999 quantile, 4 degrees of freedom
    assert pol.action_log_prob(np.ones(3), 2) == pytest.approx(np.log(0.2), abs=1e-12)
    with pytest.raises(ValueError):
        pol.action_log_prob(np.ones(3), 5)


def test_sample_batch_matches_probabilities():
    pol = SoftmaxPolicy.init(2, 4, make_rng(2))
    x = np.tile([[0.3, -0.2]], (20_000, 1))
    freq = np.bincount(pol.sample_batch(x, make_rng(3)), minlength=4) / 20_000
    np.testing.assert_allclose(freq, pol.probs(x[:1])[0], atol=0.015)


def test_log_probs_match_forward():
    pol = SoftmaxPolicy.init(3, 5, make_rng(4))
    x = make_rng(5).normal(size=(7, 3))
    np.testing.assert_allclose(np.exp(pol.log_probs(x)), pol.probs(x), rtol=1e-12)
    np.testing.assert_allclose(np.exp(pol.log_probs(x)).sum(axis=1), 1.0, atol=1e-12)


def test_angle_range():
    rng = make_rng(6)
    for _ in range(20):
        pol = AnglePolicy.init(2, rng)
        pol = pol.with_flat(pol.flat() * 50)
        phi = pol.angles(rng.normal(size=(100, 2)) * 10)
        assert np.all((phi >= 0) & (phi <= 2 * np.pi))
    assert AnglePolicy.zeros().sample([0.0, 0.0]) == pytest.approx(np.pi)


def test_flat_round_trip_and_zero():
    pol = SoftmaxPolicy.init(2, 3, make_rng(7))
    back = policy_from_flat(pol, policy_flat_params(pol))
    x = np.array([0.4, 0.1])
    np.testing.assert_array_equal(back.probs(x), pol.probs(x))
    zero = policy_from_flat(pol, np.zeros(pol.flat().size))
    np.testing.assert_allclose(zero.probs(x), 1 / 3)
    with pytest.raises(ValueError):
        policy_from_flat(pol, np.zeros(3))


def test_flat_perturbation_is_local():
    pol = AnglePolicy.init(2, make_rng(8))
    vec = policy_flat_params(pol)
    vec2 = vec.copy()
    vec2[[3, 17]] += 0.5
    changed = np.flatnonzero(policy_flat_params(policy_from_flat(pol, vec2)) != vec)
    assert changed.tolist() == [3, 17]


def test_json_round_trips():
    _, blue, _ = load_scenario("stochastic")
    rng = make_rng(9)
    for pol in (blue, SoftmaxPolicy.init(5, 5, rng), AnglePolicy.init(2, rng), PathPolicy(3, 5, 0.25)):
        back = policy_from_json(policy_to_json(pol))
        assert type(back) is type(pol)
        np.testing.assert_array_equal(back.flat(), pol.flat())
    with pytest.raises(ValueError):
        policy_from_json('{"type": "nope"}')


def test_path_policy():
    pol = PathPolicy(0, 5, 0.0)
    state = np.zeros(5)
    p = pol.action_probs(state)
    assert p.max() == 1.0
    noisy = PathPolicy(0, 5, 0.5).action_probs(state)
    assert noisy.sum() == pytest.approx(1.0) and noisy.max() == pytest.approx(0.6)
    with pytest.raises(ValueError):
        PathPolicy(0, 5, 1.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_action_distributions_valid(seed):
    rng = make_rng(seed)
    pol = SoftmaxPolicy.init(int(rng.integers(1, 6)), int(rng.integers(2, 7)), rng)
    pol = pol.with_flat(pol.flat() * rng.uniform(0, 20))
    p = pol.probs(rng.normal(size=(5, pol.net.input_dim)) * 5)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_sampling_is_reproducible():
    pol = SoftmaxPolicy.init(2, 4, make_rng(10))
    a = [pol.sample([0.1, 0.2], r) for r in [make_rng(11)] for _ in range(30)]
    b = [pol.sample([0.1, 0.2], r) for r in [make_rng(11)] for _ in range(30)]
    assert a == b
