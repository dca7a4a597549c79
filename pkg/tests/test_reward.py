import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from prefshap.errors import ConvergenceError, DomainError, InvalidInputError
from prefshap.alignment import exact_aligned_policy
from prefshap.policy_core import Policy, World, softmax_policy_from_logits, uniform_policy
from prefshap.reward import (
    FitOptions,
    PreferenceDataset,
    RewardTable,
    bt_log_likelihood,
    fit_bt_reward,
    gauge_fix,
    implicit_reward,
    load_dataset,
    load_reward,
    pref_prob,
    save_dataset,
    save_reward,
)

from conftest import bisect, pair_dataset, random_policy, random_reward, random_world


def reward_ab(world, a, b, gauge="raw"):
    return RewardTable(world, np.array([[a, b]]), gauge)


def fitted_diff(r):
    return r.values[0, 0] - r.values[0, 1]


def test_bt_log_likelihood_examples(ab_world):
    data4 = pair_dataset(ab_world, {("x", "a", "b"): 3, ("x", "b", "a"): 1})
    assert bt_log_likelihood(reward_ab(ab_world, 0.3, 0.3), data4) == pytest.approx(4 * np.log(0.5), abs=1e-14)
    assert bt_log_likelihood(reward_ab(ab_world, 0.3, 0.3), data4) == pytest.approx(-2.7726, abs=1e-4)
    sep = pair_dataset(ab_world, {("x", "a", "b"): 4})
    assert bt_log_likelihood(reward_ab(ab_world, 10.0, -10.0), sep) == pytest.approx(0.0, abs=1e-7)
    one = pair_dataset(ab_world, {("x", "a", "b"): 1})
    assert bt_log_likelihood(reward_ab(ab_world, 1.0, 0.0), one) == pytest.approx(-0.31326168751822286, abs=1e-12)


def test_bt_log_likelihood_nonpositive(rng):
    w = random_world(rng, 3, 4)
    data = PreferenceDataset("d", w, rng.integers(3, size=30), np.zeros(30, int), np.ones(30, int))
    for _ in range(20):
        assert bt_log_likelihood(random_reward(rng, w, 3.0), data) <= 0


def test_fit_three_to_one_matches_bisection(ab_world):
    data = pair_dataset(ab_world, {("x", "a", "b"): 3, ("x", "b", "a"): 1})
    # stationarity of 3 log s(d) + log s(-d): 3 s(-d) - s(d) = 0
    oracle = bisect(lambda d: 3 * expit(-d) - expit(d), -10, 10)
    assert oracle == pytest.approx(np.log(3), abs=1e-12)
    r = fit_bt_reward(data, l2=0.0)
    assert fitted_diff(r) == pytest.approx(oracle, abs=1e-6)
    assert fitted_diff(r) == pytest.approx(1.0986, abs=1e-4)
    assert r.gauge == "zero_mean_per_prompt"


def test_fit_balanced_is_zero(ab_world):
    data = pair_dataset(ab_world, {("x", "a", "b"): 2, ("x", "b", "a"): 2})
    assert fitted_diff(fit_bt_reward(data, l2=0.0)) == pytest.approx(0.0, abs=1e-9)


def test_fit_separable_regularized(ab_world):
    data = pair_dataset(ab_world, {("x", "a", "b"): 4})
    l2 = 1e-3
    # r = (d/2, -d/2): objective 4 log s(d) - l2/2 * d^2/2, stationarity 4 s(-d) = l2 d / 2
    oracle = bisect(lambda d: 4 * expit(-d) - l2 * d / 2, 0, 100)
    r = fit_bt_reward(data, l2=l2)
    assert np.isfinite(fitted_diff(r))
    assert fitted_diff(r) == pytest.approx(oracle, abs=1e-6)
    # unregularized: no maximizer, the fit runs out to where 4 s(-d) falls below tol
    loose = fitted_diff(fit_bt_reward(data, l2=0.0, opts=FitOptions(tol=1e-4)))
    tight = fitted_diff(fit_bt_reward(data, l2=0.0, opts=FitOptions(tol=1e-10)))
    assert tight - loose > np.log(1e6) - 1
    assert tight > 2 * oracle


def test_fit_convergence_error_carries_grad_norm(ab_world):
    data = pair_dataset(ab_world, {("x", "a", "b"): 4})
    with pytest.raises(ConvergenceError) as err:
        fit_bt_reward(data, l2=0.0, opts=FitOptions(max_iters=2))
    assert err.value.grad_norm > 1e-8
    assert "gradient norm" in str(err.value)


def test_fit_oracle_equivalence_random_counts():
    w = World.uniform(["x"], ["a", "b"])
    rng = np.random.default_rng(3)
    for _ in range(10):
        wins, losses = rng.integers(1, 40, size=2)
        data = pair_dataset(w, {("x", "a", "b"): int(wins), ("x", "b", "a"): int(losses)})
        oracle = bisect(lambda d: wins * expit(-d) - losses * expit(d), -20, 20)
        assert fitted_diff(fit_bt_reward(data, l2=0.0)) == pytest.approx(oracle, abs=1e-6)


def test_fit_beats_zero_reward(rng):
    w = random_world(rng, 3, 4)
    truth = random_reward(rng, w)
    from prefshap.synthgen import generate_preferences
    data = generate_preferences(truth, w, 400, seed=5)
    fit = fit_bt_reward(data, l2=0.0)
    assert bt_log_likelihood(fit, data) >= bt_log_likelihood(RewardTable.fixed(w, np.zeros(w.shape)), data)


def test_fit_gradient_method_agrees(ab_world):
    data = pair_dataset(ab_world, {("x", "a", "b"): 3, ("x", "b", "a"): 1})
    r = fit_bt_reward(data, l2=1e-3, opts=FitOptions(method="gradient", step_size=0.5))
    assert fitted_diff(r) == pytest.approx(fitted_diff(fit_bt_reward(data, l2=1e-3)), abs=1e-7)


def test_fit_unseen_pairs_stay_zero(rng):
    w = World.uniform(["x", "z"], ["a", "b", "c"])
    data = pair_dataset(w, {("x", "a", "b"): 5, ("x", "b", "a"): 2})
    r = fit_bt_reward(data)
    np.testing.assert_allclose(r.values[1], 0.0, atol=1e-12)
    assert r.values[0, 2] == pytest.approx(0.0, abs=1e-9)


def test_fit_empty_rejected(ab_world):
    with pytest.raises(InvalidInputError):
        fit_bt_reward(PreferenceDataset.from_triples("e", ab_world, []))


def test_gauge_fix_idempotent(rng):
    w = random_world(rng, 4, 5)
    r = random_reward(rng, w)
    assert np.max(np.abs(gauge_fix(r.values) - r.values)) <= 1e-12
    with pytest.raises(InvalidInputError):
        RewardTable(w, np.ones(w.shape))


def test_implicit_reward_examples(ab_world, rng):
    ref = uniform_policy(ab_world)
    np.testing.assert_array_equal(implicit_reward(ref, ref, 0.1).values, 0.0)
    pol = exact_aligned_policy(ref, RewardTable.raw(ab_world, np.array([[1.0, 0.0]])), 1.0)
    np.testing.assert_allclose(implicit_reward(pol, ref, 1.0).values, [[0.5, -0.5]], atol=1e-14)
    w = random_world(rng, 6, 5)
    ref = random_policy(rng, w)
    r = random_reward(rng, w)
    back = implicit_reward(exact_aligned_policy(ref, r, 0.1), ref, 0.1)
    assert np.max(np.abs(back.values - r.values)) <= 1e-8


def test_implicit_reward_support(ab_world):
    det = Policy(ab_world, np.array([[0.0, -np.inf]]))
    u = uniform_policy(ab_world)
    with pytest.raises(DomainError):
        implicit_reward(u, det, 1.0)
    with pytest.raises(DomainError):
        implicit_reward(det, u, 1.0)


def test_pref_prob_examples(ab_world):
    assert pref_prob(reward_ab(ab_world, 2.0, 2.0), "x", "a", "b") == 0.5
    assert pref_prob(reward_ab(ab_world, np.log(3), 0.0), "x", "a", "b") == pytest.approx(0.75, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(-40, 40), st.floats(-40, 40), st.floats(-1e3, 1e3))
def test_pref_prob_complement_and_shift(a, b, c):
    w = World.uniform(["x"], ["a", "b"])
    r = reward_ab(w, a, b)
    assert pref_prob(r, "x", "a", "b") + pref_prob(r, "x", "b", "a") == 1.0
    shifted = reward_ab(w, a + c, b + c)
    assert pref_prob(shifted, "x", "a", "b") == pytest.approx(pref_prob(r, "x", "a", "b"), abs=1e-10)


def test_dataset_validation(ab_world):
    with pytest.raises(InvalidInputError):
        PreferenceDataset.from_triples("d", ab_world, [("x", "a", "a")])
    with pytest.raises(KeyError):
        PreferenceDataset.from_triples("d", ab_world, [("x", "a", "zz")])
    assert len(PreferenceDataset.from_triples("empty", ab_world, [])) == 0


def test_dataset_and_reward_files(tmp_path, rng):
    w = random_world(rng, 3, 3)
    data = PreferenceDataset("s7", w, [0, 2, 1], [0, 1, 2], [1, 0, 0])
    save_dataset(tmp_path / "s7.jsonl", data)
    lines = (tmp_path / "s7.jsonl").read_text().splitlines()
    assert lines[0] == '{"prompt": "p0", "chosen": "y0", "rejected": "y1"}'
    back = load_dataset(tmp_path / "s7.jsonl", w)
    assert back.source_id == "s7" and back.triples() == data.triples()
    r = random_reward(rng, w)
    save_reward(tmp_path / "r.json", r)
    r2 = load_reward(tmp_path / "r.json", w)
    assert r2.gauge == "zero_mean_per_prompt"
    np.testing.assert_array_equal(r2.values, r.values)
