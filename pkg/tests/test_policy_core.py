import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from prefshap.errors import DomainError, InvalidInputError, UnknownIdentifierError
from prefshap.policy_core import (
    Policy,
    World,
    kl_divergence,
    kl_rows,
    load_policy,
    load_world,
    log_prob,
    sample_response,
    save_policy,
    save_world,
    softmax_policy_from_logits,
    tv_distance,
    uniform_policy,
)

from conftest import random_policy, random_world

SIGMA_1 = 1.0 / (1.0 + np.exp(-1.0))


def test_world_validation():
    with pytest.raises(InvalidInputError):
        World((), ("a",), np.array([]))
    with pytest.raises(InvalidInputError):
        World(("x", "x"), ("a",), np.array([0.5, 0.5]))
    with pytest.raises(InvalidInputError):
        World(("x",), ("a", "a"), np.array([1.0]))
    with pytest.raises(InvalidInputError):
        World(("x", "z"), ("a",), np.array([0.7, 0.4]))
    with pytest.raises(InvalidInputError):
        World(("x", "z"), ("a",), np.array([1.5, -0.5]))


def test_softmax_examples(ab_world):
    two = World.uniform(["x", "z"], ["a", "b"])
    pol = softmax_policy_from_logits(two, np.array([[0.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_allclose(pol.probs[0], [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(pol.probs[1], [SIGMA_1, 1 - SIGMA_1], atol=1e-15)
    assert pol.probs[1, 0] == pytest.approx(0.7311, abs=1e-4)
    shifted = softmax_policy_from_logits(two, np.array([[5.0, 5.0], [1.0 + 37.5, 37.5]]))
    np.testing.assert_allclose(shifted.log_probs, pol.log_probs, atol=1e-12)


def test_softmax_rejects_nonfinite(ab_world):
    with pytest.raises(InvalidInputError):
        softmax_policy_from_logits(ab_world, np.array([[np.nan, 0.0]]))
    with pytest.raises(InvalidInputError):
        softmax_policy_from_logits(ab_world, np.array([[np.inf, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(arrays(float, (3, 4), elements=st.floats(-50, 50)),
       arrays(float, (3, 1), elements=st.floats(-1e3, 1e3)))
def test_gauge_invariance(logits, shift):
    w = World.uniform(["p0", "p1", "p2"], ["a", "b", "c", "d"])
    p = softmax_policy_from_logits(w, logits)
    q = softmax_policy_from_logits(w, logits + shift)
    np.testing.assert_allclose(np.exp(p.log_probs), np.exp(q.log_probs), atol=1e-12, rtol=0)
    np.testing.assert_allclose(p.probs.sum(axis=1), 1.0, atol=1e-9)


def test_log_prob(ab_world):
    assert log_prob(uniform_policy(ab_world), "x", "a") == pytest.approx(np.log(0.5), abs=1e-15)
    det = Policy(ab_world, np.array([[0.0, -np.inf]]))
    assert log_prob(det, "x", "a") == 0.0
    assert log_prob(det, "x", "b") == -np.inf
    pol = softmax_policy_from_logits(ab_world, np.array([[1.0, 0.0]]))
    assert log_prob(pol, "x", "a") == pytest.approx(-0.31326168751822286, abs=1e-12)
    with pytest.raises(UnknownIdentifierError):
        log_prob(pol, "nope", "a")
    with pytest.raises(UnknownIdentifierError):
        log_prob(pol, "x", "c")


def test_policy_rejects_unnormalized(ab_world):
    with pytest.raises(InvalidInputError):
        Policy(ab_world, np.array([[0.0, 0.0]]))
    with pytest.raises(InvalidInputError):
        Policy(ab_world, np.array([[np.nan, 0.0]]))


def test_kl_examples(ab_world):
    u = uniform_policy(ab_world)
    det = Policy(ab_world, np.array([[0.0, -np.inf]]))
    assert kl_divergence(u, u, "x") == 0.0
    assert kl_divergence(det, u, "x") == pytest.approx(np.log(2), abs=1e-15)
    with pytest.raises(DomainError):
        kl_divergence(u, det, "x")


def test_kl_nonnegative_random(rng):
    w = random_world(rng, 5, 4)
    for _ in range(50):
        p, q = random_policy(rng, w, 2.0), random_policy(rng, w, 2.0)
        assert np.all(kl_rows(p, q) >= 0)
        assert np.all(kl_rows(p, q)[np.max(tv_distance(p, q)) > 0] > 0)
        assert np.all(kl_rows(p, p) == 0)


def test_sampling(ab_world):
    det = Policy(ab_world, np.array([[0.0, -np.inf]]))
    rng = np.random.default_rng(0)
    assert all(sample_response(det, "x", rng) == "a" for _ in range(100))
    u = uniform_policy(ab_world)
    rng = np.random.default_rng(1)
    draws = [sample_response(u, "x", rng) for _ in range(100_000)]
    assert abs(draws.count("a") / len(draws) - 0.5) <= 0.01
    r1, r2 = np.random.default_rng(7), np.random.default_rng(7)
    assert [sample_response(u, "x", r1) for _ in range(50)] == [sample_response(u, "x", r2) for _ in range(50)]


def test_roundtrip_files(tmp_path, rng):
    w = random_world(rng, 3, 4)
    save_world(tmp_path / "world.json", w)
    w2 = load_world(tmp_path / "world.json")
    assert w2 == w
    det = Policy(w, np.array([[0.0, -np.inf, -np.inf, -np.inf]] * 3))
    for pol in (random_policy(rng, w), det):
        save_policy(tmp_path / "p.json", pol)
        np.testing.assert_array_equal(load_policy(tmp_path / "p.json", w2).log_probs, pol.log_probs)


def test_immutable(rng):
    w = random_world(rng, 2, 2)
    p = random_policy(rng, w)
    with pytest.raises(ValueError):
        p.log_probs[0, 0] = 0.0
