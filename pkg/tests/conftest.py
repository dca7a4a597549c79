import itertools
import math

import numpy as np
import pytest

from prefshap.policy_core import World, softmax_policy_from_logits
from prefshap.reward import PreferenceDataset, RewardTable


def brute_force_shapley(n, utility):
    """Average marginal contribution over all n! orderings."""
    total = None
    for order in itertools.permutations(range(n)):
        members = set()
        contrib = [None] * n
        for i in order:
            before = np.atleast_1d(utility(frozenset(members)))
            members.add(i)
            contrib[i] = np.atleast_1d(utility(frozenset(members))) - before
        c = np.stack(contrib)
        total = c if total is None else total + c
    return total / math.factorial(n)


def bisect(f, lo, hi, tol=1e-14):
    flo = f(lo)
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def random_world(rng, P, R):
    return World(tuple(f"p{i}" for i in range(P)), tuple(f"y{j}" for j in range(R)),
                 rng.dirichlet(np.ones(P)))


def random_policy(rng, world, scale=1.0):
    return softmax_policy_from_logits(world, scale * rng.normal(size=world.shape))


def random_reward(rng, world, scale=1.0):
    return RewardTable.fixed(world, scale * rng.normal(size=world.shape))


def pair_dataset(world, counts, source_id="d"):
    """Dataset from {(prompt, chosen, rejected): count}."""
    triples = []
    for (x, a, b), c in counts.items():
        triples += [(x, a, b)] * c
    return PreferenceDataset.from_triples(source_id, world, triples)


@pytest.fixture
def ab_world():
    return World.uniform(["x"], ["a", "b"])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the test outcome decides PASS/FAIL."""
    record = {"name": request.node.name, "detail": ""}
    yield record
    ACCEPTANCE_LINES.append(record)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" and "criterion" in item.fixturenames:
        item.funcargs["criterion"]["passed"] = rep.passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for rec in sorted(ACCEPTANCE_LINES, key=lambda r: r["name"]):
        status = "PASS" if rec.get("passed") else "FAIL"
        terminalreporter.write_line(f"{status}  {rec['name']}: {rec['detail']}")
