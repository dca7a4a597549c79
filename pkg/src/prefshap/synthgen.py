"""Synthetic worlds with known ground truth, and Bradley-Terry preference sampling."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from .errors import InvalidInputError
from .policy_core import Policy, World, softmax_policy_from_logits
from .reward import PreferenceDataset, RewardTable


@dataclass(frozen=True)
class WorldSpec:
    num_prompts: int = 8
    num_responses: int = 5
    num_sources: int = 4
    reward_scale: float = 1.0
    pairs_per_source: int = 2000
    seed: int = 0
    num_eval_rewards: int = 2

    def __post_init__(self):
        counts = (self.num_prompts, self.num_responses, self.num_sources,
                  self.pairs_per_source, self.num_eval_rewards)
        if min(counts) < 1:
            raise InvalidInputError("all counts must be >= 1")
        if not self.reward_scale > 0:
            raise InvalidInputError("reward_scale must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SyntheticWorld:
    world: World
    reference: Policy
    truths: dict[str, RewardTable]
    eval_rewards: dict[str, RewardTable]

    def __iter__(self):
        return iter((self.world, self.reference, self.truths, self.eval_rewards))


def source_ids(n: int) -> list[str]:
    return [f"s{i}" for i in range(n)]


def eval_reward_names(k: int) -> list[str]:
    return [f"eval{j}" for j in range(k)]


def source_seed(seed: int, index: int) -> int:
    """Seed for the preference data of source ``index`` under a global seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint32)[0])


def make_random_world(spec: WorldSpec) -> SyntheticWorld:
    """Random world, full-support reference, per-source truths and evaluation rewards.

    Evaluation rewards mix the source truths with random signed weights plus
    independent noise, so sources can help one evaluation axis and hurt
    another.
    """
    rng = np.random.default_rng(spec.seed)
    P, R, n = spec.num_prompts, spec.num_responses, spec.num_sources
    world = World(
        tuple(f"p{i}" for i in range(P)),
        tuple(f"y{j}" for j in range(R)),
        rng.dirichlet(np.ones(P)),
    )
    reference = softmax_policy_from_logits(world, rng.normal(size=(P, R)))
    truths = {
        sid: RewardTable.fixed(world, spec.reward_scale * rng.normal(size=(P, R)))
        for sid in source_ids(n)
    }
    stacked = np.stack([t.values for t in truths.values()])
    evals = {}
    for name in eval_reward_names(spec.num_eval_rewards):
        mix = rng.normal(size=n)
        noise = spec.reward_scale * rng.normal(size=(P, R))
        evals[name] = RewardTable.fixed(world, np.tensordot(mix, stacked, axes=1) / np.sqrt(n) + noise)
    return SyntheticWorld(world, reference, truths, evals)


def generate_preferences(
    truth: RewardTable, world: World, num_pairs: int, seed: int | None = None,
    source_id: str = "source",
) -> PreferenceDataset:
    """Sample Bradley-Terry labelled pairs from ``truth``.

    Each triple draws a prompt from ``world.eval_dist``, two distinct responses
    uniformly, and labels the first the winner with probability
    ``sigmoid(r(x, y1) - r(x, y2))``.
    """
    if num_pairs < 1:
        raise InvalidInputError("num_pairs must be >= 1")
    P, R = world.shape
    if R < 2:
        raise InvalidInputError("preference pairs need at least two responses")
    if truth.world != world:
        raise InvalidInputError("truth reward lives on a different world")
    rng = np.random.default_rng(seed)
    x = rng.choice(P, size=num_pairs, p=world.eval_dist)
    a = rng.integers(R, size=num_pairs)
    b = rng.integers(R - 1, size=num_pairs)
    b = b + (b >= a)
    first_wins = rng.random(num_pairs) < expit(truth.values[x, a] - truth.values[x, b])
    chosen = np.where(first_wins, a, b)
    rejected = np.where(first_wins, b, a)
    return PreferenceDataset(source_id, world, x, chosen, rejected)
