"""Training-free coalition policies by log-probability arithmetic.

Given a reference policy and one aligned policy per source, the policy aligned
on a coalition S has scores

    sum_{l in S} log pi_l(y|x) + (1 - |S|) log pi_ref(y|x)

up to per-prompt constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .alignment import exact_coalition_policy
from .errors import DegenerateSupportError, DomainError, InvalidInputError, UnknownIdentifierError
from .policy_core import Policy, normalize_log_scores
from .reward import RewardTable

MODES = ("composed", "exact_oracle")


@dataclass(frozen=True, eq=False)
class CoalitionModelProvider:
    reference: Policy
    policies: Mapping[str, Policy]
    mode: str = "composed"
    rewards: Mapping[str, RewardTable] | None = None
    beta: float | None = None
    source_ids: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"unknown provider mode {self.mode!r}")
        if not self.reference.has_full_support():
            raise DomainError("reference policy must have full support")
        world = self.reference.world
        for sid, pol in self.policies.items():
            if pol.world != world:
                raise InvalidInputError(f"policy of source {sid!r} lives on a different world")
        if self.mode == "exact_oracle":
            if self.rewards is None or self.beta is None:
                raise InvalidInputError("exact_oracle mode needs per-source rewards and beta")
            if set(self.rewards) != set(self.policies):
                raise InvalidInputError("reward map and policy map cover different sources")
        object.__setattr__(self, "policies", dict(self.policies))
        if self.rewards is not None:
            object.__setattr__(self, "rewards", dict(self.rewards))
        object.__setattr__(self, "source_ids", tuple(sorted(self.policies)))

    def with_mode(self, mode: str) -> "CoalitionModelProvider":
        return CoalitionModelProvider(self.reference, self.policies, mode, self.rewards, self.beta)


def canonical_coalition(provider: CoalitionModelProvider, coalition: Iterable[str]) -> tuple[str, ...]:
    """Sorted tuple of member ids; rejects duplicates and unknown sources."""
    members = list(coalition)
    if len(set(members)) != len(members):
        raise InvalidInputError(f"coalition {members} lists a source more than once")
    for sid in members:
        if sid not in provider.policies:
            raise UnknownIdentifierError(f"unknown source {sid!r}")
    return tuple(sorted(members))


def coalition_scores(provider: CoalitionModelProvider, coalition: Iterable[str]) -> np.ndarray:
    """Unnormalized log-scores of the composed coalition policy."""
    members = canonical_coalition(provider, coalition)
    s0 = provider.reference.log_probs
    total = np.zeros_like(s0)
    for sid in members:
        total = total + provider.policies[sid].log_probs
    coef = 1 - len(members)
    # reference has full support, so coef * s0 is finite even when coef == 0
    return total + coef * s0


def compose_coalition(provider: CoalitionModelProvider, coalition: Iterable[str]) -> Policy:
    scores = coalition_scores(provider, coalition)
    if np.any(np.all(scores == -np.inf, axis=1)):
        raise DegenerateSupportError("coalition members share no response with positive probability")
    return normalize_log_scores(provider.reference.world, scores)


def coalition_model(provider: CoalitionModelProvider, coalition: Iterable[str]) -> Policy:
    """Coalition policy under the provider's mode."""
    if provider.mode == "composed":
        return compose_coalition(provider, coalition)
    members = canonical_coalition(provider, coalition)
    return exact_coalition_policy(
        provider.reference, [provider.rewards[sid] for sid in members], provider.beta
    )
