"""KL-regularized alignment: closed forms, DPO and sequential DPO."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from ._optim import maximize
from .errors import ConvergenceError, DomainError, InvalidInputError
from .policy_core import Policy, normalize_log_scores
from .reward import PreferenceDataset, RewardTable, pair_hessian_blocks


@dataclass(frozen=True)
class AlignmentConfig:
    beta: float = 0.1
    step_size: float = 0.5
    max_iters: int = 50_000
    tol: float = 1e-8
    l2: float = 1e-3
    method: str = "newton"

    def __post_init__(self):
        if not self.beta > 0:
            raise InvalidInputError("beta must be > 0")
        if not self.tol > 0 or not self.step_size > 0:
            raise InvalidInputError("tol and step_size must be > 0")
        if self.max_iters < 1:
            raise InvalidInputError("max_iters must be >= 1")
        if self.l2 < 0:
            raise InvalidInputError("l2 must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AlignmentConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _check_beta(beta: float):
    if not beta > 0:
        raise InvalidInputError("beta must be > 0")


def exact_aligned_policy(reference: Policy, reward: RewardTable, beta: float) -> Policy:
    """Maximizer of E[r] - beta * KL(. || reference), prompt by prompt."""
    _check_beta(beta)
    return normalize_log_scores(reference.world, reward.values / beta + reference.log_probs)


def exact_coalition_policy(
    reference: Policy, rewards: Sequence[RewardTable], beta: float
) -> Policy:
    """Closed-form policy aligned to the sum of ``rewards``.

    Entries are summed in sorted order so that any permutation of ``rewards``
    gives a bitwise-identical result.
    """
    _check_beta(beta)
    if not rewards:
        return reference
    stacked = np.sort(np.stack([r.values for r in rewards]), axis=0)
    total = np.zeros(reference.world.shape)
    for layer in stacked:
        total = total + layer
    return normalize_log_scores(reference.world, total / beta + reference.log_probs)


def _log_ratio_margins(policy_lp, ref_lp, data: PreferenceDataset) -> np.ndarray:
    x, yp, ym = data.prompts, data.chosen, data.rejected
    rp, rm = policy_lp[x, yp] - ref_lp[x, yp], policy_lp[x, ym] - ref_lp[x, ym]
    return rp - rm


def _check_data_support(policy_lp, ref_lp, data: PreferenceDataset):
    x = data.prompts
    for lp in (policy_lp, ref_lp):
        if not (np.all(np.isfinite(lp[x, data.chosen])) and np.all(np.isfinite(lp[x, data.rejected]))):
            raise DomainError("policy or reference has zero probability on a data item")


def dpo_objective(policy: Policy, reference: Policy, data: PreferenceDataset, beta: float) -> float:
    _check_beta(beta)
    _check_data_support(policy.log_probs, reference.log_probs, data)
    z = beta * _log_ratio_margins(policy.log_probs, reference.log_probs, data)
    return float(np.sum(log_expit(z)))


def dpo_objective_and_grad(
    logits: np.ndarray, reference: Policy, data: PreferenceDataset, beta: float
) -> tuple[float, np.ndarray]:
    """DPO objective of ``softmax(logits)`` and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=float)
    lp = logits - logsumexp(logits, axis=1, keepdims=True)
    _check_data_support(lp, reference.log_probs, data)
    z = beta * _log_ratio_margins(lp, reference.log_probs, data)
    value = float(np.sum(log_expit(z)))
    # d log pi(y|x) / d logits[x] = e_y - pi(.|x); the pi terms of y+ and y- cancel
    w = beta * expit(-z)
    x, yp, ym = data.prompts, data.chosen, data.rejected
    g = np.zeros_like(logits)
    np.add.at(g, (x, yp), w)
    np.add.at(g, (x, ym), -w)
    return value, g


@dataclass(frozen=True)
class DPOFit:
    policy: Policy
    iterations: int
    grad_norm: float
    objective: float


def dpo_fit_detailed(
    reference: Policy, data: PreferenceDataset, config: AlignmentConfig
) -> DPOFit:
    """Run DPO over unconstrained per-(prompt, response) logits.

    The penalty ``l2/2 * ||implicit reward||^2`` uses the gauge-fixed implicit
    reward ``beta * (log pi - log pi_ref)``, which matches the penalty of the
    reward fit.
    """
    if len(data) == 0:
        raise InvalidInputError("cannot run DPO on an empty dataset")
    if not reference.has_full_support():
        raise DomainError("DPO requires a full-support reference policy")
    if data.world != reference.world:
        raise InvalidInputError("dataset and reference live on different worlds")
    beta, l2 = config.beta, config.l2
    ref_lp = reference.log_probs
    x, yp, ym = data.prompts, data.chosen, data.rejected
    shape = reference.world.shape

    def centered(theta):
        d = theta - ref_lp
        return d - d.mean(axis=1, keepdims=True)

    def fun(theta):
        value, _ = dpo_objective_and_grad(theta, reference, data, beta)
        c = centered(theta)
        return value - 0.5 * l2 * beta**2 * float(np.sum(c * c))

    def grad(theta):
        _, g = dpo_objective_and_grad(theta, reference, data, beta)
        return g - l2 * beta**2 * centered(theta)

    R = shape[1]
    centering = np.eye(R) - np.full((R, R), 1.0 / R)

    def hess(theta):
        z = beta * ((theta[x, yp] - theta[x, ym]) - (ref_lp[x, yp] - ref_lp[x, ym]))
        s = expit(z)
        H = -pair_hessian_blocks(shape, x, yp, ym, beta**2 * s * (1 - s))
        return H - l2 * beta**2 * centering

    res = maximize(fun, grad, hess, np.array(ref_lp), tol=config.tol,
                   max_iters=config.max_iters, method=config.method,
                   step_size=config.step_size)
    policy = normalize_log_scores(reference.world, res.params)
    return DPOFit(policy, res.iterations, res.grad_norm, res.value)


def dpo_fit(reference: Policy, data: PreferenceDataset, config: AlignmentConfig) -> Policy:
    return dpo_fit_detailed(reference, data, config).policy


def sequential_dpo(
    reference: Policy, datasets: Sequence[PreferenceDataset], config: AlignmentConfig
) -> Policy:
    """Chain DPO fits, each using the previous output as its reference.

    Returns the policy after every dataset has been processed; a single
    dataset reduces to :func:`dpo_fit`.
    """
    policy = reference
    for k, data in enumerate(datasets):
        try:
            policy = dpo_fit(policy, data, config)
        except ConvergenceError as exc:
            raise exc.at_step(k) from exc
    return policy
