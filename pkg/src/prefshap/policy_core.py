"""Finite prompt/response worlds and exact tabular policies.

Policies are stored as per-prompt log-probability tables. Zero probability is
``-inf``; every row is normalized by log-sum-exp.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, InvalidInputError, UnknownIdentifierError

NORM_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class World:
    """Prompt and response identifiers plus the evaluation prompt distribution."""

    prompts: tuple[str, ...]
    responses: tuple[str, ...]
    eval_dist: np.ndarray
    _prompt_index: dict = field(init=False, repr=False)
    _response_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        prompts = tuple(str(p) for p in self.prompts)
        responses = tuple(str(r) for r in self.responses)
        if not prompts or not responses:
            raise InvalidInputError("prompts and responses must be non-empty")
        if len(set(prompts)) != len(prompts):
            raise InvalidInputError("duplicate prompt identifiers")
        if len(set(responses)) != len(responses):
            raise InvalidInputError("duplicate response identifiers")
        dist = np.asarray(self.eval_dist, dtype=float)
        if dist.shape != (len(prompts),):
            raise InvalidInputError(
                f"eval_dist has shape {dist.shape}, expected ({len(prompts)},)"
            )
        if not np.all(np.isfinite(dist)) or np.any(dist < 0):
            raise InvalidInputError("eval_dist entries must be finite and non-negative")
        if abs(dist.sum() - 1.0) > 1e-12:
            raise InvalidInputError(f"eval_dist sums to {dist.sum()!r}, not 1")
        object.__setattr__(self, "prompts", prompts)
        object.__setattr__(self, "responses", responses)
        object.__setattr__(self, "eval_dist", _frozen(dist))
        object.__setattr__(self, "_prompt_index", {p: i for i, p in enumerate(prompts)})
        object.__setattr__(self, "_response_index", {r: i for i, r in enumerate(responses)})

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.prompts), len(self.responses)

    def prompt_index(self, x: str) -> int:
        try:
            return self._prompt_index[x]
        except KeyError:
            raise UnknownIdentifierError(f"unknown prompt {x!r}") from None

    def response_index(self, y: str) -> int:
        try:
            return self._response_index[y]
        except KeyError:
            raise UnknownIdentifierError(f"unknown response {y!r}") from None

    def __eq__(self, other):
        if not isinstance(other, World):
            return NotImplemented
        return (
            self.prompts == other.prompts
            and self.responses == other.responses
            and np.array_equal(self.eval_dist, other.eval_dist)
        )

    def __hash__(self):
        return hash((self.prompts, self.responses, self.eval_dist.tobytes()))

    def to_dict(self) -> dict:
        return {
            "prompts": list(self.prompts),
            "responses": list(self.responses),
            "eval_dist": self.eval_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        return cls(d["prompts"], d["responses"], np.asarray(d["eval_dist"], dtype=float))

    @classmethod
    def uniform(cls, prompts: Sequence[str], responses: Sequence[str]) -> "World":
        return cls(tuple(prompts), tuple(responses), np.full(len(prompts), 1.0 / len(prompts)))


@dataclass(frozen=True, eq=False)
class Policy:
    """Normalized conditional distribution over responses for every prompt."""

    world: World
    log_probs: np.ndarray

    def __post_init__(self):
        lp = np.asarray(self.log_probs, dtype=float)
        if lp.shape != self.world.shape:
            raise InvalidInputError(f"log_probs shape {lp.shape} != world shape {self.world.shape}")
        if np.any(np.isnan(lp)) or np.any(lp == np.inf):
            raise InvalidInputError("log_probs must be finite or -inf")
        norms = logsumexp(lp, axis=1)
        if np.any(~np.isfinite(norms)) or np.max(np.abs(norms)) > NORM_TOL:
            raise InvalidInputError("policy rows are not normalized")
        object.__setattr__(self, "log_probs", _frozen(lp))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def has_full_support(self) -> bool:
        return bool(np.all(np.isfinite(self.log_probs)))

    def to_dict(self) -> dict:
        rows = [[None if v == -np.inf else float(v) for v in row] for row in self.log_probs]
        return {"log_probs": rows}

    @classmethod
    def from_dict(cls, world: World, d: dict) -> "Policy":
        lp = np.array(
            [[-np.inf if v is None else v for v in row] for row in d["log_probs"]], dtype=float
        )
        return cls(world, lp)


def normalize_log_scores(world: World, scores: np.ndarray) -> Policy:
    """Row-normalize unnormalized log-scores (``-inf`` allowed) into a Policy."""
    scores = np.asarray(scores, dtype=float)
    norms = logsumexp(scores, axis=1, keepdims=True)
    if np.any(~np.isfinite(norms)):
        raise DomainError("some prompt has no response with finite score")
    return Policy(world, scores - norms)


def softmax_policy_from_logits(world: World, logits: np.ndarray) -> Policy:
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("logits must be finite")
    return normalize_log_scores(world, logits)


def uniform_policy(world: World) -> Policy:
    return softmax_policy_from_logits(world, np.zeros(world.shape))


def log_prob(policy: Policy, x: str, y: str) -> float:
    w = policy.world
    return float(policy.log_probs[w.prompt_index(x), w.response_index(y)])


def _check_same_world(p: Policy, q: Policy):
    if p.world != q.world:
        raise InvalidInputError("policies live on different worlds")


def kl_divergence(p: Policy, q: Policy, x: str) -> float:
    """KL(p(.|x) || q(.|x)); raises DomainError if q misses part of p's support."""
    _check_same_world(p, q)
    i = p.world.prompt_index(x)
    return float(_kl_rows(p.log_probs[i : i + 1], q.log_probs[i : i + 1])[0])


def _kl_rows(lp: np.ndarray, lq: np.ndarray) -> np.ndarray:
    support = np.isfinite(lp)
    if np.any(support & ~np.isfinite(lq)):
        raise DomainError("q has zero probability where p is positive")
    diff = np.where(support, lp - np.where(support, lq, 0.0), 0.0)
    return np.sum(np.where(support, np.exp(lp) * diff, 0.0), axis=1)


def kl_rows(p: Policy, q: Policy) -> np.ndarray:
    """Per-prompt KL(p || q) as a vector."""
    _check_same_world(p, q)
    return _kl_rows(p.log_probs, q.log_probs)


def tv_distance(p: Policy, q: Policy) -> np.ndarray:
    """Per-prompt total variation distance between two policies."""
    _check_same_world(p, q)
    return 0.5 * np.abs(p.probs - q.probs).sum(axis=1)


def sample_response(policy: Policy, x: str, rng: np.random.Generator) -> str:
    i = policy.world.prompt_index(x)
    p = policy.probs[i]
    j = rng.choice(len(p), p=p / p.sum())
    return policy.world.responses[j]


def read_json(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_json(path: str | Path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def load_world(path: str | Path) -> World:
    return World.from_dict(read_json(path))


def save_world(path: str | Path, world: World) -> None:
    write_json(path, world.to_dict())


def load_policy(path: str | Path, world: World) -> Policy:
    return Policy.from_dict(world, read_json(path))


def save_policy(path: str | Path, policy: Policy) -> None:
    write_json(path, policy.to_dict())
