"""Bradley-Terry reward tables and preference datasets."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.special import expit, log_expit

from ._optim import maximize
from .errors import DomainError, InvalidInputError
from .policy_core import Policy, World, read_json, write_json

GAUGES = ("zero_mean_per_prompt", "raw")
GAUGE_TOL = 1e-9


def gauge_fix(values: np.ndarray) -> np.ndarray:
    """Subtract the per-prompt mean so that each row sums to zero."""
    values = np.asarray(values, dtype=float)
    return values - values.mean(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class RewardTable:
    world: World
    values: np.ndarray
    gauge: str = "zero_mean_per_prompt"

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.world.shape:
            raise InvalidInputError(f"reward shape {v.shape} != world shape {self.world.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("reward entries must be finite")
        if self.gauge not in GAUGES:
            raise InvalidInputError(f"unknown gauge {self.gauge!r}")
        if self.gauge == "zero_mean_per_prompt" and np.max(np.abs(v.mean(axis=1))) > GAUGE_TOL:
            raise InvalidInputError("reward is not zero-mean per prompt")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def fixed(cls, world: World, values: np.ndarray) -> "RewardTable":
        """Build a zero-mean-per-prompt table from arbitrary values."""
        return cls(world, gauge_fix(values), "zero_mean_per_prompt")

    @classmethod
    def raw(cls, world: World, values: np.ndarray) -> "RewardTable":
        return cls(world, values, "raw")

    def gauge_fixed(self) -> "RewardTable":
        if self.gauge == "zero_mean_per_prompt":
            return self
        return RewardTable.fixed(self.world, self.values)

    def to_dict(self) -> dict:
        return {"gauge": self.gauge, "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, world: World, d: dict) -> "RewardTable":
        return cls(world, np.asarray(d["values"], dtype=float), d.get("gauge", "raw"))


@dataclass(frozen=True, eq=False)
class PreferenceDataset:
    """Preference triples from one source, stored as index arrays.

    ``prompts[i]``, ``chosen[i]`` and ``rejected[i]`` are dense indices into
    the world's prompt and response lists.
    """

    source_id: str
    world: World
    prompts: np.ndarray
    chosen: np.ndarray
    rejected: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=np.int64).reshape(-1) for a in (self.prompts, self.chosen, self.rejected)]
        if len({a.size for a in arrs}) != 1:
            raise InvalidInputError("prompt/chosen/rejected arrays differ in length")
        P, R = self.world.shape
        x, yp, ym = arrs
        if x.size:
            if x.min() < 0 or x.max() >= P or min(yp.min(), ym.min()) < 0 or max(yp.max(), ym.max()) >= R:
                raise InvalidInputError("triple index out of range")
            if np.any(yp == ym):
                raise InvalidInputError("chosen and rejected responses must differ")
        for name, a in zip(("prompts", "chosen", "rejected"), arrs):
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return int(self.prompts.size)

    @classmethod
    def from_triples(
        cls, source_id: str, world: World, triples: Iterable[tuple[str, str, str]]
    ) -> "PreferenceDataset":
        xs, yps, yms = [], [], []
        for x, yp, ym in triples:
            xs.append(world.prompt_index(x))
            yps.append(world.response_index(yp))
            yms.append(world.response_index(ym))
        return cls(source_id, world, np.array(xs, dtype=np.int64), np.array(yps, dtype=np.int64),
                   np.array(yms, dtype=np.int64))

    def triples(self) -> list[tuple[str, str, str]]:
        P, R = self.world.prompts, self.world.responses
        return [(P[x], R[a], R[b]) for x, a, b in zip(self.prompts, self.chosen, self.rejected)]

    def concat(self, other: "PreferenceDataset", source_id: str | None = None) -> "PreferenceDataset":
        return PreferenceDataset(
            source_id or f"{self.source_id}+{other.source_id}",
            self.world,
            np.concatenate([self.prompts, other.prompts]),
            np.concatenate([self.chosen, other.chosen]),
            np.concatenate([self.rejected, other.rejected]),
        )


def bt_log_likelihood(reward: RewardTable, data: PreferenceDataset) -> float:
    v = reward.values
    diff = v[data.prompts, data.chosen] - v[data.prompts, data.rejected]
    return float(np.sum(log_expit(diff)))


def pref_prob(reward: RewardTable, x: str, y_plus: str, y_minus: str) -> float:
    """Probability that ``y_plus`` beats ``y_minus`` on prompt ``x``."""
    w = reward.world
    i = w.prompt_index(x)
    d = reward.values[i, w.response_index(y_plus)] - reward.values[i, w.response_index(y_minus)]
    if d >= 0:
        return float(expit(d))
    return float(1.0 - expit(-d))


@dataclass(frozen=True)
class FitOptions:
    tol: float = 1e-8
    max_iters: int = 50_000
    method: str = "newton"
    step_size: float = 0.5

    def __post_init__(self):
        if not self.tol > 0 or self.max_iters < 1 or not self.step_size > 0:
            raise InvalidInputError("tol and step_size must be > 0, max_iters >= 1")


def pair_hessian_blocks(shape: tuple[int, int], x, yp, ym, curv) -> np.ndarray:
    """Sum of curv_i * (e_yp - e_ym)(e_yp - e_ym)^T into per-prompt blocks."""
    P, R = shape
    H = np.zeros((P, R, R))
    np.add.at(H, (x, yp, yp), curv)
    np.add.at(H, (x, ym, ym), curv)
    np.add.at(H, (x, yp, ym), -curv)
    np.add.at(H, (x, ym, yp), -curv)
    return H


def fit_bt_reward(
    data: PreferenceDataset, l2: float = 1e-3, opts: FitOptions | None = None
) -> RewardTable:
    """Maximum-likelihood Bradley-Terry reward with an L2 penalty.

    Maximizes ``sum log sigmoid(r(x, y+) - r(x, y-)) - l2/2 * ||r||^2`` over
    the full (prompt, response) grid. Raises ConvergenceError when the gradient
    norm does not reach ``opts.tol``. With ``l2 == 0`` separable data has no
    maximizer and the fit runs out until the gradient falls below ``opts.tol``.
    """
    if len(data) == 0:
        raise InvalidInputError("cannot fit a reward on an empty dataset")
    if l2 < 0:
        raise InvalidInputError("l2 must be >= 0")
    opts = opts or FitOptions()
    shape = data.world.shape
    x, yp, ym = data.prompts, data.chosen, data.rejected

    def fun(r):
        return float(np.sum(log_expit(r[x, yp] - r[x, ym])) - 0.5 * l2 * np.sum(r * r))

    def grad(r):
        w = expit(-(r[x, yp] - r[x, ym]))
        g = -l2 * r
        np.add.at(g, (x, yp), w)
        np.add.at(g, (x, ym), -w)
        return g

    def hess(r):
        s = expit(r[x, yp] - r[x, ym])
        H = -pair_hessian_blocks(shape, x, yp, ym, s * (1 - s))
        H -= l2 * np.eye(shape[1])
        return H

    res = maximize(fun, grad, hess, np.zeros(shape), tol=opts.tol, max_iters=opts.max_iters,
                   method=opts.method, step_size=opts.step_size)
    return RewardTable.fixed(data.world, res.params)


def implicit_reward(policy: Policy, reference: Policy, beta: float) -> RewardTable:
    """Reward that the KL-regularized optimum ``policy`` encodes relative to ``reference``."""
    if not beta > 0:
        raise InvalidInputError("beta must be > 0")
    if policy.world != reference.world:
        raise InvalidInputError("policies live on different worlds")
    lp, l0 = policy.log_probs, reference.log_probs
    if np.any(np.isfinite(lp) & ~np.isfinite(l0)):
        raise DomainError("reference has zero probability where policy is positive")
    if np.any(~np.isfinite(lp) & np.isfinite(l0)):
        raise DomainError("policy has zero probability where reference is positive; reward is -inf")
    both = np.isfinite(lp)
    diff = np.where(both, lp - np.where(both, l0, 0.0), 0.0)
    return RewardTable.fixed(policy.world, beta * diff)


# -- file formats ---------------------------------------------------------------

def load_dataset(path: str | Path, world: World, source_id: str | None = None) -> PreferenceDataset:
    path = Path(path)
    triples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                triples.append((rec["prompt"], rec["chosen"], rec["rejected"]))
    return PreferenceDataset.from_triples(source_id or path.stem, world, triples)


def save_dataset(path: str | Path, data: PreferenceDataset) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for x, yp, ym in data.triples():
            fh.write(json.dumps({"prompt": x, "chosen": yp, "rejected": ym}) + "\n")


def load_reward(path: str | Path, world: World) -> RewardTable:
    return RewardTable.from_dict(world, read_json(path))


def save_reward(path: str | Path, reward: RewardTable) -> None:
    write_json(path, reward.to_dict())
