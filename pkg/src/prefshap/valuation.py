"""Coalition utilities and Shapley value estimators.

Estimators take the number of players ``n`` and a utility oracle mapping a
``frozenset`` of player indices to a vector of utilities, one per evaluation
reward. Player ``i`` corresponds to the i-th source in sorted id order.
"""

from __future__ import annotations

import csv
import io
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .arithmetic import CoalitionModelProvider, canonical_coalition, coalition_model
from .errors import InvalidInputError, OracleError, RankDeficiencyError
from .policy_core import Policy, World, read_json, write_json
from .reward import RewardTable

Oracle = Callable[[frozenset], np.ndarray]
ESTIMATORS = ("exact", "mc_permutation", "regression")


def policy_value(
    policy: Policy,
    world: World,
    reward: RewardTable,
    mode: str = "exact",
    *,
    m: int | None = None,
    seed: int | None = None,
) -> float:
    """Expected reward of ``policy`` under the evaluation prompt distribution.

    ``mode="sampled"`` averages the reward of one sampled response for each of
    ``m`` prompts drawn from ``world.eval_dist``.
    """
    if policy.world != world or reward.world != world:
        raise InvalidInputError("policy, reward and world do not match")
    if mode == "exact":
        per_prompt = np.sum(policy.probs * reward.values, axis=1)
        return float(world.eval_dist @ per_prompt)
    if mode != "sampled":
        raise InvalidInputError(f"unknown policy_value mode {mode!r}")
    if m is None or m < 1:
        raise InvalidInputError("sampled mode needs m >= 1")
    rng = np.random.default_rng(seed)
    xs = rng.choice(len(world.prompts), size=m, p=world.eval_dist)
    cdf = np.cumsum(policy.probs, axis=1)
    u = rng.random(m)
    ys = np.minimum((u[:, None] >= cdf[xs] / cdf[xs, -1:]).sum(axis=1), cdf.shape[1] - 1)
    return float(np.mean(reward.values[xs, ys]))


class UtilityCache:
    """Coalition-keyed utility vectors with at-most-once evaluation per key.

    Safe to share between threads: concurrent requests for the same key wait
    for the first evaluation instead of repeating it.
    """

    def __init__(self):
        self._entries: dict[tuple[str, ...], np.ndarray] = {}
        self._pending: dict[tuple[str, ...], threading.Event] = {}
        self._lock = threading.Lock()
        self.oracle_calls = 0

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return tuple(key) in self._entries

    def get_or_compute(self, key: tuple[str, ...], compute: Callable[[], np.ndarray]) -> np.ndarray:
        while True:
            with self._lock:
                if key in self._entries:
                    return self._entries[key]
                event = self._pending.get(key)
                if event is None:
                    event = self._pending[key] = threading.Event()
                    self.oracle_calls += 1
                    owner = True
                else:
                    owner = False
            if not owner:
                event.wait()
                continue
            try:
                value = np.array(compute(), dtype=float).reshape(-1)
                value.flags.writeable = False
                with self._lock:
                    self._entries[key] = value
            finally:
                with self._lock:
                    del self._pending[key]
                event.set()
            return value

    def items(self):
        return sorted(self._entries.items())

    def to_dict(self) -> dict:
        return {
            "oracle_calls": self.oracle_calls,
            "entries": {coalition_key(k): v.tolist() for k, v in self.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UtilityCache":
        cache = cls()
        for k, v in d["entries"].items():
            arr = np.asarray(v, dtype=float)
            arr.flags.writeable = False
            cache._entries[tuple(k.split("+")) if k else ()] = arr
        return cache

    def save(self, path: str | Path):
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "UtilityCache":
        return cls.from_dict(read_json(path))


def coalition_key(members: Iterable[str]) -> str:
    return "+".join(sorted(members))


def coalition_utility(
    cache: UtilityCache,
    provider: CoalitionModelProvider,
    coalition: Iterable[str],
    world: World,
    rewards: Sequence[RewardTable],
) -> np.ndarray:
    key = canonical_coalition(provider, coalition)

    def compute():
        pol = coalition_model(provider, key)
        return [policy_value(pol, world, r) for r in rewards]

    return cache.get_or_compute(key, compute)


def make_oracle(
    cache: UtilityCache,
    provider: CoalitionModelProvider,
    world: World,
    rewards: Sequence[RewardTable],
) -> Oracle:
    """Index-based oracle over the provider's sources (sorted id order)."""
    ids = provider.source_ids

    def oracle(players: frozenset) -> np.ndarray:
        return coalition_utility(cache, provider, [ids[i] for i in players], world, rewards)

    return oracle


@dataclass
class ShapleyResult:
    values: np.ndarray
    estimator: str
    stderr: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)
    sources: tuple[str, ...] | None = None
    rewards: tuple[str, ...] | None = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float).T).T
        if self.estimator not in ESTIMATORS:
            raise InvalidInputError(f"unknown estimator {self.estimator!r}")
        if (self.stderr is not None) != (self.estimator == "mc_permutation"):
            raise InvalidInputError("stderr is present exactly for mc_permutation results")
        n, k = self.values.shape
        if self.sources is None:
            self.sources = tuple(f"s{i}" for i in range(n))
        if self.rewards is None:
            self.rewards = tuple(f"r{j}" for j in range(k))
        if len(self.sources) != n or len(self.rewards) != k:
            raise InvalidInputError("source/reward names do not match the value matrix")

    def to_dict(self) -> dict:
        def clean(a):
            return [[None if not np.isfinite(v) else float(v) for v in row] for row in a]

        return {
            "estimator": self.estimator,
            "seed": self.metadata.get("seed"),
            "sources": list(self.sources),
            "rewards": list(self.rewards),
            "values": clean(self.values),
            "stderr": None if self.stderr is None else clean(self.stderr),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShapleyResult":
        def arr(a):
            return np.array([[np.nan if v is None else v for v in row] for row in a], dtype=float)

        return cls(
            arr(d["values"]),
            d["estimator"],
            None if d.get("stderr") is None else arr(d["stderr"]),
            dict(d.get("metadata") or {}, seed=d.get("seed")),
            tuple(d["sources"]),
            tuple(d["rewards"]),
        )


def _query(oracle: Oracle, players: frozenset) -> np.ndarray:
    try:
        return np.atleast_1d(np.asarray(oracle(players), dtype=float))
    except OracleError:
        raise
    except Exception as exc:
        raise OracleError(players, exc) from exc


def _evaluate_masks(oracle: Oracle, n: int, masks: Iterable[int], jobs: int = 1) -> dict[int, np.ndarray]:
    masks = sorted(set(int(m) for m in masks))
    sets = [frozenset(i for i in range(n) if m >> i & 1) for m in masks]
    if jobs > 1 and len(sets) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            vals = list(pool.map(lambda s: _query(oracle, s), sets))
    else:
        vals = [_query(oracle, s) for s in sets]
    return dict(zip(masks, vals))


def _check_n(n: int):
    if n < 1:
        raise InvalidInputError("need at least one player")


def exact_shapley(n: int, utility: Oracle, *, jobs: int = 1) -> ShapleyResult:
    """Shapley values by enumerating all 2**n coalitions."""
    _check_n(n)
    table = _evaluate_masks(utility, n, range(1 << n), jobs)
    u = np.stack([table[m] for m in range(1 << n)])
    sizes = np.array([bin(m).count("1") for m in range(1 << n)])
    weights = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n)
                        if s < n else 0.0 for s in sizes])
    phi = np.zeros((n, u.shape[1]))
    for i in range(n):
        bit = 1 << i
        without = np.array([m for m in range(1 << n) if not m & bit])
        phi[i] = np.sum(weights[without, None] * (u[without | bit] - u[without]), axis=0)
    return ShapleyResult(phi, "exact", metadata={"coalitions": 1 << n})


def mc_permutation_shapley(
    n: int,
    utility: Oracle,
    num_perms: int,
    seed: int | None = None,
    *,
    antithetic: bool = False,
    jobs: int = 1,
) -> ShapleyResult:
    """Average marginal contributions along random permutations.

    With ``antithetic=True`` permutations come in (order, reversed order)
    pairs and the standard error is computed over pair means; for ``n == 2``
    and ``num_perms == 2`` this enumerates both orders and is exact.
    """
    _check_n(n)
    if num_perms < 1:
        raise InvalidInputError("num_perms must be >= 1")
    if antithetic and num_perms % 2:
        raise InvalidInputError("antithetic sampling needs an even num_perms")
    rng = np.random.default_rng(seed)
    base = num_perms // 2 if antithetic else num_perms
    perms = rng.permuted(np.tile(np.arange(n), (base, 1)), axis=1)
    if antithetic:
        perms = np.concatenate([perms, perms[:, ::-1]])
    bits = 1 << perms
    after = np.cumsum(bits, axis=1)
    before = after - bits
    table = _evaluate_masks(utility, n, np.unique(np.concatenate([after.ravel(), before.ravel()])), jobs)
    k = next(iter(table.values())).size
    keys = np.array(sorted(table))
    vals = np.stack([table[m] for m in keys])
    lookup = lambda masks: vals[np.searchsorted(keys, masks)]
    marg = lookup(after) - lookup(before)  # (perms, position, k)
    contrib = np.zeros((perms.shape[0], n, k))
    np.put_along_axis(contrib, perms[:, :, None], marg, axis=1)
    samples = 0.5 * (contrib[:base] + contrib[base:]) if antithetic else contrib
    values = samples.mean(axis=0)
    m = samples.shape[0]
    if m > 1:
        stderr = samples.std(axis=0, ddof=1) / math.sqrt(m)
    else:
        stderr = np.full_like(values, np.nan)
    meta = {"num_perms": num_perms, "seed": seed, "antithetic": antithetic,
            "coalitions": len(table)}
    return ShapleyResult(values, "mc_permutation", stderr, meta)


def shapley_kernel_weight(n: int, size: int) -> float:
    return (n - 1) / (math.comb(n, size) * size * (n - size))


def regression_shapley(
    n: int, utility: Oracle, num_samples: int | str = "full", seed: int | None = None, *, jobs: int = 1
) -> ShapleyResult:
    """Kernel-weighted least-squares Shapley values.

    Fits ``u(S) ~ u(empty) + sum_{i in S} phi_i`` with Shapley-kernel weights,
    subject to ``sum_i phi_i = u(all) - u(empty)``. ``num_samples="full"``
    uses every proper non-empty coalition and reproduces the exact values;
    an integer draws that many coalitions from the kernel distribution.
    """
    _check_n(n)
    full_mask = (1 << n) - 1
    if num_samples == "full":
        masks = [m for m in range(1, full_mask)]
        weights = np.array([shapley_kernel_weight(n, bin(m).count("1")) for m in masks])
    else:
        num_samples = int(num_samples)
        if num_samples < 1:
            raise InvalidInputError("num_samples must be >= 1 or 'full'")
        rng = np.random.default_rng(seed)
        sizes = np.arange(1, n)
        masks = []
        if n > 1:
            p = np.array([(n - 1) / (s * (n - s)) for s in sizes])
            drawn = rng.choice(sizes, size=num_samples, p=p / p.sum())
            for s in drawn:
                members = rng.choice(n, size=s, replace=False)
                masks.append(int(np.sum(1 << members)))
        weights = np.ones(len(masks))
    table = _evaluate_masks(utility, n, set(masks) | {0, full_mask}, jobs)
    u0, u_all = table[0], table[full_mask]
    A = np.array([[m >> i & 1 for i in range(n)] for m in masks], dtype=float).reshape(-1, n)
    b = np.stack([table[m] for m in masks]) - u0 if masks else np.zeros((0, u0.size))
    # KKT system of the equality-constrained weighted least squares
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = 2 * A.T @ (weights[:, None] * A)
    kkt[:n, n] = kkt[n, :n] = 1.0
    if np.linalg.matrix_rank(kkt) < n + 1:
        raise RankDeficiencyError(
            f"{len(set(masks))} distinct coalitions do not determine {n} Shapley values"
        )
    rhs = np.zeros((n + 1, u0.size))
    rhs[:n] = 2 * A.T @ (weights[:, None] * b)
    rhs[n] = u_all - u0
    sol = np.linalg.solve(kkt, rhs)
    meta = {"num_samples": num_samples, "seed": seed, "coalitions": len(table)}
    return ShapleyResult(sol[:n], "regression", metadata=meta)


@dataclass(frozen=True)
class SpatialSignature:
    """Each source's coordinates in multi-reward Shapley-value space."""

    sources: tuple[str, ...]
    rewards: tuple[str, ...]
    coords: np.ndarray

    @property
    def rows(self) -> list[tuple]:
        return [(s, *map(float, c)) for s, c in zip(self.sources, self.coords)]

    def diagonal_gap(self) -> np.ndarray:
        """Signed distance of each point from the y = x agreement diagonal (first two rewards)."""
        if self.coords.shape[1] < 2:
            raise InvalidInputError("the agreement diagonal needs two reward dimensions")
        return (self.coords[:, 1] - self.coords[:, 0]) / math.sqrt(2)

    def on_diagonal(self, tol: float = 1e-12) -> np.ndarray:
        return np.abs(self.diagonal_gap()) <= tol

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", *self.rewards])
        for s, c in zip(self.sources, self.coords):
            w.writerow([s, *(repr(float(v)) for v in c)])
        return buf.getvalue()


def spatial_signature(result: ShapleyResult, reward_names: Sequence[str] | None = None) -> SpatialSignature:
    names = tuple(reward_names) if reward_names is not None else tuple(result.rewards)
    if len(names) != result.values.shape[1]:
        raise InvalidInputError(
            f"{len(names)} reward names for {result.values.shape[1]} value dimensions"
        )
    return SpatialSignature(tuple(result.sources), names, np.array(result.values))


def read_signature_csv(path: str | Path) -> SpatialSignature:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return SpatialSignature(
        tuple(r[0] for r in body), tuple(header[1:]),
        np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), len(header) - 1),
    )
