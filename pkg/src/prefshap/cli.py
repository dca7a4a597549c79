"""Command-line pipeline: gen -> fit -> shapley -> signature, plus verify.

Every command is a pure function of its input files, flags and seed. Results
go to flat JSON/CSV files in the run directory named by the manifest.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import AlignmentConfig, dpo_fit, dpo_fit_detailed, exact_aligned_policy, exact_coalition_policy, sequential_dpo
from .arithmetic import CoalitionModelProvider, compose_coalition
from .errors import ConvergenceError, InvalidInputError, PrefShapError, UnknownIdentifierError
from .policy_core import Policy, World, load_policy, load_world, read_json, save_policy, save_world, tv_distance, write_json
from .reward import PreferenceDataset, RewardTable, implicit_reward, load_dataset, load_reward, save_dataset, save_reward
from .synthgen import WorldSpec, generate_preferences, make_random_world, source_seed
from .valuation import (
    UtilityCache,
    ShapleyResult,
    exact_shapley,
    make_oracle,
    mc_permutation_shapley,
    regression_shapley,
    spatial_signature,
)

log = logging.getLogger("prefshap")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3
EXIT_VERIFICATION = 4

EXACT_GAP_TOL = 1e-9

EPILOG = """\
exit codes:
  0  success
  1  I/O or unexpected error
  2  validation error (bad arguments, manifest, or missing inputs)
  3  convergence failure in at least one fit
  4  verification failure (composition gap above 1e-9 on exact inputs)
"""


@dataclass
class RunManifest:
    """Paths (relative to the manifest's directory) and settings of a run."""

    world: str
    reference: str
    sources: list[dict]
    eval_rewards: list[dict]
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    estimator: dict = field(default_factory=lambda: {"name": "exact"})
    output_dir: str = "."
    seed: int = 0
    spec: dict | None = None
    root: Path = field(default=Path("."), repr=False, compare=False)

    def path(self, rel: str) -> Path:
        return self.root / rel

    @property
    def out(self) -> Path:
        return self.root / self.output_dir

    @property
    def source_ids(self) -> list[str]:
        return [s["id"] for s in self.sources]

    def to_dict(self) -> dict:
        d = {
            "world": self.world,
            "reference": self.reference,
            "sources": self.sources,
            "eval_rewards": self.eval_rewards,
            "alignment": self.alignment.to_dict(),
            "estimator": self.estimator,
            "output_dir": self.output_dir,
            "seed": self.seed,
        }
        if self.spec is not None:
            d["spec"] = self.spec
        return d

    @classmethod
    def from_dict(cls, d: dict, root: Path = Path(".")) -> "RunManifest":
        try:
            return cls(
                world=d["world"],
                reference=d["reference"],
                sources=list(d["sources"]),
                eval_rewards=list(d["eval_rewards"]),
                alignment=AlignmentConfig.from_dict(d.get("alignment", {})),
                estimator=dict(d.get("estimator", {"name": "exact"})),
                output_dir=d.get("output_dir", "."),
                seed=int(d.get("seed", 0)),
                spec=d.get("spec"),
                root=root,
            )
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"malformed manifest: {exc!r}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        path = Path(path)
        if not path.exists():
            raise InvalidInputError(f"manifest {path} does not exist")
        m = cls.from_dict(read_json(path), root=path.parent)
        m.validate()
        return m

    def save(self, path: str | Path):
        write_json(path, self.to_dict())

    def validate(self):
        refs = [self.world, self.reference]
        refs += [s["dataset"] for s in self.sources]
        refs += [e["path"] for e in self.eval_rewards]
        missing = [r for r in refs if not self.path(r).exists()]
        if missing:
            raise InvalidInputError(f"manifest references missing files: {missing}")
        ids = self.source_ids
        if len(set(ids)) != len(ids):
            raise InvalidInputError("duplicate source ids in manifest")

    # loaders
    def load_world(self) -> World:
        return load_world(self.path(self.world))

    def load_inputs(self):
        world = self.load_world()
        reference = load_policy(self.path(self.reference), world)
        datasets = {s["id"]: load_dataset(self.path(s["dataset"]), world, s["id"]) for s in self.sources}
        evals = {e["name"]: load_reward(self.path(e["path"]), world) for e in self.eval_rewards}
        return world, reference, datasets, evals

    def load_truths(self, world: World) -> dict[str, RewardTable]:
        missing = [s["id"] for s in self.sources if not s.get("truth") or not self.path(s["truth"]).exists()]
        if missing:
            raise InvalidInputError(f"no ground-truth reward for sources {missing}")
        return {s["id"]: load_reward(self.path(s["truth"]), world) for s in self.sources}

    def policy_path(self, sid: str) -> Path:
        return self.out / "policies" / f"{sid}.json"

    def diag_path(self, sid: str) -> Path:
        return self.out / "policies" / f"{sid}.diag.json"


# -- gen -------------------------------------------------------------------------

def cmd_gen(args) -> int:
    if args.responses < 2:
        raise InvalidInputError("--responses must be >= 2 to form preference pairs")
    spec = WorldSpec(
        num_prompts=args.prompts, num_responses=args.responses, num_sources=args.sources,
        reward_scale=args.reward_scale, pairs_per_source=args.pairs, seed=args.seed,
        num_eval_rewards=args.eval_rewards,
    )
    out = Path(args.out)
    manifest_path = Path(args.manifest) if args.manifest else out / "manifest.json"
    synth = make_random_world(spec)
    sources = []
    for i, (sid, truth) in enumerate(synth.truths.items()):
        seed = source_seed(spec.seed, i)
        data = generate_preferences(truth, synth.world, spec.pairs_per_source, seed, source_id=sid)
        save_dataset(out / "data" / f"{sid}.jsonl", data)
        save_reward(out / "truth" / f"{sid}.json", truth)
        sources.append({"id": sid, "dataset": f"data/{sid}.jsonl", "truth": f"truth/{sid}.json", "seed": seed})
    save_world(out / "world.json", synth.world)
    save_policy(out / "reference.json", synth.reference)
    evals = []
    for name, r in synth.eval_rewards.items():
        save_reward(out / "eval" / f"{name}.json", r)
        evals.append({"name": name, "path": f"eval/{name}.json"})
    root = manifest_path.parent
    rel = lambda p: os.path.relpath(out / p, root)
    manifest = RunManifest(
        world=rel("world.json"),
        reference=rel("reference.json"),
        sources=[dict(s, dataset=rel(s["dataset"]), truth=rel(s["truth"])) for s in sources],
        eval_rewards=[dict(e, path=rel(e["path"])) for e in evals],
        alignment=AlignmentConfig(beta=args.beta),
        estimator={"name": "exact", "perms": 500, "samples": "full", "seed": spec.seed},
        output_dir=os.path.relpath(out, root),
        seed=spec.seed,
        spec=spec.to_dict(),
        root=root,
    )
    manifest.save(manifest_path)
    print(f"wrote {len(sources)} sources, {len(evals)} evaluation rewards; manifest {manifest_path}")
    return EXIT_OK


# -- fit -------------------------------------------------------------------------

def _fit_one(reference: Policy, data: PreferenceDataset, config: AlignmentConfig) -> dict:
    try:
        res = dpo_fit_detailed(reference, data, config)
    except ConvergenceError as exc:
        return {"status": "failed", "error": str(exc), "grad_norm": exc.grad_norm,
                "iterations": exc.iterations}
    return {"status": "fitted", "policy": res.policy.to_dict(), "grad_norm": res.grad_norm,
            "iterations": res.iterations, "objective": res.objective}


def cmd_fit(args) -> int:
    manifest = RunManifest.load(args.manifest)
    world, reference, datasets, _ = manifest.load_inputs()
    config = manifest.alignment
    todo, diags = [], {}
    for sid, data in datasets.items():
        if manifest.policy_path(sid).exists() and not args.force:
            diags[sid] = {"status": "cached"}
        elif len(data) == 0:
            diags[sid] = {"status": "dummy", "policy": reference.to_dict()}
        else:
            todo.append(sid)
    if args.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=min(args.jobs, len(todo))) as pool:
            futures = {sid: pool.submit(_fit_one, reference, datasets[sid], config) for sid in todo}
            results = {sid: f.result() for sid, f in futures.items()}
    else:
        results = {sid: _fit_one(reference, datasets[sid], config) for sid in todo}
    diags.update(results)

    failed = []
    for sid in manifest.source_ids:
        d = diags[sid]
        if "policy" in d:
            write_json(manifest.policy_path(sid), d.pop("policy"))
        if d["status"] == "failed":
            failed.append(sid)
        if d["status"] != "cached":
            write_json(manifest.diag_path(sid), dict(d, source=sid))
        print(f"{sid}: {d['status']}" + (f" ({d.get('iterations')} iterations, grad norm {d['grad_norm']:.2e})"
                                          if "grad_norm" in d else ""))
    summary = {"optimizations": len(todo), "sources": {sid: diags[sid]["status"] for sid in manifest.source_ids}}
    write_json(manifest.out / "fit_summary.json", summary)
    print(f"{len(todo)} DPO optimizations for {len(datasets)} sources")
    if failed:
        print(f"convergence failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


# -- shapley / signature -----------------------------------------------------------

def load_provider(manifest: RunManifest, world: World, reference: Policy,
                  mode: str = "composed") -> CoalitionModelProvider:
    missing = [sid for sid in manifest.source_ids if not manifest.policy_path(sid).exists()]
    if missing:
        raise InvalidInputError(
            f"no fitted policies for sources {missing}; run `prefshap fit --manifest ...` first"
        )
    policies = {sid: load_policy(manifest.policy_path(sid), world) for sid in manifest.source_ids}
    return CoalitionModelProvider(reference, policies, mode)


def run_estimator(name: str, n: int, oracle, *, perms: int, samples, seed, jobs: int = 1) -> ShapleyResult:
    if name == "exact":
        return exact_shapley(n, oracle, jobs=jobs)
    if name in ("mc", "mc_permutation"):
        return mc_permutation_shapley(n, oracle, perms, seed, jobs=jobs)
    if name == "regression":
        return regression_shapley(n, oracle, samples, seed, jobs=jobs)
    raise InvalidInputError(f"unknown estimator {name!r}")


def cmd_shapley(args) -> int:
    manifest = RunManifest.load(args.manifest)
    world, reference, _, evals = manifest.load_inputs()
    provider = load_provider(manifest, world, reference)
    est = dict(manifest.estimator)
    name = args.estimator or est.get("name", "exact")
    perms = args.perms if args.perms is not None else int(est.get("perms", 500))
    samples = args.samples if args.samples is not None else est.get("samples", "full")
    if samples != "full":
        samples = int(samples)
    seed = args.seed if args.seed is not None else est.get("seed", manifest.seed)

    cache = UtilityCache()
    reward_names = list(evals)
    oracle = make_oracle(cache, provider, world, [evals[k] for k in reward_names])
    result = run_estimator(name, len(provider.source_ids), oracle, perms=perms, samples=samples,
                           seed=seed, jobs=args.jobs)
    result.sources = provider.source_ids
    result.rewards = tuple(reward_names)
    result.metadata.update(seed=seed, oracle_calls=cache.oracle_calls, cache_entries=len(cache))
    out = manifest.out
    write_json(out / "shapley.json", result.to_dict())
    cache.save(out / "utility_cache.json")
    sig = spatial_signature(result, reward_names)
    (out / "signature.csv").write_text(sig.to_csv(), encoding="utf-8")
    print(f"estimator {result.estimator}: {cache.oracle_calls} utility-oracle calls "
          f"({len(cache)} cached coalitions) for {len(reward_names)} evaluation rewards")
    print(sig.to_csv(), end="")
    return EXIT_OK


def cmd_signature(args) -> int:
    manifest = RunManifest.load(args.manifest)
    path = manifest.out / "shapley.json"
    if not path.exists():
        raise InvalidInputError(f"{path} not found; run `prefshap shapley` first")
    result = ShapleyResult.from_dict(read_json(path))
    sig = spatial_signature(result)
    (manifest.out / "signature.csv").write_text(sig.to_csv(), encoding="utf-8")
    print(sig.to_csv(), end="")
    negative = [(s, r) for s, row in zip(sig.sources, sig.coords) for r, v in zip(sig.rewards, row) if v < 0]
    if negative:
        print("negative values: " + ", ".join(f"{s}/{r}" for s, r in negative))
    if len(sig.rewards) >= 2:
        gaps = sig.diagonal_gap()
        print("distance from y=x: " + ", ".join(f"{s}={g:+.4g}" for s, g in zip(sig.sources, gaps)))
    return EXIT_OK


# -- verify ------------------------------------------------------------------------

def all_coalitions(ids):
    for k in range(len(ids) + 1):
        yield from itertools.combinations(ids, k)


def max_logprob_gap(p: Policy, q: Policy) -> float:
    a, b = p.log_probs, q.log_probs
    both_inf = np.isneginf(a) & np.isneginf(b)
    diff = np.where(both_inf, 0.0, np.abs(a - b))
    return float(np.max(diff)) if diff.size else 0.0


def cmd_verify(args) -> int:
    manifest = RunManifest.load(args.manifest)
    world, reference, datasets, _ = manifest.load_inputs()
    truths = manifest.load_truths(world)
    provider = load_provider(manifest, world, reference)
    beta = manifest.alignment.beta
    ids = provider.source_ids

    # (a) composition vs the closed form, on exact per-source inputs and on the fitted policies
    exact_provider = CoalitionModelProvider(
        reference, {sid: exact_aligned_policy(reference, truths[sid], beta) for sid in ids}
    )
    exact_gap, fitted_tv = 0.0, 0.0
    for coal in all_coalitions(ids):
        oracle = exact_coalition_policy(reference, [truths[s] for s in coal], beta)
        exact_gap = max(exact_gap, max_logprob_gap(compose_coalition(exact_provider, coal), oracle))
        fitted_tv = max(fitted_tv, float(np.max(tv_distance(compose_coalition(provider, coal), oracle))))

    # (b) sequential DPO in two orders vs the closed form over fitted implicit rewards, and vs joint DPO
    coalition = args.coalition.split(",") if args.coalition else list(ids)
    unknown = [c for c in coalition if c not in datasets]
    if unknown:
        raise UnknownIdentifierError(f"unknown sources in --coalition: {unknown}")
    nonempty = [c for c in coalition if len(datasets[c])]
    config = manifest.alignment
    seq_fwd = sequential_dpo(reference, [datasets[c] for c in nonempty], config)
    seq_rev = sequential_dpo(reference, [datasets[c] for c in reversed(nonempty)], config)
    fitted_rewards = [implicit_reward(provider.policies[c], reference, beta) for c in coalition]
    eq6 = exact_coalition_policy(reference, fitted_rewards, beta)
    union = None
    for c in nonempty:
        union = datasets[c] if union is None else union.concat(datasets[c])
    joint = dpo_fit(reference, union, config) if union is not None else reference
    seq = {
        "coalition": coalition,
        "tv_forward_vs_reverse": float(np.max(tv_distance(seq_fwd, seq_rev))),
        "tv_sequential_vs_closed_form": float(np.max(tv_distance(seq_fwd, eq6))),
        "tv_sequential_vs_joint_dpo": float(np.max(tv_distance(seq_fwd, joint))),
        "tv_composed_vs_sequential": float(np.max(tv_distance(compose_coalition(provider, coalition), seq_fwd))),
    }

    # (c) implicit reward recovery
    roundtrip = max(
        float(np.max(np.abs(implicit_reward(exact_provider.policies[s], reference, beta).values - truths[s].values)))
        for s in ids
    )
    fitted_err = max(
        float(np.max(np.abs(implicit_reward(provider.policies[s], reference, beta).values - truths[s].values)))
        for s in ids
    )
    report = {
        "composition": {"max_logprob_gap_exact_inputs": exact_gap,
                        "max_tv_fitted_vs_truth_closed_form": fitted_tv,
                        "coalitions": 2 ** len(ids), "tolerance": EXACT_GAP_TOL},
        "sequential": seq,
        "implicit_reward": {"max_roundtrip_error_exact_inputs": roundtrip,
                            "max_error_fitted_vs_truth": fitted_err},
    }
    write_json(manifest.out / "verify.json", report)
    print(f"(a) composition gap on exact inputs: {exact_gap:.3e} over {2 ** len(ids)} coalitions "
          f"(fitted policies vs truth closed form: TV {fitted_tv:.4f})")
    print(f"(b) sequential DPO on {'+'.join(coalition)}: orders TV {seq['tv_forward_vs_reverse']:.3e}, "
          f"vs closed form TV {seq['tv_sequential_vs_closed_form']:.3e}, "
          f"vs joint DPO TV {seq['tv_sequential_vs_joint_dpo']:.4f}")
    print(f"(c) implicit reward round trip {roundtrip:.3e}; fitted vs truth {fitted_err:.4f}")
    if exact_gap > EXACT_GAP_TOL:
        print(f"verification failed: gap {exact_gap:.3e} > {EXACT_GAP_TOL:.0e}", file=sys.stderr)
        return EXIT_VERIFICATION
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def _samples(value: str):
    return value if value == "full" else int(value)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="run manifest JSON (default for gen: <out>/manifest.json)")
    common.add_argument("--seed", type=int, default=None, help="global seed")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="parallel workers")
    common.add_argument("--force", action="store_true", help="recompute outputs that already exist")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="prefshap",
        description="Shapley valuation of preference-data sources via policy arithmetic.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic world and datasets")
    g.add_argument("--sources", type=int, default=4)
    g.add_argument("--prompts", type=int, default=8)
    g.add_argument("--responses", type=int, default=5)
    g.add_argument("--pairs", type=int, default=2000, help="preference pairs per source")
    g.add_argument("--eval-rewards", type=int, default=2)
    g.add_argument("--reward-scale", type=float, default=1.0)
    g.add_argument("--beta", type=float, default=0.1)
    g.add_argument("--out", default="run", help="output directory")
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fit", parents=[common], help="run one DPO fit per source")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("shapley", parents=[common], help="Shapley values over composed coalitions")
    s.add_argument("--estimator", choices=["exact", "mc", "regression"])
    s.add_argument("--perms", type=int, help="permutations for --estimator mc")
    s.add_argument("--samples", type=_samples, help="coalitions for --estimator regression, or 'full'")
    s.set_defaults(func=cmd_shapley)

    v = sub.add_parser("verify", parents=[common], help="check composition against closed forms")
    v.add_argument("--coalition", help="comma-separated sources for the sequential DPO check")
    v.set_defaults(func=cmd_verify)

    sg = sub.add_parser("signature", parents=[common], help="write the spatial-signature CSV")
    sg.set_defaults(func=cmd_signature)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "gen":
        if args.seed is None:
            args.seed = 0
    elif args.manifest is None:
        parser.error("--manifest is required")
    try:
        return args.func(args)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (InvalidInputError, UnknownIdentifierError, PrefShapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
