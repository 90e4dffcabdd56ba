"""Command-line entry point: ``polbc <command> ...``.

Every command writes a RunManifest next to its outputs; ``polbc replay``
reruns a manifest and checks that the outputs come out byte-identical.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evaluation
from .core_math import make_rng
from .environments import (
    GRID_SCENARIOS,
    DangerousPath,
    GridWorld,
    PointWorld,
    exact_grid_occupancy,
    gather_data,
    grid_action_distance,
    grid_state_distance,
    load_scenario,
    simulate_grid,
)
from .io import (
    RunManifest,
    atomic_write_text,
    dataset_from_csv,
    dataset_to_csv,
    distance_matrix_to_csv,
    fmt,
    sha256_file,
)
from .policies import TabularPolicy, policy_from_json
from .supervector import DEFAULT_COMPONENTS, DEFAULT_RELEVANCE
from .trainers.novelty import EsConfig, train_es
from .trainers.trust_region import THRESHOLD_GRIDS, TrustRegionConfig, train_trust_region


class UsageError(Exception):
    """Bad arguments or configuration; exits with status 2."""


ENV_NAMES = tuple(f"gridworld-{s}" for s in GRID_SCENARIOS) + ("dangerous-path", "point")
METHODS = ("supervector", "gaussian", "histogram", "discriminator")
EXPERIMENTS = ("trust-region", "novelty", "metric-study")


def thread_cap() -> int:
    """POLBC_THREADS, the rollout parallelism cap. Rollouts here run on one thread."""
    raw = os.environ.get("POLBC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"POLBC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("POLBC_THREADS must be a positive integer")
    return n


def parse_seeds(text: str) -> list[int]:
    """``3`` -> [3]; ``0,2,5`` -> [0, 2, 5]; ``0:10`` -> 0..9."""
    try:
        if ":" in text:
            a, b = text.split(":")
            seeds = list(range(int(a), int(b)))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad seed list {text!r}") from None
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def parse_floats(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad number list {text!r}") from None


# -- building blocks -----------------------------------------------------------

def make_env(name: str, args):
    if name.startswith("gridworld-"):
        scenario = name[len("gridworld-"):]
        if scenario not in GRID_SCENARIOS:
            raise UsageError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
        layout, _, _ = load_scenario(scenario)
        return GridWorld(layout, args.epsilon)
    if name == "dangerous-path":
        return DangerousPath(seed=args.env_seed)
    if name == "point":
        return PointWorld()
    raise UsageError(f"unknown environment {name!r}; choose from {ENV_NAMES}")


def load_policy(path: str, env):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read policy file: {exc}") from None
    try:
        if text.lstrip().startswith("{"):
            return policy_from_json(text)
        layout = getattr(env, "layout", None)
        if layout is None:
            raise ValueError("grid-text policies only work with grid worlds")
        return TabularPolicy.parse(text, layout)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"unreadable policy {path!r}: {exc}") from None


def load_dataset(path: str):
    try:
        return dataset_from_csv(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read dataset: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"bad dataset {path!r}: {exc}") from None


def apply_config(cls, base: dict, path: str | None, **overrides):
    """Build a config dataclass from defaults, a JSON file and flag overrides."""
    known = {f.name for f in fields(cls)}
    values = dict(base)
    if path:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {path!r}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        bad = sorted(set(doc) - known)
        if bad:
            raise UsageError(f"invalid config keys {bad}")
        values.update(doc)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


# -- commands --------------------------------------------------------------------
# Each command writes its outputs under ``out`` and returns
# (config, seeds, input paths, output paths).

def cmd_gather(args, out: Path):
    if args.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    env = make_env(args.env, args)
    policy = load_policy(args.policy, env)
    data = gather_data(env, policy, args.episodes, make_rng(args.seed))
    atomic_write_text(out, dataset_to_csv(data))
    config = {"env": args.env, "episodes": args.episodes, "epsilon": args.epsilon,
              "env_seed": args.env_seed}
    return config, [args.seed], [args.policy], [out]


def cmd_distance(args, out: Path):
    if len(args.inputs) < 2:
        raise UsageError("need at least two dataset files")
    datasets = [load_dataset(p) for p in args.inputs]
    if len({ds.d for ds in datasets}) != 1:
        raise UsageError("datasets have different state dimensions")
    ids = [Path(p).stem for p in args.inputs]
    if len(set(ids)) != len(ids):
        ids = [f"{i}:{s}" for i, s in enumerate(ids)]
    rng = make_rng(args.seed)
    outputs = [out]
    if args.method == "supervector":
        from .supervector import supervector_distance_matrix

        ubm, svs, m = supervector_distance_matrix(
            datasets, args.components, args.relevance, rng, ids, max_ubm_states=args.max_ubm_states)
        ubm_path = out.with_name(out.name + ".ubm.json")
        sv_path = out.with_name(out.name + ".supervectors.json")
        atomic_write_text(ubm_path, ubm.to_json() + "\n")
        doc = {i: json.loads(sv.to_json()) for i, sv in zip(ids, svs)}
        atomic_write_text(sv_path, json.dumps(doc, sort_keys=True) + "\n")
        outputs += [ubm_path, sv_path]
    else:
        m = evaluation.distance_matrix(args.method, datasets, rng, ids=ids)
    atomic_write_text(out, distance_matrix_to_csv(m))
    config = {"method": args.method, "components": args.components,
              "relevance": args.relevance, "max_ubm_states": args.max_ubm_states}
    return config, [args.seed], list(args.inputs), outputs


def cmd_demo_gridworld(args, out: Path):
    if args.scenario not in GRID_SCENARIOS:
        raise UsageError(f"unknown scenario {args.scenario!r}; choose from {GRID_SCENARIOS}")
    if args.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    layout, blue, green = load_scenario(args.scenario)
    rows = ["epsilon,return_distance,action_distance,state_distance,exact_state_distance"]
    for i, eps in enumerate(parse_floats(args.epsilons)):
        env = GridWorld(layout, eps)
        # both policies see the same noise stream
        a = simulate_grid(env, blue, args.episodes, make_rng(args.seed, i))
        b = simulate_grid(env, green, args.episodes, make_rng(args.seed, i))
        occ_a, _ = exact_grid_occupancy(env, blue)
        occ_b, _ = exact_grid_occupancy(env, green)
        rows.append(",".join(fmt(v) for v in (
            eps, abs(a.mean_return - b.mean_return), grid_action_distance(blue, green),
            grid_state_distance(a.occupancy, b.occupancy), grid_state_distance(occ_a, occ_b))))
    atomic_write_text(out, "\n".join(rows) + "\n")
    config = {"scenario": args.scenario, "epsilons": args.epsilons, "episodes": args.episodes}
    return config, [args.seed], [], [out]


def _experiment_trust_region(args, out: Path, seeds):
    kinds = ["none", "max_tv", "gaussian", "supervector"] if args.constraint == "all" \
        else [args.constraint]
    outputs, summary = [], ["constraint,threshold,mean_auc,stop_rate,seeds"]
    configs = {}
    for kind in kinds:
        if kind == "none":
            thresholds = [None]
        elif args.threshold == "sweep":
            thresholds = list(THRESHOLD_GRIDS[kind])
        elif args.threshold:
            thresholds = parse_floats(args.threshold)
        else:
            thresholds = [None]
        for th in thresholds:
            cfg = apply_config(TrustRegionConfig, {}, args.config, constraint=kind,
                               threshold=th, iterations=args.iterations)
            configs[f"{kind}@{cfg.threshold}"] = cfg.to_dict()
            aucs, stops = [], []
            for s in seeds:
                env = DangerousPath(n=cfg.env_n, seed=s, max_steps=cfg.env_max_steps)
                curve = train_trust_region(env, cfg, s)
                label = f"{kind}" if cfg.threshold is None else f"{kind}_{fmt(cfg.threshold)}"
                path = out / f"trust-region_{label}_seed{s}.csv"
                atomic_write_text(path, curve.to_csv())
                outputs.append(path)
                aucs.append(curve.auc())
                stops.append(float(np.mean(curve.aux)))
            summary.append(",".join([kind, "" if cfg.threshold is None else fmt(cfg.threshold),
                                     fmt(np.mean(aucs)), fmt(np.mean(stops)), str(len(seeds))]))
    path = out / "summary.csv"
    atomic_write_text(path, "\n".join(summary) + "\n")
    return configs, outputs + [path]


def _experiment_novelty(args, out: Path, seeds):
    modes = ["ES", "NSR-ES"] if args.mode == "both" else [args.mode]
    outputs, summary = [], ["mode,bc,mean_final,median_final,seeds"]
    configs = {}
    for mode in modes:
        cfg = apply_config(EsConfig, {}, args.config, mode=mode, bc=args.bc,
                           generations=args.generations)
        configs[mode] = cfg.to_dict()
        finals = []
        env = PointWorld()
        for s in seeds:
            curve, _ = train_es(env, cfg, s)
            path = out / f"novelty_{mode}_{cfg.bc}_seed{s}.csv"
            atomic_write_text(path, curve.to_csv())
            outputs.append(path)
            finals.append(curve.returns[-1] if curve.returns else 0.0)
        summary.append(",".join([mode, cfg.bc, fmt(np.mean(finals)), fmt(np.median(finals)),
                                 str(len(seeds))]))
    path = out / "summary.csv"
    atomic_write_text(path, "\n".join(summary) + "\n")
    return configs, outputs + [path]


def _experiment_metric_study(args, out: Path, seeds):
    methods = evaluation.METHODS if args.method == "all" else (args.method,)
    budgets = [int(b) for b in parse_floats(args.budgets)]
    outputs, configs = [], {}
    for s in seeds:
        try:
            res = evaluation.metric_study(methods, budgets, args.repetitions, seed=s,
                                          components=args.components, relevance=args.relevance,
                                          truth_repetition=args.truth_repetition)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        rows = out / f"metric-study_seed{s}.csv"
        atomic_write_text(rows, res.to_csv())
        reports = out / f"metric-study_seed{s}.jsonl"
        atomic_write_text(reports, "".join(r.to_json() + "\n" for r in res.reports))
        outputs += [rows, reports]
    configs["metric-study"] = {"methods": list(methods), "budgets": budgets,
                               "repetitions": args.repetitions, "components": args.components,
                               "relevance": args.relevance, "truth_repetition": args.truth_repetition}
    return configs, outputs


def cmd_experiment(args, out: Path):
    seeds = parse_seeds(args.seeds)
    out.mkdir(parents=True, exist_ok=True)
    runner = {"trust-region": _experiment_trust_region, "novelty": _experiment_novelty,
              "metric-study": _experiment_metric_study}[args.name]
    configs, outputs = runner(args, out, seeds)
    inputs = [args.config] if args.config else []
    return configs, seeds, inputs, outputs


COMMANDS = {
    "gather": cmd_gather,
    "distance": cmd_distance,
    "demo-gridworld": cmd_demo_gridworld,
    "experiment": cmd_experiment,
}


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polbc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gather", help="roll out a policy and write a trajectory CSV")
    g.add_argument("--env", required=True, help=f"one of {', '.join(ENV_NAMES)}")
    g.add_argument("--policy", required=True, help="policy JSON or grid-text file")
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--epsilon", type=float, default=0.0, help="grid-world slip probability")
    g.add_argument("--env-seed", type=int, default=0, help="dangerous-path layout seed")
    g.add_argument("--out", required=True)

    d = sub.add_parser("distance", help="pairwise behavioural distances between datasets")
    d.add_argument("inputs", nargs="+", help="trajectory CSV files")
    d.add_argument("--method", choices=METHODS, default="supervector")
    d.add_argument("--components", type=int, default=DEFAULT_COMPONENTS)
    d.add_argument("--relevance", type=float, default=DEFAULT_RELEVANCE)
    d.add_argument("--max-ubm-states", type=int, default=None)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)

    m = sub.add_parser("demo-gridworld", help="return/action/state distances over slip values")
    m.add_argument("--scenario", default="stochastic", help=f"one of {', '.join(GRID_SCENARIOS)}")
    m.add_argument("--epsilons", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")
    m.add_argument("--episodes", type=int, default=10000)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)

    e = sub.add_parser("experiment", help="trust-region, novelty or metric-study runs")
    e.add_argument("name", choices=EXPERIMENTS)
    e.add_argument("--seeds", default="0")
    e.add_argument("--config", default=None, help="JSON file of config overrides")
    e.add_argument("--constraint", default="all",
                   choices=["all", "none", "max_tv", "gaussian", "supervector"])
    e.add_argument("--threshold", default=None,
                   help="threshold or comma list; 'sweep' runs the default grid")
    e.add_argument("--iterations", type=int, default=None)
    e.add_argument("--mode", default="both", choices=["both", "ES", "NSR-ES"])
    e.add_argument("--bc", default="supervector", choices=["terminal", "gaussian", "supervector"])
    e.add_argument("--generations", type=int, default=None)
    e.add_argument("--method", default="supervector", choices=["all", *METHODS])
    e.add_argument("--budgets", default="10,25,50")
    e.add_argument("--repetitions", type=int, default=3)
    e.add_argument("--truth-repetition", type=int, default=0)
    e.add_argument("--components", type=int, default=4)
    e.add_argument("--relevance", type=float, default=DEFAULT_RELEVANCE)
    e.add_argument("--out", required=True, help="output directory")

    r = sub.add_parser("replay", help="rerun a manifest and compare outputs byte for byte")
    r.add_argument("manifest")
    r.add_argument("--out", default=None,
                   help="where to write the rerun (default: a temporary location)")
    return p


def manifest_path(out: Path, command: str) -> Path:
    return out / "manifest.json" if command == "experiment" else out.with_name(out.name + ".manifest.json")


def _relative(out: Path, path: Path, command: str) -> str:
    base = out if command == "experiment" else out.parent
    return str(Path(path).relative_to(base))


def _args_to_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items())}


def _absolute_inputs(args) -> None:
    """Record input files by absolute path so a manifest replays from any directory."""
    if getattr(args, "policy", None):
        args.policy = str(Path(args.policy).resolve())
    if getattr(args, "inputs", None):
        args.inputs = [str(Path(p).resolve()) for p in args.inputs]
    if getattr(args, "config", None):
        args.config = str(Path(args.config).resolve())


def execute(args) -> RunManifest:
    _absolute_inputs(args)
    out = Path(args.out)
    config, seeds, inputs, outputs = COMMANDS[args.command](args, out)
    manifest = RunManifest(
        command=args.command,
        config={"args": _args_to_config(args), "resolved": config},
        seeds=list(seeds),
        inputs={str(p): sha256_file(p) for p in inputs},
        outputs={_relative(out, p, args.command): sha256_file(p) for p in outputs},
    )
    atomic_write_text(manifest_path(out, args.command), manifest.to_json())
    return manifest


def replay(manifest_file: str, out: str | None) -> bool:
    try:
        manifest = RunManifest.from_json(Path(manifest_file).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read manifest: {exc}") from None
    for path, digest in manifest.inputs.items():
        if not Path(path).exists() or sha256_file(path) != digest:
            raise RuntimeError(f"input {path} is missing or changed since the recorded run")
    args = argparse.Namespace(**manifest.config["args"])
    tmp = None
    if out is None:
        tmp = tempfile.mkdtemp(prefix="polbc-replay-")
        out = tmp
    try:
        original = Path(args.out)
        args.out = str(Path(out)) if args.command == "experiment" else str(Path(out) / original.name)
        rerun = execute(args)
        same = rerun.outputs == manifest.outputs
        for name in sorted(set(rerun.outputs) | set(manifest.outputs)):
            status = "ok" if rerun.outputs.get(name) == manifest.outputs.get(name) else "DIFFERS"
            print(f"{status}  {name}")
        return same
    finally:
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        thread_cap()
        if args.command == "replay":
            return 0 if replay(args.manifest, args.out) else 1
        manifest = execute(args)
        for name in manifest.outputs:
            print(name)
        return 0
    except UsageError as exc:
        print(f"polbc: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and exit 1
        print(f"polbc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
