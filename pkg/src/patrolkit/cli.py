"""Command-line entry point: ``patrolkit run | sweep | train | adversary | analyze``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

SEED_ENV = "PATROLKIT_SEED"


class CliError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    from .graph import GraphError
    from .neural import ArchitectureError
    from .sim import ConfigError, SimConfig, run, save_run
    from .bundled import resolve_map, resolve_weights

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    flags = {"map": args.map, "strategy": args.strategy, "weights": args.weights, "n_agents": args.agents,
             "duration": args.duration, "dt": args.dt, "agent_speed": args.speed,
             "msg_fail_prob": args.msg_fail_prob, "seed": args.seed, "start_vertices": args.start_vertices}
    base.update({k: v for k, v in flags.items() if v is not None})
    base.setdefault("seed", default_seed())
    try:
        config = SimConfig.from_dict(base)
        if config.strategy in ("suns", "mns") and not config.weights:
            raise CliError(f"--weights is required for strategy {config.strategy!r}")
        graph = resolve_map(config.map)
        weights = resolve_weights(config.weights) if config.strategy in ("suns", "mns") else None
        log = run(config, graph=graph, weights=weights)
    except (ConfigError, GraphError, ArchitectureError, OSError) as exc:
        raise CliError(str(exc)) from exc
    save_run(log, config, graph, args.out)
    print(f"wrote {args.out} ({log.n_ticks} ticks, mean idleness {log.idleness.mean():.3f})")
    return 0


def cmd_sweep(args) -> int:
    from .sim import ConfigError
    from .sweep import SweepSpec, run_sweep

    try:
        spec = SweepSpec.load(args.spec)
    except (ConfigError, OSError, json.JSONDecodeError, TypeError) as exc:
        raise CliError(f"bad sweep spec {args.spec}: {exc}") from exc
    if args.seed is not None:
        spec.base_seed = args.seed
    elif os.environ.get(SEED_ENV) is not None:
        spec.base_seed = default_seed()
    rows = run_sweep(spec, args.out, jobs=args.jobs)
    print(f"{len(rows)} runs; results in {Path(args.out) / 'results.csv'}")
    return 0


def cmd_train(args) -> int:
    from .bundled import resolve_map
    from .neural import save_weights
    from .trainer import TrainConfig, TrainingError, calibrate_offset, distill_mns, save_report, train, training_graph

    data = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {"restarts": args.restarts, "learning_rate": args.lr, "seed": args.seed, "jobs": args.jobs}
    data.update({k: v for k, v in overrides.items() if v is not None})
    data.setdefault("seed", default_seed())
    try:
        config = TrainConfig.from_dict(data)
        sun, report = train(config)
    except (TrainingError, ValueError, TypeError) as exc:
        raise CliError(str(exc)) from exc
    out = Path(args.out)
    graphs = [training_graph(s, config.n_vertices_range) for s in config.validation_seeds]
    if args.calibrate:
        sun, offset = calibrate_offset(sun, graphs)
        report["calibration_offset"] = offset
    save_weights(sun, out)
    if args.mns_out:
        extra = [resolve_map(m) for m in args.distill_maps]
        result = distill_mns(sun, graphs + extra, seed=config.seed)
        save_weights(result.mns, args.mns_out)
        report["mns"] = {"path": str(args.mns_out), "mse": result.mse, "r2": result.r2, "samples": result.n_samples}
    report_path = out.with_name(out.stem + ".report.json")
    save_report(report, report_path)
    print(f"wrote {out} (best restart {report['best_restart']}) and {report_path}")
    return 0


def _load_log_dir(path):
    from .sim import load_run

    try:
        return load_run(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load run directory {path}: {exc}") from exc


def cmd_adversary(args) -> int:
    from .adversary import AdversaryError, assess
    from .graph import load_graph, shortest_paths

    log, config, graph = _load_log_dir(args.log)
    if args.map:
        from .bundled import resolve_map

        graph = resolve_map(args.map)
    distances = shortest_paths(graph)
    results = []
    try:
        for d in args.attack_duration:
            policy, evaluation = assess(log, graph, distances, d, args.train_fraction)
            entry = evaluation.to_dict()
            entry["attack_states"] = policy.to_dict()["attack_states"]
            entry["fallback_vertices"] = policy.fallback
            results.append(entry)
    except AdversaryError as exc:
        raise CliError(str(exc)) from exc
    report = {
        "config": {"log": str(args.log), "attack_durations": list(args.attack_duration),
                   "train_fraction": args.train_fraction, "map": args.map},
        "run_config": config.to_dict(),
        "results": results,
    }
    _write_json(Path(args.out), report)
    for r in results:
        agg = r["aggregate_p_s"]
        print(f"attack {r['attack_duration']:g} s: aggregate p(s) = {'n/a' if agg is None else f'{agg:.4f}'}")
    return 0


def find_runs(paths) -> list[Path]:
    """Run directories (those holding ``idleness.csv`` and ``config.json``) under the given paths."""
    found = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise CliError(f"no such log directory: {p}")
        candidates = [p] if (p / "idleness.csv").is_file() else sorted(q.parent for q in p.rglob("idleness.csv"))
        found += [c for c in candidates if (c / "config.json").is_file()]
    if not found:
        raise CliError("no run directories found")
    return sorted(set(found))


def cmd_analyze(args) -> int:
    from .analysis import pairwise_comparison, summarize
    from .sim import SimConfig

    runs = find_runs(args.logs)
    field = args.group_by
    if field not in SimConfig.__dataclass_fields__:
        raise CliError(f"--group-by must be a run config field, one of {', '.join(SimConfig.__dataclass_fields__)}")
    rows = []
    for r in runs:
        log, config, _ = _load_log_dir(r)
        s = summarize(log)
        rows.append({"path": str(r), field: getattr(config, field), "seed": config.seed,
                     "mean_idleness": s.mean_idleness, "mean_max_idleness": s.mean_max_idleness})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {"logs": [str(p) for p in args.logs], "group_by": field})
    with open(out / "runs.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows({k: repr(v) if isinstance(v, float) else v for k, v in row.items()} for row in rows)

    groups = {}
    for row in rows:
        groups.setdefault(json.dumps(row[field]), []).append(row["mean_idleness"])
    best = min(float(np.mean(v)) for v in groups.values())
    with open(out / "groups.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([field, "runs", "mean_idleness", "std_idleness", "relative_idleness"])
        for key, vals in groups.items():
            m = float(np.mean(vals))
            writer.writerow([json.loads(key), len(vals), repr(m), repr(float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0),
                             repr(m / best) if best > 0 else ""])
    if len(groups) >= 2:
        stats = pairwise_comparison({k: v for k, v in groups.items()})
        _write_json(out / "stats.json", stats)
        kw = stats["kruskal_wallis"]
        print(f"Kruskal-Wallis across {len(groups)} groups: H = {kw['H']:.4f}, p = {kw['p']:.4g}")
    print(f"{len(rows)} runs summarised into {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    from .strategies import STRATEGY_NAMES

    parser = argparse.ArgumentParser(prog="patrolkit", description="Multi-agent graph patrolling toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one patrol and write its logs")
    p.add_argument("--config", help="JSON run config; flags override its fields")
    p.add_argument("--map", help="graph JSON file or bundled name (demo4, grid20, map40, map60)")
    p.add_argument("--strategy", choices=STRATEGY_NAMES)
    p.add_argument("--weights", help="weight file or bundled name (sun, mns); required for suns and mns")
    p.add_argument("--agents", type=int)
    p.add_argument("--duration", type=float, help="seconds")
    p.add_argument("--dt", type=float, help="tick length in seconds")
    p.add_argument("--seed", type=int, help=f"defaults to ${SEED_ENV} or 0")
    p.add_argument("--msg-fail-prob", type=float, help="per-receiver message rejection probability")
    p.add_argument("--speed", type=float, help="agent speed in m/s")
    p.add_argument("--start-vertices", type=int, nargs="+")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a grid of simulations from a JSON spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, help="override the spec's base seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", help="train SUN weights with actor-critic")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--restarts", type=int)
    p.add_argument("--lr", type=float, help="actor learning rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--calibrate", action="store_true",
                   help="shift the output bias so neighbour utilities are positive (policy unchanged)")
    p.add_argument("--mns-out", help="also distil MNS weights to this file")
    p.add_argument("--distill-maps", nargs="*", default=[], help="extra graphs whose decisions feed the distillation")
    p.add_argument("--out", required=True, help="weight file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adversary", help="score a logged patrol against a learning adversary")
    p.add_argument("--log", required=True, help="run directory written by 'run'")
    p.add_argument("--attack-duration", type=float, nargs="+", required=True, help="seconds; several allowed")
    p.add_argument("--train-fraction", type=float, default=0.5)
    p.add_argument("--map", help="graph to use instead of the run's graph.json")
    p.add_argument("--out", required=True, help="JSON report path")
    p.set_defaults(func=cmd_adversary)

    p = sub.add_parser("analyze", help="summarise runs and test for differences between groups")
    p.add_argument("--logs", nargs="+", required=True, help="run directories or trees containing them")
    p.add_argument("--group-by", default="strategy", help="run config field to group on")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"patrolkit {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
