"""Command-line front end for training, evaluation and the four studies.

Every subcommand reads one optional YAML config (a serialized
ExperimentConfig), applies flag overrides, runs, and exports results
under the output directory.  Any error exits nonzero with a one-line
message on stderr.
"""

import argparse
import os
import sys

from .config import ExperimentConfig
from .harness import (DEFAULT_SWEEP_GRID, evaluate_method, export_results,
                      run_comparison, run_competitive, run_reward_sweep,
                      run_scalability, train_seed_runs, record_key)


def _add_common(sub):
    sub.add_argument("--config", help="YAML experiment config")
    sub.add_argument("--seed", type=int,
                     help="replace the seed list with this single seed")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--scenario", choices=("road", "highway"))
    sub.add_argument("--agents", type=int)
    sub.add_argument("--episodes", type=int, help="training episodes")
    sub.add_argument("--method", choices=("mappo", "gipps", "mpc"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emvsim",
        description="Ring-road emergency-vehicle simulation experiments")
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("train", help="train a policy per seed")
    _add_common(sub)

    sub = subs.add_parser("eval", help="evaluate a method on seeded episodes")
    _add_common(sub)
    sub.add_argument("--checkpoint",
                     help="training output dir containing seed_<k> runs "
                          "(required for --method mappo)")

    sub = subs.add_parser("compare", help="MAPPO vs Gipps vs MPC")
    _add_common(sub)
    sub.add_argument("--no-train", action="store_true",
                     help="reuse --checkpoint instead of training in-line")
    sub.add_argument("--checkpoint",
                     help="training output dir containing seed_<k> runs")

    sub = subs.add_parser("sweep-reward", help="reward-weight sweep")
    _add_common(sub)
    sub.add_argument("--grid",
                     help="comma list of w_risk:w_eff pairs, e.g. "
                          "'0:1,0.5:1,1:1' (default: the five-point grid)")

    sub = subs.add_parser("scale", help="agent-count scalability study")
    _add_common(sub)
    sub.add_argument("--counts", default="10,20",
                     help="comma list of agent counts (default 10,20)")

    sub = subs.add_parser("competitive",
                          help="cooperative vs competitive training")
    _add_common(sub)
    return parser


def load_experiment(args) -> ExperimentConfig:
    if args.config:
        exp = ExperimentConfig.from_yaml(args.config)
    else:
        exp = ExperimentConfig()
    return exp.with_overrides(scenario=args.scenario, agents=args.agents,
                              method=args.method, episodes=args.episodes,
                              seed=args.seed, out_dir=args.out)


def _seed_dirs(parent: str, exp: ExperimentConfig) -> list:
    dirs = [os.path.join(parent, f"seed_{s}") for s in exp.seeds]
    for d in dirs:
        if not os.path.exists(os.path.join(d, "manifest.json")):
            raise FileNotFoundError(f"no checkpoint manifest in {d}")
    return dirs


def _parse_grid(text: str):
    grid = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            w_risk, w_eff = part.split(":")
            grid.append((float(w_risk), float(w_eff)))
        except ValueError:
            raise ValueError(f"bad grid entry {part!r}; expected w_risk:w_eff")
    if not grid:
        raise ValueError("empty sweep grid")
    return tuple(grid)


def cmd_train(args) -> int:
    exp = load_experiment(args)
    dirs = train_seed_runs(exp, "train",
                           mode=exp.train.mode)
    for d in dirs:
        print(f"trained {d}")
    return 0


def cmd_eval(args) -> int:
    exp = load_experiment(args)
    run_dirs = None
    if exp.method == "mappo":
        if not args.checkpoint:
            raise ValueError("eval with --method mappo needs --checkpoint")
        run_dirs = _seed_dirs(args.checkpoint, exp)
    key = record_key(exp, exp.method)
    record = evaluate_method(exp, exp.method, key, run_dirs=run_dirs)
    paths = export_results([record], os.path.join(exp.out_dir, "results"), exp)
    _print_records([record])
    print(f"results in {paths['aggregate']}")
    return 0


def cmd_compare(args) -> int:
    exp = load_experiment(args)
    mappo_dirs = None
    if args.no_train:
        if not args.checkpoint:
            raise ValueError("--no-train needs --checkpoint")
        mappo_dirs = _seed_dirs(args.checkpoint, exp)
    records = run_comparison(exp, mappo_dirs=mappo_dirs,
                             train_missing=not args.no_train)
    paths = export_results(records, os.path.join(exp.out_dir, "results"), exp)
    _print_records(records)
    print(f"results in {paths['aggregate']}")
    return 0


def cmd_sweep(args) -> int:
    exp = load_experiment(args)
    grid = _parse_grid(args.grid) if args.grid else DEFAULT_SWEEP_GRID
    records = run_reward_sweep(exp, grid=grid)
    paths = export_results(records, os.path.join(exp.out_dir, "results"), exp)
    _print_records(records)
    print(f"results in {paths['aggregate']}")
    return 0


def cmd_scale(args) -> int:
    exp = load_experiment(args)
    counts = tuple(int(c) for c in args.counts.split(",") if c.strip())
    if not counts:
        raise ValueError("empty counts list")
    records = run_scalability(exp, counts=counts)
    paths = export_results(records, os.path.join(exp.out_dir, "results"), exp)
    _print_records(records)
    print(f"results in {paths['aggregate']}")
    return 0


def cmd_competitive(args) -> int:
    exp = load_experiment(args)
    records = run_competitive(exp)
    paths = export_results(records, os.path.join(exp.out_dir, "results"), exp)
    _print_records(records)
    print(f"results in {paths['aggregate']}")
    return 0


def _print_records(records):
    for rec in records:
        key = rec.key
        tag = (f"{key['scenario']}/{key['method']} n={key['agents']} "
               f"mode={key['mode']} w_risk={key['w_risk']:g} "
               f"w_eff={key['w_eff']:g}")
        if rec.error:
            print(f"{tag}: error: {rec.error}")
            continue
        agg = rec.aggregate()
        cells = []
        for name in ("emv_speed", "av_speed", "collisions", "mean_risk",
                     "safety_distance"):
            mean, std = agg[name]
            cells.append(f"{name}={mean:.3f}+-{std:.3f}")
        print(f"{tag}: " + " ".join(cells))


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "compare": cmd_compare,
            "sweep-reward": cmd_sweep, "scale": cmd_scale,
            "competitive": cmd_competitive}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
