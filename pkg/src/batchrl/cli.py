"""Command-line entry point: ``batchrl <subcommand> [flags]``.

Exit status is 0 on success (recorded divergences included) and 2 on
configuration or IO errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import (BehavioralConfig, BehavioralPolicy, DatasetFormatError, generate_batch,
                   save_dataset, train_behavioral)
from .harness import (ConfigError, ExperimentConfig, SuiteConfig, coverage_holes, emit_plot_data,
                      load_config, run_benchmark_suite, run_experiment)
from .mdp import make_env

log = logging.getLogger("batchrl")


def _common(p: argparse.ArgumentParser, *names):
    if "env" in names:
        p.add_argument("--env", help="registered environment name or MDP json file")
    if "algo" in names:
        p.add_argument("--algo", help="algorithm tag (comma separated for suite)")
    if "dataset" in names:
        p.add_argument("--dataset", help="dataset binary path")
    if "seed" in names:
        p.add_argument("--seed", type=int, help="seed")
    if "iterations" in names:
        p.add_argument("--iterations", type=int, help="training iterations / steps")
    if "eval" in names:
        p.add_argument("--eval-interval", type=int, help="iterations between evaluations")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="batchrl", description="Offline RL benchmark on toy MDPs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-behavioral", help="train the behavioral DQN online")
    _common(p, "env", "seed", "iterations")

    p = sub.add_parser("generate", help="roll out the behavioral policy into a dataset binary")
    _common(p, "env", "dataset", "seed", "iterations")
    p.add_argument("--behavioral", help="behavioral policy json (trained if omitted)")
    p.add_argument("--transitions", type=int, help="number of transitions")

    p = sub.add_parser("train", help="one offline run over the configured seeds")
    _common(p, "env", "algo", "dataset", "seed", "iterations", "eval")

    p = sub.add_parser("suite", help="every algorithm on a shared batch per environment")
    _common(p, "env", "algo", "seed", "iterations", "eval")

    p = sub.add_parser("plot-data", help="seed-aggregated series files and figures")
    p.add_argument("metrics", help="directory holding run outputs")
    p.add_argument("--out", help="output directory (defaults to the metrics directory)")
    p.add_argument("--config", help="JSON config with clip / window keys")
    p.add_argument("--clip", type=float, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--no-figures", action="store_true")
    return parser


def _config(args) -> dict:
    return load_config(args.config) if args.config else {}


def _set(d: dict, key: str, value):
    if value is not None:
        d[key] = value


def cmd_train_behavioral(args) -> int:
    cfg = _config(args)
    env_name = args.env or cfg.pop("env", "cliff")
    steps = args.iterations if args.iterations is not None else cfg.pop("behavioral_steps", None)
    seed = args.seed if args.seed is not None else cfg.pop("behavioral_seed", 0)
    bcfg = BehavioralConfig(**cfg.get("behavioral_config", {}))
    env = make_env(env_name)
    policy = train_behavioral(env, steps, bcfg, seed=seed)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    policy.save(out / "behavioral.json")
    print(f"behavioral policy {policy.name}: greedy return {policy.greedy_return(env):.4f}, "
          f"noisy return {policy.expected_return(env):.4f} -> {out / 'behavioral.json'}")
    return 0


def cmd_generate(args) -> int:
    cfg = _config(args)
    env_name = args.env or cfg.get("env", "cliff")
    env = make_env(env_name)
    behavioral = args.behavioral or cfg.get("behavioral")
    if behavioral:
        policy = BehavioralPolicy.load(behavioral)
    else:
        steps = args.iterations if args.iterations is not None else cfg.get("behavioral_steps")
        policy = train_behavioral(env, steps, BehavioralConfig(**cfg.get("behavioral_config", {})),
                                  seed=cfg.get("behavioral_seed", 0))
    n = args.transitions or cfg.get("num_transitions", 100_000)
    seed = args.seed if args.seed is not None else cfg.get("dataset_seed", 0)
    dataset = generate_batch(env, policy, n, seed=seed)
    path = Path(args.dataset or cfg.get("dataset") or Path(args.out or ".") / "dataset.bin")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, path)
    policy.save(path.with_suffix(".behavioral.json"))
    holes = coverage_holes(env, dataset)
    print(f"wrote {len(dataset)} transitions ({len(dataset.episode_epsilons)} episodes, "
          f"{holes} unvisited non-terminal state-action pairs) -> {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    _set(cfg, "env", args.env)
    _set(cfg, "algo", args.algo)
    _set(cfg, "dataset", args.dataset)
    _set(cfg, "iterations", args.iterations)
    _set(cfg, "eval_interval", args.eval_interval)
    _set(cfg, "out", args.out)
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    config = ExperimentConfig.from_dict(cfg)
    summary = run_experiment(config)
    for info in summary["seeds"]:
        status = (f"diverged at {info['divergence_iteration']}" if info["diverged"]
                  else "ok")
        print(f"seed {info['seed']}: max value estimate {info['max_value_estimate']:.4g} ({status})")
    print(f"metrics -> {config.out}")
    return 0


def cmd_suite(args) -> int:
    cfg = _config(args)
    if args.env:
        cfg["envs"] = args.env.split(",")
    if args.algo:
        cfg["algorithms"] = args.algo.split(",")
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    _set(cfg, "iterations", args.iterations)
    _set(cfg, "eval_interval", args.eval_interval)
    _set(cfg, "out", args.out)
    rows = run_benchmark_suite(SuiteConfig.from_dict(cfg))
    for r in rows:
        print(f"{r['env']:>16} {r['rank']:>2} {r['algorithm']:>18} "
              f"{r['final_windowed_return']:9.4f}  {r['error']}")
    return 0


def cmd_plot_data(args) -> int:
    cfg = _config(args)
    clip = args.clip if args.clip is not None else cfg.get("clip", 100.0)
    window = args.window if args.window is not None else cfg.get("window", 5)
    paths = emit_plot_data(args.metrics, args.out, clip=clip, window=window,
                           figures=not args.no_figures)
    for p in paths:
        print(p)
    return 0


COMMANDS = {"train-behavioral": cmd_train_behavioral, "generate": cmd_generate,
            "train": cmd_train, "suite": cmd_suite, "plot-data": cmd_plot_data}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetFormatError, FileNotFoundError, OSError, TypeError,
            json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (KeyError, ValueError) as err:
        # invalid config values surface as ValueError from the dataclasses
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
