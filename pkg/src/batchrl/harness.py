"""Offline training runs, benchmark suites and plot-ready series.

Each run writes ``metrics_seed<k>.csv`` (one row per evaluation point), an
``aggregate.csv`` across seeds, ``timing_seed<k>.csv`` with wall-clock times and
a ``run.json`` summary.  Metrics files contain no timing, so identical
config and seed give byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .agents import AgentConfig, make_agent, save_checkpoint
from .data import (BatchDataset, BehavioralConfig, BehavioralPolicy, generate_batch, load_dataset,
                   sample_minibatch, save_dataset, train_behavioral)
from .mdp import Environment, make_env, registered_envs
from .nn import NumericError

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "SuiteConfig",
    "MetricsRecord",
    "ConfigError",
    "prepare_dataset",
    "run_experiment",
    "run_seed",
    "run_benchmark_suite",
    "emit_plot_data",
    "sliding_window_mean",
    "load_config",
]

METRIC_FIELDS = ("seed", "iteration", "mean_eval_return", "return_std", "mean_value_estimate",
                 "training_loss", "diverged")


class ConfigError(ValueError):
    """Invalid configuration or unreadable input; maps to a nonzero CLI exit."""


@dataclass
class ExperimentConfig:
    env: str = "cliff"
    algo: str = "dqn"
    agent: dict = field(default_factory=dict)
    dataset: str | None = None
    num_transitions: int = 100_000
    dataset_seed: int = 0
    behavioral: str | None = None
    behavioral_steps: int | None = None
    behavioral_seed: int = 0
    behavioral_config: dict = field(default_factory=dict)
    iterations: int = 200_000
    eval_interval: int = 2_000
    eval_episodes: int = 10
    eval_epsilon: float = 0.001
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    value_estimate_minibatches: int = 100
    spibb_true_baseline: bool = False
    require_coverage_hole: bool = False
    checkpoint: bool = True
    out: str = "runs"

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.iterations < 0 or self.eval_interval <= 0 or self.eval_episodes <= 0:
            raise ConfigError("iterations must be >= 0, eval_interval and eval_episodes > 0")
        if self.iterations > 0 and self.eval_interval > self.iterations:
            raise ConfigError("eval_interval must not exceed iterations")
        if self.dataset is not None and not Path(self.dataset).exists() and self.num_transitions <= 0:
            raise ConfigError(f"dataset {self.dataset} not found and no generation spec given")
        if self.env not in registered_envs() and not Path(self.env).exists():
            raise ConfigError(f"unknown environment {self.env!r}; known: {registered_envs()}")
        for path in (self.behavioral,):
            if path is not None and not Path(path).exists():
                raise ConfigError(f"behavioral policy file {path} not found")
        try:
            self.agent_config()
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def agent_config(self) -> AgentConfig:
        return AgentConfig.from_dict({**self.agent, "algorithm": self.algo,
                                      "eval_epsilon": self.eval_epsilon})

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SuiteConfig:
    """All algorithms on one shared batch per environment."""

    envs: list = field(default_factory=lambda: ["cliff"])
    algorithms: list = field(default_factory=lambda: ["dqn", "qrdqn", "rem", "bcq", "klcontrol",
                                                      "spibb"])
    agent: dict = field(default_factory=dict)
    agent_overrides: dict = field(default_factory=dict)
    num_transitions: int = 100_000
    dataset_seed: int = 0
    behavioral_steps: int | None = None
    behavioral_seed: int = 0
    behavioral_config: dict = field(default_factory=dict)
    iterations: int = 200_000
    eval_interval: int = 2_000
    eval_episodes: int = 10
    eval_epsilon: float = 0.001
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    value_estimate_minibatches: int = 100
    require_coverage_hole: bool = False
    window: int = 5
    jobs: int = 1
    out: str = "suite"

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown suite config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err


@dataclass
class MetricsRecord:
    seed: int
    iteration: int
    mean_eval_return: float
    return_std: float
    mean_value_estimate: float
    training_loss: float
    wall_clock_seconds: float
    diverged: bool = False


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def prepare_dataset(config, env: Environment, out_dir: Path):
    """Load the configured dataset, or train a behavioral policy and generate one.

    Returns ``(dataset, behavioral_policy_or_None)``.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    policy = None
    behavioral = getattr(config, "behavioral", None)
    if behavioral is not None:
        policy = BehavioralPolicy.load(behavioral)
    dataset_path = getattr(config, "dataset", None)
    if dataset_path is not None and Path(dataset_path).exists():
        dataset = load_dataset(dataset_path)
        sidecar = Path(dataset_path).with_suffix(".behavioral.json")
        if policy is None and sidecar.exists():
            policy = BehavioralPolicy.load(sidecar)
        return dataset, policy
    if policy is None:
        policy = train_behavioral(env, config.behavioral_steps,
                                  BehavioralConfig(**config.behavioral_config),
                                  seed=config.behavioral_seed)
    dataset = generate_batch(env, policy, config.num_transitions, seed=config.dataset_seed)
    if getattr(config, "require_coverage_hole", False) and coverage_holes(env, dataset) == 0:
        raise ConfigError(f"batch for {env.name} visits every live state-action pair; "
                          "the configured benchmark needs a coverage hole")
    target = Path(dataset_path) if dataset_path is not None else out_dir / "dataset.bin"
    target.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, target)
    policy.save(target.with_suffix(".behavioral.json"))
    return dataset, policy


def coverage_holes(env: Environment, dataset: BatchDataset) -> int:
    """Non-terminal state-action pairs of visited states that never occur in the batch."""
    visited = dataset.counts.sum(axis=1) > 0
    live = visited & ~env.spec.terminal_mask
    return int((dataset.counts[live] == 0).sum())


def _check_env(env: Environment, dataset: BatchDataset):
    if (env.num_states, env.num_actions, env.obs_dim) != (dataset.num_states, dataset.num_actions,
                                                          dataset.obs_dim):
        raise ConfigError(f"dataset for {dataset.env_name!r} does not fit environment {env.name!r}")


def dataset_episode_return(dataset: BatchDataset) -> float:
    """Mean undiscounted return of the complete episodes recorded in the batch."""
    totals = np.bincount(dataset.episode_ids, weights=dataset.rewards)
    last = len(dataset.episode_epsilons) - 1
    complete = totals[:last] if dataset.episode_ids[-1] == last else totals
    return float(np.mean(complete)) if len(complete) else float(np.mean(totals))


def reference_returns(env: Environment, dataset: BatchDataset, policy) -> dict:
    refs = {"oracle": env.optimal_return()}
    if policy is not None:
        refs["behavioral"] = policy.expected_return(env)
        refs["behavioral_greedy"] = policy.greedy_return(env)
    else:
        refs["behavioral"] = dataset_episode_return(dataset)
    return refs


# ---------------------------------------------------------------------------
# Single run
# ---------------------------------------------------------------------------

def evaluate(env: Environment, policy_table: np.ndarray, episodes: int, epsilon: float,
             rng: np.random.Generator):
    """Monte-Carlo undiscounted returns of an epsilon-perturbed policy table."""
    A = env.num_actions
    cdf = np.cumsum(policy_table, axis=1)
    deterministic = np.max(policy_table, axis=1) >= 1.0
    greedy = np.argmax(policy_table, axis=1)
    returns = np.empty(episodes)
    for i in range(episodes):
        ep = env.episode(rng)
        total = 0.0
        while not ep.finished:
            s = ep.state
            if rng.random() < epsilon:
                a = int(rng.integers(A))
            elif deterministic[s]:
                a = int(greedy[s])
            else:
                a = int(min(np.searchsorted(cdf[s], rng.random() * cdf[s, -1], side="right"), A - 1))
            total += ep.step(a).reward
        returns[i] = total
    return float(returns.mean()), float(returns.std())


def run_seed(config: ExperimentConfig, seed: int, env: Environment, dataset: BatchDataset,
             policy: BehavioralPolicy | None = None, checkpoint_dir=None):
    """Train one agent offline and evaluate it on a fixed grid.

    Returns ``(records, info)``.  Numeric divergence is caught: the run is
    marked diverged and later evaluation points repeat the last finite record.
    """
    agent_cfg = config.agent_config()
    root = np.random.SeedSequence([int(seed), 7919])
    init_ss, sample_ss, eval_ss, value_ss = root.spawn(4)
    baseline = None
    if agent_cfg.algorithm == "spibb" and config.spibb_true_baseline:
        if policy is None:
            raise ConfigError("spibb_true_baseline needs the behavioral policy")
        baseline = policy.mixture_probs()
    agent = make_agent(agent_cfg, dataset.obs_dim, dataset.num_actions, seed=init_ss,
                       counts=dataset.counts, baseline=baseline)
    sample_rng = np.random.default_rng(sample_ss)
    eval_rng = np.random.default_rng(eval_ss)
    value_rng = np.random.default_rng(value_ss)
    all_states = np.arange(env.num_states)
    batch = agent_cfg.batch_size

    records: list[MetricsRecord] = []
    info = {"seed": int(seed), "diverged": False, "divergence_iteration": None,
            "last_finite_value_estimate": None, "training_env_calls": 0,
            "max_value_estimate": -np.inf}
    start = time.perf_counter()
    loss_sum, loss_n = 0.0, 0

    def snapshot(t):
        table = agent.policy_probs(env.features, all_states)
        ret, ret_std = evaluate(env, table, config.eval_episodes, config.eval_epsilon, eval_rng)
        mbs = [sample_minibatch(dataset, batch, value_rng)
               for _ in range(config.value_estimate_minibatches)]
        value = agent.value_estimate(mbs)
        loss = loss_sum / loss_n if loss_n else float("nan")
        return MetricsRecord(int(seed), t, ret, ret_std, value, loss,
                             time.perf_counter() - start)

    records.append(snapshot(0))
    info["max_value_estimate"] = records[-1].mean_value_estimate
    frozen = None
    for t in range(1, config.iterations + 1):
        if frozen is None:
            calls = env.step_calls
            try:
                losses = agent.update(sample_minibatch(dataset, batch, sample_rng))
                agent.sync_target()
            except NumericError as err:
                log.warning("seed %s diverged at iteration %s: %s", seed, t, err)
                frozen = t
            else:
                loss_sum += losses["loss"]
                loss_n += 1
            info["training_env_calls"] += env.step_calls - calls
        if t % config.eval_interval == 0:
            if frozen is None:
                rec = snapshot(t)
                loss_sum, loss_n = 0.0, 0
                if not np.isfinite(rec.mean_value_estimate):
                    frozen = t
            if frozen is not None:
                last = next((r for r in reversed(records) if not r.diverged), records[0])
                rec = MetricsRecord(int(seed), t, last.mean_eval_return, last.return_std,
                                    last.mean_value_estimate, last.training_loss,
                                    time.perf_counter() - start, diverged=True)
                if not info["diverged"]:
                    info.update(diverged=True, divergence_iteration=frozen,
                                last_finite_value_estimate=last.mean_value_estimate)
            else:
                info["max_value_estimate"] = max(info["max_value_estimate"],
                                                 rec.mean_value_estimate)
            records.append(rec)
    if checkpoint_dir is not None:
        save_checkpoint(agent, checkpoint_dir)
    return records, info


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_metrics(records, path: Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in records:
        w.writerow([_fmt(getattr(r, k)) for k in METRIC_FIELDS])
    path.write_text(buf.getvalue())


def read_metrics(path: Path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no metric rows")
    return {k: np.array([float(r[k]) for r in rows]) for k in METRIC_FIELDS}


def write_timing(records, path: Path) -> None:
    lines = ["seed,iteration,wall_clock_seconds"]
    lines += [f"{r.seed},{r.iteration},{r.wall_clock_seconds:.3f}" for r in records]
    path.write_text("\n".join(lines) + "\n")


def _aggregate(series: list[dict]) -> dict:
    iters = series[0]["iteration"]
    for s in series[1:]:
        if not np.array_equal(s["iteration"], iters):
            raise ValueError("evaluation grids differ across seeds")
    ret = np.stack([s["mean_eval_return"] for s in series])
    val = np.stack([s["mean_value_estimate"] for s in series])
    return {"iteration": iters, "return_mean": ret.mean(0), "return_std": ret.std(0),
            "value_mean": val.mean(0), "value_std": val.std(0)}


def write_aggregate(series: list[dict], path: Path) -> None:
    agg = _aggregate(series)
    lines = ["# mean and population standard deviation across seeds",
             "iteration,return_mean,return_std,value_mean,value_std"]
    for i in range(len(agg["iteration"])):
        lines.append(",".join([_fmt(int(agg["iteration"][i]))] + [
            _fmt(agg[k][i]) for k in ("return_mean", "return_std", "value_mean", "value_std")]))
    path.write_text("\n".join(lines) + "\n")


def run_experiment(config: ExperimentConfig, dataset: BatchDataset | None = None,
                   policy: BehavioralPolicy | None = None, env: Environment | None = None) -> dict:
    """Run every seed of one (env, algorithm) cell and write its metrics files."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    env = env or make_env(config.env)
    if dataset is None:
        dataset, policy = prepare_dataset(config, env, out)
    _check_env(env, dataset)
    seeds_info, series = [], []
    for seed in config.seeds:
        ckpt = out / f"checkpoint_seed{seed}" if config.checkpoint else None
        records, info = run_seed(config, seed, env, dataset, policy, ckpt)
        write_metrics(records, out / f"metrics_seed{seed}.csv")
        write_timing(records, out / f"timing_seed{seed}.csv")
        series.append(read_metrics(out / f"metrics_seed{seed}.csv"))
        seeds_info.append(info)
    write_aggregate(series, out / "aggregate.csv")
    summary = {"env": env.name, "algorithm": config.algo, "config": config.to_dict(),
               "value_bound": env.spec.value_bound,
               "dataset_size": len(dataset), "coverage_holes": coverage_holes(env, dataset),
               "references": reference_returns(env, dataset, policy), "seeds": seeds_info}
    (out / "run.json").write_text(json.dumps(summary, indent=1, default=_json_default))
    return summary


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x))


# ---------------------------------------------------------------------------
# Suites and plot data
# ---------------------------------------------------------------------------

def sliding_window_mean(values, window: int = 5) -> np.ndarray:
    """Trailing mean over the last ``window`` points (shorter at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def final_windowed_return(series: dict, window: int = 5) -> float:
    return float(np.mean(series["mean_eval_return"][-window:]))


def _cell(args):
    cfg, env_name, dataset_path, policy_path = args
    env = make_env(env_name)
    dataset = load_dataset(dataset_path)
    policy = BehavioralPolicy.load(policy_path) if policy_path else None
    return run_experiment(cfg, dataset, policy, env)


def run_benchmark_suite(suite: SuiteConfig) -> list[dict]:
    """Run each algorithm on the shared batch of each environment and rank them.

    Writes ``summary.csv`` with one row per (env, algorithm) plus reference rows
    for the behavioral policy (noisy and greedy) and the oracle.
    """
    out = Path(suite.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs, refs = [], {}
    for env_name in suite.envs:
        env = make_env(env_name)
        env_dir = out / env_name
        gen = ExperimentConfig(env=env_name, algo="dqn", num_transitions=suite.num_transitions,
                               dataset_seed=suite.dataset_seed,
                               behavioral_steps=suite.behavioral_steps,
                               behavioral_seed=suite.behavioral_seed,
                               behavioral_config=suite.behavioral_config,
                               dataset=str(env_dir / "dataset.bin"), iterations=0,
                               require_coverage_hole=suite.require_coverage_hole,
                               eval_interval=1, seeds=[0], out=str(env_dir))
        dataset, policy = prepare_dataset(gen, env, env_dir)
        refs[env_name] = reference_returns(env, dataset, policy)
        for algo in suite.algorithms:
            agent = {**suite.agent, **suite.agent_overrides.get(algo, {})}
            cfg = ExperimentConfig(env=env_name, algo=algo, agent=agent,
                                   iterations=suite.iterations, eval_interval=suite.eval_interval,
                                   eval_episodes=suite.eval_episodes,
                                   eval_epsilon=suite.eval_epsilon, seeds=list(suite.seeds),
                                   value_estimate_minibatches=suite.value_estimate_minibatches,
                                   out=str(env_dir / algo))
            jobs.append((cfg, env_name, str(env_dir / "dataset.bin"),
                         str(env_dir / "dataset.behavioral.json")))
    if suite.jobs > 1:
        with ProcessPoolExecutor(suite.jobs) as pool:
            futures = [(job, pool.submit(_cell, job)) for job in jobs]
            outcomes = []
            for job, fut in futures:
                try:
                    outcomes.append((job, fut.result(), None))
                except Exception as err:  # recorded; the suite keeps going
                    outcomes.append((job, None, err))
    else:
        outcomes = []
        for job in jobs:
            try:
                outcomes.append((job, _cell(job), None))
            except Exception as err:
                log.exception("cell %s/%s failed", job[1], job[0].algo)
                outcomes.append((job, None, err))

    rows = []
    for job, summary, err in outcomes:
        cfg, env_name = job[0], job[1]
        row = {"env": env_name, "algorithm": cfg.algo, "kind": "agent"}
        if err is not None:
            row.update(final_windowed_return=float("nan"), std=float("nan"),
                       max_value_estimate=float("nan"), diverged_seeds=0, error=str(err))
        else:
            per_seed = [read_metrics(Path(cfg.out) / f"metrics_seed{s}.csv") for s in cfg.seeds]
            finals = [final_windowed_return(s, suite.window) for s in per_seed]
            row.update(final_windowed_return=float(np.mean(finals)), std=float(np.std(finals)),
                       max_value_estimate=max(i["max_value_estimate"] for i in summary["seeds"]),
                       diverged_seeds=sum(bool(i["diverged"]) for i in summary["seeds"]),
                       error="")
        rows.append(row)
    for env_name, r in refs.items():
        for name, value in r.items():
            rows.append({"env": env_name, "algorithm": name, "kind": "reference",
                         "final_windowed_return": value, "std": 0.0,
                         "max_value_estimate": float("nan"), "diverged_seeds": 0, "error": ""})
    rows.sort(key=lambda r: (r["env"], -np.nan_to_num(r["final_windowed_return"], nan=-np.inf)))
    cols = ["env", "rank", "algorithm", "kind", "final_windowed_return", "std",
            "max_value_estimate", "diverged_seeds", "error"]
    lines = [f"# final return = mean over seeds of the last {suite.window} evaluations",
             ",".join(cols)]
    rank = {}
    for r in rows:
        rank[r["env"]] = rank.get(r["env"], 0) + 1
        r["rank"] = rank[r["env"]]
        lines.append(",".join(_fmt(r[c]) if isinstance(r[c], (int, float)) else str(r[c])
                              for c in cols))
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    return rows


def _find_runs(metrics_dir: Path):
    runs = []
    for run_json in sorted(metrics_dir.rglob("run.json")):
        info = json.loads(run_json.read_text())
        runs.append((run_json.parent, info))
    if not runs and any(metrics_dir.glob("metrics_seed*.csv")):
        runs.append((metrics_dir, {"env": "env", "algorithm": metrics_dir.name}))
    return runs


def emit_plot_data(metrics_dir, out_dir=None, clip: float = 100.0, window: int = 5,
                   figures: bool = True) -> list[Path]:
    """Per (env, algorithm) series files with seed mean / std, smoothed returns and
    display-clipped value estimates; optionally renders the figures next to them."""
    metrics_dir = Path(metrics_dir)
    out_dir = Path(out_dir) if out_dir is not None else metrics_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = _find_runs(metrics_dir)
    if not runs:
        raise FileNotFoundError(f"no metrics files under {metrics_dir}")
    written, by_env = [], {}
    for run_dir, info in runs:
        files = sorted(run_dir.glob("metrics_seed*.csv"))
        if not files:
            continue
        series = [read_metrics(f) for f in files]
        agg = _aggregate(series)
        smooth = sliding_window_mean(agg["return_mean"], window)
        clipped = np.clip(agg["value_mean"], -clip, clip)
        clipped_std = np.minimum(agg["value_std"], clip)
        env_name, algo = info.get("env", "env"), info.get("algorithm", run_dir.name)
        path = out_dir / f"plot_{env_name}_{algo}.csv"
        lines = [f"# seeds={len(series)}; std is the population std across seeds; "
                 f"return_smoothed = trailing mean over {window} evaluations; "
                 f"value_display clipped to +/-{clip:g}",
                 "iteration,return_mean,return_std,return_smoothed,value_mean,value_std,"
                 "value_display,value_display_std"]
        for i in range(len(agg["iteration"])):
            vals = [agg["return_mean"][i], agg["return_std"][i], smooth[i], agg["value_mean"][i],
                    agg["value_std"][i], clipped[i], clipped_std[i]]
            lines.append(",".join([_fmt(int(agg["iteration"][i]))] + [_fmt(v) for v in vals]))
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
        by_env.setdefault(env_name, []).append((algo, agg, smooth, clipped, clipped_std,
                                                info.get("references", {})))
    if figures:
        from .plotting import render_figures
        written += render_figures(by_env, out_dir, window=window, clip=clip)
    return written
