"""Discrete-action batch reinforcement learning at desk scale."""

from .agents import ALGORITHMS, AgentConfig, make_agent
from .data import (BatchDataset, BehavioralPolicy, generate_batch, load_dataset,
                   sample_minibatch, save_dataset, train_behavioral)
from .harness import ExperimentConfig, SuiteConfig, emit_plot_data, run_benchmark_suite, run_experiment
from .mdp import Environment, MdpSpec, make_env, value_iteration

__all__ = [
    "ALGORITHMS", "AgentConfig", "make_agent",
    "BatchDataset", "BehavioralPolicy", "generate_batch", "load_dataset", "sample_minibatch",
    "save_dataset", "train_behavioral",
    "ExperimentConfig", "SuiteConfig", "emit_plot_data", "run_benchmark_suite", "run_experiment",
    "Environment", "MdpSpec", "make_env", "value_iteration",
]

__version__ = "0.1.0"
