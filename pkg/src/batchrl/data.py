"""Fixed batches of experience: behavioral policy, generation, sampling and storage."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .mdp import Environment, expected_return

__all__ = [
    "Transition",
    "Minibatch",
    "BatchDataset",
    "BehavioralPolicy",
    "BehavioralConfig",
    "DatasetFormatError",
    "train_behavioral",
    "generate_batch",
    "sample_minibatch",
    "state_action_counts",
    "save_dataset",
    "load_dataset",
]


class Transition(NamedTuple):
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass(frozen=True, eq=False)
class Minibatch:
    """Struct-of-arrays view of sampled transitions (observations plus state ids)."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    states: np.ndarray | None = None
    next_states: np.ndarray | None = None

    def __len__(self):
        return len(self.actions)

    def transitions(self) -> list[Transition]:
        return [Transition(self.obs[i], int(self.actions[i]), float(self.rewards[i]),
                           self.next_obs[i], bool(self.dones[i])) for i in range(len(self))]

    @classmethod
    def from_transitions(cls, transitions, states=None, next_states=None) -> "Minibatch":
        return cls(np.array([t.state for t in transitions], dtype=np.float64),
                   np.array([t.action for t in transitions], dtype=np.int64),
                   np.array([t.reward for t in transitions], dtype=np.float64),
                   np.array([t.next_state for t in transitions], dtype=np.float64),
                   np.array([t.done for t in transitions], dtype=bool),
                   None if states is None else np.asarray(states),
                   None if next_states is None else np.asarray(next_states))


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BatchDataset:
    """Immutable ordered transitions over a tabular environment.

    States are stored as ids; observations come from the ``features`` table.
    ``done`` marks true termination only, never truncation.
    """

    env_name: str
    descriptor: str
    seed: int
    features: np.ndarray
    num_actions: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    episode_ids: np.ndarray
    episode_epsilons: np.ndarray

    def __post_init__(self):
        n = len(self.actions)
        if n == 0:
            raise ValueError("a dataset needs at least one transition")
        for name, dtype in (("features", np.float64), ("states", np.int32), ("actions", np.int32),
                            ("rewards", np.float64), ("next_states", np.int32), ("dones", bool),
                            ("episode_ids", np.int32), ("episode_epsilons", np.float64)):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype))
        S = self.features.shape[0]
        for name in ("states", "next_states", "rewards", "dones", "episode_ids"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from actions")
        if np.any(self.actions < 0) or np.any(self.actions >= self.num_actions):
            raise ValueError("action index out of range")
        for arr in (self.states, self.next_states):
            if np.any(arr < 0) or np.any(arr >= S):
                raise ValueError("state index out of range")

    def __len__(self):
        return len(self.actions)

    def __eq__(self, other):
        if not isinstance(other, BatchDataset):
            return NotImplemented
        return (self.env_name == other.env_name and self.descriptor == other.descriptor
                and self.seed == other.seed and self.num_actions == other.num_actions
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("features", "states", "actions", "rewards", "next_states",
                                  "dones", "episode_ids", "episode_epsilons")))

    @property
    def num_states(self) -> int:
        return self.features.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_tabular(self) -> bool:
        f = self.features
        return f.shape[0] == f.shape[1] and np.array_equal(f, np.eye(f.shape[0]))

    @cached_property
    def counts(self) -> np.ndarray:
        c = np.zeros((self.num_states, self.num_actions), dtype=np.int64)
        np.add.at(c, (self.states, self.actions), 1)
        c.setflags(write=False)
        return c

    def transition(self, i: int) -> Transition:
        return Transition(self.features[self.states[i]], int(self.actions[i]),
                          float(self.rewards[i]), self.features[self.next_states[i]],
                          bool(self.dones[i]))

    @property
    def transitions(self) -> list[Transition]:
        return [self.transition(i) for i in range(len(self))]

    def take(self, idx) -> Minibatch:
        s, s2 = self.states[idx], self.next_states[idx]
        return Minibatch(self.features[s], self.actions[idx].astype(np.int64), self.rewards[idx],
                         self.features[s2], self.dones[idx], s, s2)


def sample_minibatch(dataset: BatchDataset, size: int, rng: np.random.Generator) -> Minibatch:
    """Uniform sampling with replacement."""
    if dataset is None or len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    if size <= 0:
        raise ValueError("minibatch size must be positive")
    return dataset.take(rng.integers(0, len(dataset), size=size))


def state_action_counts(dataset: BatchDataset) -> np.ndarray:
    """Exact visit counts ``n(s, a)``; only defined for one-hot observations."""
    if not dataset.is_tabular:
        raise NotImplementedError("state-action counts need tabular (one-hot) observations")
    return dataset.counts


# ---------------------------------------------------------------------------
# Behavioral policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BehavioralPolicy:
    """Greedy policy of a frozen Q table with a per-episode epsilon mixture.

    Each episode draws ``eps_high`` with probability ``p_high`` and ``eps_low``
    otherwise, and keeps that epsilon for the whole episode.
    """

    q_values: np.ndarray
    eps_high: float = 0.2
    eps_low: float = 0.001
    p_high: float = 0.8
    name: str = "behavioral"

    def __post_init__(self):
        object.__setattr__(self, "q_values", _frozen(self.q_values, np.float64))

    @property
    def num_actions(self) -> int:
        return self.q_values.shape[1]

    @cached_property
    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.q_values, axis=1)

    @property
    def descriptor(self) -> str:
        return (f"{self.name}:greedy-q eps={self.eps_high:g}@p{self.p_high:g}"
                f"/{self.eps_low:g}")

    def sample_epsilon(self, rng: np.random.Generator) -> float:
        return self.eps_high if rng.random() < self.p_high else self.eps_low

    def act(self, state: int, epsilon: float, rng: np.random.Generator) -> int:
        if rng.random() < epsilon:
            return int(rng.integers(self.num_actions))
        return int(self.greedy_actions[state])

    def action_probs(self, epsilon: float) -> np.ndarray:
        S, A = self.q_values.shape
        pi = np.full((S, A), epsilon / A)
        pi[np.arange(S), self.greedy_actions] += 1.0 - epsilon
        return pi

    def mixture_probs(self) -> np.ndarray:
        """State-wise average of the two epsilon-greedy policies under the mixture."""
        return (self.p_high * self.action_probs(self.eps_high)
                + (1.0 - self.p_high) * self.action_probs(self.eps_low))

    def expected_return(self, env: Environment) -> float:
        """Exact undiscounted capped return of the noisy (mixture) behavior."""
        hi = expected_return(env.spec, self.action_probs(self.eps_high), env.max_steps)
        lo = expected_return(env.spec, self.action_probs(self.eps_low), env.max_steps)
        return self.p_high * hi + (1.0 - self.p_high) * lo

    def greedy_return(self, env: Environment) -> float:
        return expected_return(env.spec, self.action_probs(0.0), env.max_steps)

    def to_dict(self) -> dict:
        return {"name": self.name, "eps_high": self.eps_high, "eps_low": self.eps_low,
                "p_high": self.p_high, "q_values": self.q_values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BehavioralPolicy":
        return cls(np.array(d["q_values"], dtype=np.float64), d["eps_high"], d["eps_low"],
                   d["p_high"], d.get("name", "behavioral"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "BehavioralPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class BehavioralConfig:
    """Online DQN used to produce the partially-trained behavioral Q."""

    hidden_sizes: tuple = (32,)
    learning_rate: float = 1e-3
    adam_epsilon: float = 1.5e-4
    batch_size: int = 32
    buffer_size: int = 100_000
    warmup_steps: int = 200
    train_every: int = 1
    target_update_rate: int = 200
    eps_initial: float = 1.0
    eps_final: float = 0.01
    eps_decay_steps: int = 1_000
    kappa: float = 1.0
    # "Partially trained": stop at this fraction of the env's near-oracle budget.
    partial_fraction: float = 0.25


def train_behavioral(env: Environment, steps: int | None = None,
                     config: BehavioralConfig | None = None, seed: int = 0,
                     name: str = "behavioral") -> BehavioralPolicy:
    """Train a DQN online for ``steps`` environment steps and freeze its greedy Q.

    ``steps=None`` uses ``partial_fraction`` of ``env.behavioral_solve_steps``.
    """
    from .agents import AgentConfig, make_agent
    from .nn import NumericError

    config = config or BehavioralConfig()
    if steps is None:
        steps = int(round(config.partial_fraction * env.behavioral_solve_steps))
    if steps <= 0:
        raise ValueError("behavioral training needs a positive number of steps")
    root = np.random.SeedSequence(seed)
    init_ss, env_ss, sample_ss = root.spawn(3)
    env_rng = np.random.default_rng(env_ss)
    sample_rng = np.random.default_rng(sample_ss)
    agent = make_agent(AgentConfig(algorithm="dqn", discount=env.spec.discount,
                                   hidden_sizes=tuple(config.hidden_sizes),
                                   learning_rate=config.learning_rate,
                                   adam_epsilon=config.adam_epsilon,
                                   batch_size=config.batch_size, kappa=config.kappa,
                                   target_update_rate=config.target_update_rate),
                       env.obs_dim, env.num_actions, seed=init_ss)

    cap = min(config.buffer_size, steps)
    buf_s = np.zeros(cap, dtype=np.int32)
    buf_a = np.zeros(cap, dtype=np.int64)
    buf_r = np.zeros(cap)
    buf_s2 = np.zeros(cap, dtype=np.int32)
    buf_d = np.zeros(cap, dtype=bool)
    size = ptr = 0
    features = env.features
    episode = env.episode(env_rng)
    for t in range(steps):
        frac = min(1.0, t / max(1, config.eps_decay_steps))
        eps = config.eps_initial + frac * (config.eps_final - config.eps_initial)
        s = episode.state
        if t < config.warmup_steps or env_rng.random() < eps:
            a = int(env_rng.integers(env.num_actions))
        else:
            a = int(np.argmax(agent.q_values(features[s])))
        res = episode.step(a)
        buf_s[ptr], buf_a[ptr], buf_r[ptr] = s, a, res.reward
        buf_s2[ptr], buf_d[ptr] = res.next_state, res.done
        ptr = (ptr + 1) % cap
        size = min(size + 1, cap)
        if episode.finished:
            episode = env.episode(env_rng)
        if t >= config.warmup_steps and t % config.train_every == 0:
            idx = sample_rng.integers(0, size, size=config.batch_size)
            mb = Minibatch(features[buf_s[idx]], buf_a[idx], buf_r[idx], features[buf_s2[idx]],
                           buf_d[idx], buf_s[idx], buf_s2[idx])
            try:
                agent.update(mb)
            except NumericError as err:
                raise NumericError(f"behavioral DQN diverged on {env.name}", t) from err
            agent.sync_target()
    return BehavioralPolicy(agent.q_values(features), name=name)


def generate_batch(env: Environment, policy: BehavioralPolicy, num_transitions: int,
                   seed: int = 0, epsilon: float | None = None) -> BatchDataset:
    """Roll the behavioral policy until ``num_transitions`` are collected.

    ``epsilon`` overrides the per-episode mixture with a fixed value.
    """
    if num_transitions <= 0:
        raise ValueError("num_transitions must be positive")
    rng = np.random.default_rng(seed)
    n = int(num_transitions)
    states = np.empty(n, dtype=np.int32)
    actions = np.empty(n, dtype=np.int32)
    rewards = np.empty(n)
    next_states = np.empty(n, dtype=np.int32)
    dones = np.empty(n, dtype=bool)
    ep_ids = np.empty(n, dtype=np.int32)
    ep_eps: list[float] = []
    greedy = policy.greedy_actions
    A = env.num_actions
    i = 0
    while i < n:
        eps = policy.sample_epsilon(rng) if epsilon is None else float(epsilon)
        ep_eps.append(eps)
        episode = env.episode(rng)
        while not episode.finished and i < n:
            s = episode.state
            a = int(rng.integers(A)) if rng.random() < eps else int(greedy[s])
            res = episode.step(a)
            states[i], actions[i], rewards[i] = s, a, res.reward
            next_states[i], dones[i], ep_ids[i] = res.next_state, res.done, len(ep_eps) - 1
            i += 1
    descriptor = policy.descriptor if epsilon is None else f"{policy.name}:greedy-q eps={epsilon:g}"
    return BatchDataset(env.name, descriptor, int(seed), env.features, A, states, actions,
                        rewards, next_states, dones, ep_ids, np.array(ep_eps))


# ---------------------------------------------------------------------------
# Binary format (little-endian):
#   "BRLB", u32 version, u32 len + env name, i64 seed, u64 transition count,
#   u32 obs dim, u32 num states, u32 num actions, u32 len + descriptor,
#   u64 episode count, f64 features[S*d], f64 episode eps[E], i64 counts[S*A],
#   then packed records (i32 s, i32 a, f64 r, i32 s', u8 done, i32 episode).
# ---------------------------------------------------------------------------

_MAGIC = b"BRLB"
_VERSION = 1
_RECORD = np.dtype([("s", "<i4"), ("a", "<i4"), ("r", "<f8"), ("s2", "<i4"), ("done", "u1"),
                    ("ep", "<i4")])


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


def save_dataset(dataset: BatchDataset, path) -> None:
    name = dataset.env_name.encode()
    desc = dataset.descriptor.encode()
    S, d = dataset.features.shape
    parts = [
        struct.pack("<4sII", _MAGIC, _VERSION, len(name)), name,
        struct.pack("<qQIIII", dataset.seed, len(dataset), d, S, dataset.num_actions, len(desc)),
        desc,
        struct.pack("<Q", len(dataset.episode_epsilons)),
        dataset.features.astype("<f8").tobytes(),
        dataset.episode_epsilons.astype("<f8").tobytes(),
        dataset.counts.astype("<i8").tobytes(),
    ]
    rec = np.empty(len(dataset), dtype=_RECORD)
    rec["s"], rec["a"], rec["r"] = dataset.states, dataset.actions, dataset.rewards
    rec["s2"], rec["done"], rec["ep"] = dataset.next_states, dataset.dones, dataset.episode_ids
    parts.append(rec.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise DatasetFormatError(f"truncated file while reading {what}", self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_dataset(path) -> BatchDataset:
    rd = _Reader(Path(path).read_bytes())
    magic, version, name_len = rd.unpack("<4sII", "header")
    if magic != _MAGIC:
        raise DatasetFormatError("bad magic bytes", 0)
    if version != _VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    name = rd.take(name_len, "env name").decode()
    seed_pos = rd.pos
    seed, count, d, S, A, desc_len = rd.unpack("<qQIIII", "header")
    if count == 0:
        raise DatasetFormatError("dataset declares zero transitions", seed_pos + 8)
    desc = rd.take(desc_len, "descriptor").decode()
    (n_eps,) = rd.unpack("<Q", "episode count")
    features = np.frombuffer(rd.take(8 * S * d, "features"), "<f8").reshape(S, d)
    ep_eps = np.frombuffer(rd.take(8 * n_eps, "episode epsilons"), "<f8")
    counts_pos = rd.pos
    counts = np.frombuffer(rd.take(8 * S * A, "counts"), "<i8").reshape(S, A)
    rec_pos = rd.pos
    remaining = len(rd.raw) - rec_pos
    if remaining != count * _RECORD.itemsize:
        raise DatasetFormatError(
            f"header declares {count} transitions but {remaining} record bytes follow "
            f"({remaining / _RECORD.itemsize:g} records)", rec_pos)
    rec = np.frombuffer(rd.raw, dtype=_RECORD, count=count, offset=rec_pos)
    try:
        ds = BatchDataset(name, desc, seed, features, A, rec["s"], rec["a"], rec["r"], rec["s2"],
                          rec["done"].astype(bool), rec["ep"], ep_eps)
    except ValueError as err:
        raise DatasetFormatError(f"invalid records ({err})", rec_pos) from err
    if not np.array_equal(ds.counts, counts):
        raise DatasetFormatError("stored state-action counts disagree with records", counts_pos)
    return ds
