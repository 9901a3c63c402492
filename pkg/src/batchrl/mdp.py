"""Small discrete MDPs with known dynamics and an exact dynamic-programming oracle."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

__all__ = [
    "MdpSpec",
    "Environment",
    "Episode",
    "StepResult",
    "bellman_optimality_backup",
    "bellman_policy_backup",
    "value_iteration",
    "policy_evaluation",
    "greedy_policy",
    "expected_return",
    "chain",
    "gridworld",
    "make_env",
    "register_env",
    "registered_envs",
    "load_spec",
    "save_spec",
]

_PROB_TOL = 1e-12


def _readonly(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MdpSpec:
    """Tabular MDP: ``transition[s, a, s']``, ``reward[s, a, s']``.

    Terminal states are absorbing with zero reward.
    """

    num_states: int
    num_actions: int
    transition: np.ndarray
    reward: np.ndarray
    discount: float
    terminal: frozenset = frozenset()
    initial_distribution: np.ndarray | None = None

    def __post_init__(self):
        S, A = int(self.num_states), int(self.num_actions)
        if S <= 0 or A <= 0:
            raise ValueError("num_states and num_actions must be positive")
        p = _readonly(self.transition)
        r = _readonly(self.reward)
        if p.shape != (S, A, S) or r.shape != (S, A, S):
            raise ValueError(f"transition/reward must have shape {(S, A, S)}")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=2) - 1.0)) > _PROB_TOL:
            raise ValueError("every transition row must be a distribution summing to 1")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        terminal = frozenset(int(t) for t in self.terminal)
        if any(t < 0 or t >= S for t in terminal):
            raise ValueError("terminal state id out of range")
        for t in terminal:
            if np.any(p[t, :, t] != 1.0) or np.any(r[t] != 0.0):
                raise ValueError(f"terminal state {t} must be absorbing with zero reward")
        d0 = self.initial_distribution
        d0 = np.full(S, 1.0 / S) if d0 is None else d0
        d0 = _readonly(d0)
        if d0.shape != (S,) or np.any(d0 < 0) or abs(d0.sum() - 1.0) > _PROB_TOL:
            raise ValueError("initial_distribution must be a distribution over states")
        object.__setattr__(self, "num_states", S)
        object.__setattr__(self, "num_actions", A)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "discount", float(self.discount))
        object.__setattr__(self, "terminal", terminal)
        object.__setattr__(self, "initial_distribution", d0)

    @property
    def terminal_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_states, dtype=bool)
        mask[list(self.terminal)] = True
        return mask

    @property
    def expected_reward(self) -> np.ndarray:
        """``E[r | s, a]`` as an ``[S, A]`` table."""
        return np.einsum("ijk,ijk->ij", self.transition, self.reward)

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.reward)))

    @property
    def value_bound(self) -> float:
        """Largest attainable magnitude of a discounted return."""
        return self.r_max / (1.0 - self.discount)

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "discount": self.discount,
            "terminal": sorted(self.terminal),
            "initial_distribution": self.initial_distribution.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MdpSpec":
        keys = ("num_states", "num_actions", "transition", "reward", "discount",
                "terminal", "initial_distribution")
        missing = [k for k in keys if k not in d]
        if missing:
            raise ValueError(f"MDP description missing keys: {missing}")
        return cls(**{k: d[k] for k in keys})


def save_spec(spec: MdpSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=1))


def load_spec(path) -> MdpSpec:
    return MdpSpec.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Dynamic-programming oracle
# ---------------------------------------------------------------------------

def _check_q(q, spec: MdpSpec) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (spec.num_states, spec.num_actions):
        raise ValueError(f"Q table shape {q.shape} does not match MDP "
                         f"{(spec.num_states, spec.num_actions)}")
    return q


def _backup(spec: MdpSpec, next_values: np.ndarray) -> np.ndarray:
    next_values = np.where(spec.terminal_mask, 0.0, next_values)
    return spec.expected_reward + spec.discount * spec.transition @ next_values


def bellman_optimality_backup(q, spec: MdpSpec) -> np.ndarray:
    """One exact application of the optimality operator."""
    q = _check_q(q, spec)
    return _backup(spec, q.max(axis=1))


def bellman_policy_backup(q, policy, spec: MdpSpec) -> np.ndarray:
    """One exact application of the evaluation operator for ``policy[s, a]``."""
    q = _check_q(q, spec)
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != q.shape:
        raise ValueError("policy table shape does not match Q table")
    if np.any(policy < 0) or np.max(np.abs(policy.sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError("every policy row must sum to 1")
    return _backup(spec, np.sum(policy * q, axis=1))


def value_iteration(spec: MdpSpec, tolerance: float = 1e-8, max_iterations: int = 1_000_000):
    """Iterate the optimality backup until the max-norm change drops below ``tolerance``.

    The returned table is the last backup, so re-applying the backup moves it by
    less than ``tolerance``.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    q = np.zeros((spec.num_states, spec.num_actions))
    for _ in range(max_iterations):
        new_q = bellman_optimality_backup(q, spec)
        if np.max(np.abs(new_q - q)) < tolerance * (1.0 - spec.discount):
            return new_q
        q = new_q
    return q


def policy_evaluation(spec: MdpSpec, policy, tolerance: float = 1e-8, max_iterations: int = 1_000_000):
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    q = np.zeros((spec.num_states, spec.num_actions))
    for _ in range(max_iterations):
        new_q = bellman_policy_backup(q, policy, spec)
        if np.max(np.abs(new_q - q)) < tolerance * (1.0 - spec.discount):
            return new_q
        q = new_q
    return q


def greedy_policy(q) -> np.ndarray:
    """Deterministic greedy policy table; ties go to the lowest action index."""
    q = np.asarray(q)
    pi = np.zeros_like(q, dtype=np.float64)
    pi[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return pi


def expected_return(spec: MdpSpec, policy, horizon: int, discount: float = 1.0) -> float:
    """Exact expected return of ``policy`` over episodes capped at ``horizon`` steps.

    Propagates the state distribution forward, so this is the quantity a Monte-Carlo
    evaluation rollout estimates.  ``discount=1`` gives the undiscounted score.
    """
    policy = np.asarray(policy, dtype=np.float64)
    live = ~spec.terminal_mask
    d = spec.initial_distribution * live
    r_sa = spec.expected_reward
    total = 0.0
    for t in range(horizon):
        if not d.any():
            break
        sa = d[:, None] * policy
        total += discount ** t * float(np.sum(sa * r_sa))
        d = np.einsum("ij,ijk->k", sa, spec.transition) * live
    return total


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------

class StepResult(NamedTuple):
    next_state: int
    reward: float
    done: bool
    truncated: bool = False


@dataclass(eq=False)
class Environment:
    """An :class:`MdpSpec` plus observation features and an episode cap.

    ``step`` is a pure function of its arguments; the only mutable field is the
    ``step_calls`` counter, used to prove offline training never touches the env.
    """

    name: str
    spec: MdpSpec
    max_steps: int = 200
    features: np.ndarray | None = None
    clip_rewards: bool = False
    behavioral_solve_steps: int = 20_000
    step_calls: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.features is None:
            self.features = np.eye(self.spec.num_states)
        self.features = _readonly(self.features)
        if self.features.ndim != 2 or self.features.shape[0] != self.spec.num_states:
            raise ValueError("features must be an [num_states, dim] matrix")
        cdf = np.cumsum(self.spec.transition, axis=2)
        cdf[..., -1] = 1.0
        self._cdf = cdf
        self._d0_cdf = np.cumsum(self.spec.initial_distribution)
        self._d0_cdf[-1] = 1.0
        self._terminal = self.spec.terminal_mask

    @property
    def num_states(self) -> int:
        return self.spec.num_states

    @property
    def num_actions(self) -> int:
        return self.spec.num_actions

    @property
    def obs_dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_tabular(self) -> bool:
        f = self.features
        return f.shape[1] == f.shape[0] and np.array_equal(f, np.eye(f.shape[0]))

    def observe(self, state: int) -> np.ndarray:
        return self.features[state]

    def is_terminal(self, state: int) -> bool:
        return bool(self._terminal[state])

    def reset(self, rng: np.random.Generator) -> int:
        return int(np.searchsorted(self._d0_cdf, rng.random(), side="right"))

    def step(self, state: int, action: int, rng: np.random.Generator) -> StepResult:
        if not 0 <= state < self.spec.num_states:
            raise ValueError(f"invalid state {state}")
        if not 0 <= action < self.spec.num_actions:
            raise ValueError(f"invalid action {action}")
        self.step_calls += 1
        nxt = int(np.searchsorted(self._cdf[state, action], rng.random(), side="right"))
        reward = float(self.spec.reward[state, action, nxt])
        if self.clip_rewards:
            reward = min(1.0, max(-1.0, reward))
        return StepResult(nxt, reward, bool(self._terminal[nxt]))

    def episode(self, rng: np.random.Generator) -> "Episode":
        return Episode(self, rng)

    def oracle_q(self, tolerance: float = 1e-10) -> np.ndarray:
        return value_iteration(self.spec, tolerance)

    def optimal_return(self) -> float:
        """Undiscounted capped-episode return of the oracle's greedy policy."""
        return expected_return(self.spec, greedy_policy(self.oracle_q()), self.max_steps)


class Episode:
    """Per-episode cursor: tracks the current state and distinguishes truncation."""

    def __init__(self, env: Environment, rng: np.random.Generator):
        self.env = env
        self.rng = rng
        self.state = env.reset(rng)
        self.t = 0
        self.finished = env.is_terminal(self.state)

    def step(self, action: int) -> StepResult:
        if self.finished:
            raise RuntimeError("episode already finished")
        res = self.env.step(self.state, action, self.rng)
        self.t += 1
        self.state = res.next_state
        truncated = not res.done and self.t >= self.env.max_steps
        self.finished = res.done or truncated
        return res._replace(truncated=truncated)


# ---------------------------------------------------------------------------
# Shipped MDPs
# ---------------------------------------------------------------------------

def chain(length: int = 5, discount: float = 0.99, goal_reward: float = 1.0) -> MdpSpec:
    """``length`` non-terminal states in a line plus an absorbing goal.

    Action 0 moves back (staying put at the left end), action 1 moves forward.
    Only the transition into the goal is rewarded.
    """
    S = length + 1
    goal = length
    p = np.zeros((S, 2, S))
    r = np.zeros((S, 2, S))
    for s in range(length):
        p[s, 0, max(s - 1, 0)] = 1.0
        p[s, 1, s + 1] = 1.0
    r[length - 1, 1, goal] = goal_reward
    p[goal, :, goal] = 1.0
    d0 = np.zeros(S)
    d0[0] = 1.0
    return MdpSpec(S, 2, p, r, discount, frozenset({goal}), d0)


_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))  # up, right, down, left


def gridworld(rows: int, cols: int, start, goal, *, cliff=(), walls=(), slip: float = 0.0,
              goal_reward: float = 1.0, cliff_reward: float = -1.0, step_reward: float = 0.0,
              discount: float = 0.99) -> MdpSpec:
    """Four-action gridworld.

    Entering the goal or a cliff cell ends the episode.  With probability ``slip``
    the agent moves in one of the two perpendicular directions instead.
    Moving into a wall or the border leaves the agent in place.
    """
    n_cells = rows * cols
    goal_id = goal[0] * cols + goal[1]
    cliff_ids = {r * cols + c for r, c in cliff}
    wall_ids = {r * cols + c for r, c in walls}
    S = n_cells
    p = np.zeros((S, 4, S))
    rew = np.zeros((S, 4, S))
    terminal = {goal_id} | cliff_ids

    def move(cell, d):
        r, c = divmod(cell, cols)
        dr, dc = _MOVES[d]
        nr, nc = r + dr, c + dc
        if not (0 <= nr < rows and 0 <= nc < cols) or nr * cols + nc in wall_ids:
            return cell
        return nr * cols + nc

    for s in range(S):
        if s in terminal or s in wall_ids:
            p[s, :, s] = 1.0
            continue
        for a in range(4):
            outcomes = [(a, 1.0 - slip), ((a + 1) % 4, slip / 2), ((a + 3) % 4, slip / 2)]
            for d, prob in outcomes:
                if prob == 0.0:
                    continue
                s2 = move(s, d)
                p[s, a, s2] += prob
                if s2 == goal_id:
                    rew[s, a, s2] = goal_reward
                elif s2 in cliff_ids:
                    rew[s, a, s2] = cliff_reward
                else:
                    rew[s, a, s2] = step_reward
    d0 = np.zeros(S)
    d0[start[0] * cols + start[1]] = 1.0
    return MdpSpec(S, 4, p, rew, discount, frozenset(terminal), d0)


_REGISTRY: dict[str, Callable[..., Environment]] = {}


def register_env(name: str, factory: Callable[..., Environment]) -> None:
    _REGISTRY[name] = factory


def registered_envs() -> list[str]:
    return sorted(_REGISTRY)


def make_env(name: str, **kwargs) -> Environment:
    """Build a registered environment, or load a custom one from a ``.json`` MDP file."""
    if name in _REGISTRY:
        return _REGISTRY[name](**kwargs)
    if name.endswith(".json") and Path(name).exists():
        return Environment(Path(name).stem, load_spec(name), **kwargs)
    raise KeyError(f"unknown environment {name!r}; known: {registered_envs()}")


def _chain_env(length: int = 5, discount: float = 0.99, max_steps: int = 200, **kw):
    return Environment(f"chain{length}" if length != 5 else "chain", chain(length, discount),
                       max_steps=max_steps, behavioral_solve_steps=16_000, **kw)


def _cliff_env(discount: float = 0.99, max_steps: int = 200, **kw):
    spec = gridworld(4, 7, start=(3, 0), goal=(3, 6), cliff=[(3, c) for c in range(1, 6)],
                     step_reward=-0.01, discount=discount)
    return Environment("cliff", spec, max_steps=max_steps, behavioral_solve_steps=32_000, **kw)


def _stochastic_grid_env(discount: float = 0.99, max_steps: int = 200, slip: float = 0.2, **kw):
    spec = gridworld(5, 5, start=(4, 0), goal=(0, 4), cliff=[(2, 2)], walls=[(1, 1), (3, 3)],
                     slip=slip, step_reward=-0.01, discount=discount)
    return Environment("stochastic_grid", spec, max_steps=max_steps,
                       behavioral_solve_steps=32_000, **kw)


register_env("chain", _chain_env)
register_env("cliff", _cliff_env)
register_env("stochastic_grid", _stochastic_grid_env)
