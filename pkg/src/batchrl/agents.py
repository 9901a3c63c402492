"""Discrete-action batch RL agents: DQN, QR-DQN, REM, BCQ, KL-Control and SPIBB-DQN.

Every agent owns an online model, a target copy, one optimizer state and a
private random stream.  ``update`` performs one gradient step on a minibatch;
the trainer calls ``sync_target`` after every update.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import Minibatch
from .nn import (AdamState, DenseNet, NumericError, adam_step, clip_by_norm, cross_entropy_loss,
                 dropout_masks, huber_loss, log_softmax, logsumexp, quantile_huber_loss, read_net,
                 sgd_step, softmax, write_net)

__all__ = [
    "ALGORITHMS",
    "AgentConfig",
    "Model",
    "Agent",
    "DQNAgent",
    "QRDQNAgent",
    "REMAgent",
    "BCQAgent",
    "KLControlAgent",
    "SPIBBAgent",
    "make_agent",
    "save_checkpoint",
    "load_checkpoint",
    "bcq_constrained_argmax",
    "klcontrol_policy",
    "klcontrol_target",
    "spibb_policy",
    "quantile_midpoints",
    "sample_simplex",
]

ALGORITHMS = ("dqn", "qrdqn", "rem", "bcq", "klcontrol", "spibb")


@dataclass
class AgentConfig:
    """Hyper-parameters.  Defaults are the Atari-scale values; desk runs override
    ``target_update_rate``, head counts and the learning rate through config files."""

    algorithm: str = "dqn"
    discount: float = 0.99
    target_update_rate: int = 8000
    batch_size: int = 32
    kappa: float = 1.0
    eval_epsilon: float = 0.001
    learning_rate: float = 6.25e-5
    adam_epsilon: float = 1.5e-4
    optimizer: str = "adam"
    hidden_sizes: tuple = (64, 64)
    use_bias: bool = True
    share_encoder: bool | None = None
    double_q: bool = False
    num_quantiles: int = 50
    num_heads: int = 200
    bcq_threshold: float = 0.3
    kl_masks: int = 5
    kl_weight: float = 2.0
    kl_grad_clip: float = 1.0
    dropout: float = 0.2
    kl_policy: str = "argmax"
    spibb_count_threshold: float = 10.0
    spibb_sample_next: bool = False
    bc_penalty: float = 0.01

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if not 0.0 <= self.bcq_threshold <= 1.0:
            raise ValueError("bcq_threshold must lie in [0, 1]")
        for name in ("target_update_rate", "batch_size", "num_quantiles", "num_heads", "kl_masks"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kappa <= 0 or self.learning_rate <= 0:
            raise ValueError("kappa and learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.kl_policy not in ("argmax", "boltzmann"):
            raise ValueError("kl_policy must be 'argmax' or 'boltzmann'")
        if self.share_encoder is None:
            self.share_encoder = self.algorithm in ("bcq", "klcontrol")

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown agent config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


# ---------------------------------------------------------------------------
# Model: optional shared encoder, a Q head and an optional generative head,
# all parameters in one flat vector.
# ---------------------------------------------------------------------------

class Model:
    def __init__(self, obs_dim: int, num_actions: int, q_heads: int = 1, generative: bool = False,
                 hidden_sizes=(64, 64), share_encoder: bool = False, use_bias: bool = True,
                 rng: np.random.Generator | None = None, params: np.ndarray | None = None):
        self.obs_dim, self.num_actions, self.q_heads = obs_dim, num_actions, q_heads
        self.generative, self.share_encoder = generative, bool(share_encoder and generative)
        self.hidden_sizes, self.use_bias = tuple(hidden_sizes), use_bias
        hidden = list(hidden_sizes)
        if self.share_encoder:
            if not hidden:
                raise ValueError("a shared encoder needs at least one hidden layer")
            specs = [("trunk", [obs_dim, hidden[0]], 1, "relu"),
                     ("q", hidden + [num_actions * q_heads], q_heads, "linear"),
                     ("g", hidden + [num_actions], 1, "softmax")]
        else:
            specs = [("q", [obs_dim] + hidden + [num_actions * q_heads], q_heads, "linear")]
            if generative:
                specs.append(("g", [obs_dim] + hidden + [num_actions], 1, "softmax"))
        sizes = [DenseNet.num_params(s[1], use_bias) for s in specs]
        total = sum(sizes)
        self.params = np.zeros(total) if params is None else params
        if self.params.shape != (total,):
            raise ValueError(f"model needs {total} parameters")
        self.segments, self.nets, k = {}, {}, 0
        for (name, layers, heads, out), n in zip(specs, sizes):
            self.segments[name] = slice(k, k + n)
            self.nets[name] = DenseNet(layers, heads, out, use_bias, params=self.params[k:k + n])
            k += n
        if rng is not None:
            for net in self.nets.values():
                net.init_params(rng)
        self.trunk = self.nets.get("trunk")
        self.q = self.nets["q"]
        self.g = self.nets.get("g")

    @property
    def size(self) -> int:
        return self.params.size

    def copy(self) -> "Model":
        return Model(self.obs_dim, self.num_actions, self.q_heads, self.generative,
                     self.hidden_sizes, self.share_encoder, self.use_bias,
                     params=self.params.copy())

    def _encode(self, x, masks, dropout):
        if self.trunk is None:
            return x, None
        return self.trunk.forward_cache(x, masks and masks.get("trunk"), dropout)

    def _grad(self, name, head_cache, tcache, upstream, wrt_logits=False):
        grad = np.zeros(self.size)
        net = self.nets[name]
        seg = grad[self.segments[name]]
        if self.trunk is None:
            net.backward(head_cache, upstream, wrt_logits, out=seg)
        else:
            _, gh = net.backward(head_cache, upstream, wrt_logits, input_grad=True, out=seg)
            self.trunk.backward(tcache, gh, out=grad[self.segments["trunk"]])
        return grad

    def q_forward(self, x, masks=None, dropout: float = 0.0):
        """Q output ``[B, A]`` (or ``[B, A, K]``) plus a cache for :meth:`q_backward`."""
        h, tcache = self._encode(x, masks, dropout)
        out, qcache = self.q.forward_cache(h, masks and masks.get("q"), dropout)
        return out, (tcache, qcache)

    def q_backward(self, cache, upstream) -> np.ndarray:
        tcache, qcache = cache
        return self._grad("q", qcache, tcache, upstream)

    def g_forward(self, x):
        """Generative-model logits and probabilities ``[B, A]`` plus a cache."""
        h, tcache = self._encode(x, None, 0.0)
        probs, gcache = self.g.forward_cache(h)
        return gcache[2], probs, (tcache, gcache)

    def g_backward(self, cache, dlogits) -> np.ndarray:
        tcache, gcache = cache
        return self._grad("g", gcache, tcache, dlogits, wrt_logits=True)

    def joint_forward(self, x):
        """Q output and generative logits / probabilities from one encoder pass."""
        h, tcache = self._encode(x, None, 0.0)
        q, qcache = self.q.forward_cache(h)
        probs, gcache = self.g.forward_cache(h)
        return q, gcache[2], probs, (tcache, qcache, gcache)

    def joint_backward(self, cache, q_upstream, g_dlogits) -> np.ndarray:
        tcache, qcache, gcache = cache
        grad = np.zeros(self.size)
        q_seg, g_seg = grad[self.segments["q"]], grad[self.segments["g"]]
        if self.trunk is None:
            self.q.backward(qcache, q_upstream, out=q_seg)
            self.g.backward(gcache, g_dlogits, wrt_logits=True, out=g_seg)
        else:
            _, hq = self.q.backward(qcache, q_upstream, input_grad=True, out=q_seg)
            _, hg = self.g.backward(gcache, g_dlogits, wrt_logits=True, input_grad=True, out=g_seg)
            self.trunk.backward(tcache, hq + hg, out=grad[self.segments["trunk"]])
        return grad

    def masks(self, batch: int, p: float, rng: np.random.Generator) -> dict:
        out = {"q": dropout_masks(self.q.layer_sizes, batch, p, rng)}
        if self.trunk is not None:
            out["trunk"] = dropout_masks(self.trunk.layer_sizes, batch, p, rng)
        return out


# ---------------------------------------------------------------------------
# Pure policy / target helpers
# ---------------------------------------------------------------------------

def quantile_midpoints(k: int) -> np.ndarray:
    return (np.arange(k) + 0.5) / k


def sample_simplex(k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform (flat Dirichlet) point on the (k-1)-simplex."""
    e = rng.exponential(size=k)
    return e / e.sum()


def bcq_constrained_argmax(q_values, g_probs, threshold: float):
    """Highest-valued action among those with ``g / max g >= threshold``.

    Works on a single vector or row-wise on ``[B, A]`` arrays.  The argmax of
    ``g`` is always admissible; ties go to the lowest index.
    """
    q = np.asarray(q_values, dtype=np.float64)
    g = np.asarray(g_probs, dtype=np.float64)
    if q.shape != g.shape:
        raise ValueError("q_values and g_probs must have the same shape")
    ratio = g / np.max(g, axis=-1, keepdims=True)
    masked = np.where(ratio >= threshold, q, -np.inf)
    a = np.argmax(masked, axis=-1)
    return int(a) if a.ndim == 0 else a


def klcontrol_policy(q_values, mode: str = "argmax"):
    q = np.asarray(q_values, dtype=np.float64)
    if mode == "argmax":
        a = np.argmax(q, axis=-1)
        return int(a) if a.ndim == 0 else a
    if mode == "boltzmann":
        return softmax(q)
    raise ValueError("mode must be 'argmax' or 'boltzmann'")


def klcontrol_target(log_g, rewards, dones, next_lse, kl_weight: float, discount: float):
    """``log G(a|s) + r / c + discount * min_k lse_k`` with the bootstrap cut at terminals.

    ``next_lse`` holds one log-sum-exp per dropout mask along its first axis.
    """
    boot = np.min(np.asarray(next_lse, dtype=np.float64), axis=0)
    return (np.asarray(log_g) + np.asarray(rewards) / kl_weight
            + discount * (1.0 - np.asarray(dones, dtype=np.float64)) * boot)


def spibb_policy(q_values, baseline_probs, bootstrapped):
    """Baseline-bootstrapped policy.

    Actions in the bootstrapped set keep their baseline probability; the
    best-valued remaining action collects the rest of the mass.  If every action
    is bootstrapped the baseline is returned unchanged.  Row-wise on 2-D input.
    """
    q = np.asarray(q_values, dtype=np.float64)
    pb = np.asarray(baseline_probs, dtype=np.float64)
    boot = np.asarray(bootstrapped, dtype=bool)
    single = q.ndim == 1
    if single:
        q, pb, boot = q[None], pb[None], boot[None]
    pi = np.where(boot, pb, 0.0)
    free = ~boot
    best = np.argmax(np.where(free, q, -np.inf), axis=1)
    has_free = free.any(axis=1)
    rows = np.nonzero(has_free)[0]
    pi[rows, best[rows]] += np.sum(np.where(free, pb, 0.0), axis=1)[rows]
    return pi[0] if single else pi


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------

class Agent:
    """Plain DQN; subclasses override the target / loss computation."""

    algorithm = "dqn"
    generative = False

    def __init__(self, config: AgentConfig, obs_dim: int, num_actions: int, seed=0,
                 counts=None, baseline=None):
        self.config = config
        self.obs_dim, self.num_actions = obs_dim, num_actions
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        init_ss, noise_ss = ss.spawn(2)
        self.model = Model(obs_dim, num_actions, self.q_heads, self.generative,
                           config.hidden_sizes, config.share_encoder, config.use_bias,
                           rng=np.random.default_rng(init_ss))
        self.target = self.model.copy()
        self.optimizer = AdamState(self.model.size, config.learning_rate, config.adam_epsilon)
        self.rng = np.random.default_rng(noise_ss)
        self.t = 0

    @property
    def q_heads(self) -> int:
        return 1

    # -- values and policies ------------------------------------------------
    def q_values(self, obs) -> np.ndarray:
        """Evaluation Q-values ``[B, A]`` (head / quantile mean for multi-head nets)."""
        obs = np.asarray(obs, dtype=np.float64)
        out = self.model.q_forward(obs if obs.ndim == 2 else obs[None])[0]
        if out.ndim == 3:
            out = out.mean(axis=2)
        return out if obs.ndim == 2 else out[0]

    def policy_probs(self, obs, states=None) -> np.ndarray:
        """Greedy evaluation policy as a ``[B, A]`` table (one-hot unless stochastic)."""
        q = self.q_values(np.atleast_2d(obs))
        pi = np.zeros_like(q)
        pi[np.arange(len(q)), np.argmax(q, axis=1)] = 1.0
        return pi

    def act(self, obs, epsilon: float | None = None, state: int | None = None,
            rng: np.random.Generator | None = None) -> int:
        rng = self.rng if rng is None else rng
        eps = self.config.eval_epsilon if epsilon is None else epsilon
        if rng.random() < eps:
            return int(rng.integers(self.num_actions))
        probs = self.policy_probs(np.atleast_2d(obs), None if state is None else [state])[0]
        return sample_action(probs, rng)

    def value_estimate(self, minibatches) -> float:
        """Mean of the agent's own Q(s, a) over the given minibatches."""
        means = []
        for mb in minibatches:
            q = self.q_values(mb.obs)
            means.append(np.mean(q[np.arange(len(mb)), mb.actions]))
        return float(np.mean(means)) if means else 0.0

    # -- learning -----------------------------------------------------------
    def next_values(self, batch: Minibatch) -> np.ndarray:
        q_next = self.target.q_forward(batch.next_obs)[0]
        if self.config.double_q:
            a2 = np.argmax(self.model.q_forward(batch.next_obs)[0], axis=1)
            return q_next[np.arange(len(batch)), a2]
        return q_next.max(axis=1)

    def td_gradient(self, batch: Minibatch, targets, masks=None):
        """Mean Huber TD loss on Q(s, a) and its flat parameter gradient."""
        q, cache = self.model.q_forward(batch.obs, masks, self.config.dropout if masks else 0.0)
        loss, upstream = self.td_upstream(batch, q, targets)
        return loss, self.model.q_backward(cache, upstream)

    def td_upstream(self, batch: Minibatch, q, targets):
        rows = np.arange(len(batch))
        delta = targets - q[rows, batch.actions]
        loss, dl = huber_loss(delta, self.config.kappa)
        upstream = np.zeros_like(q)
        upstream[rows, batch.actions] = -dl / len(batch)
        return float(np.mean(loss)), upstream

    def targets(self, batch: Minibatch) -> np.ndarray:
        notdone = 1.0 - batch.dones
        return batch.rewards + self.config.discount * notdone * self.next_values(batch)

    def compute_gradients(self, batch: Minibatch):
        loss, grad = self.td_gradient(batch, self.targets(batch))
        return {"loss": loss}, grad

    def bc_upstream(self, batch: Minibatch, logits):
        ce, dlogits = cross_entropy_loss(logits, batch.actions)
        B, A = logits.shape
        pen = self.config.bc_penalty
        loss = float(np.mean(ce) + pen * np.mean(logits * logits))
        return loss, dlogits / B + pen * 2.0 * logits / (B * A)

    def bc_gradient(self, batch: Minibatch):
        """Cross-entropy on observed actions plus ``bc_penalty * x^2`` on the logits."""
        logits, _, cache = self.model.g_forward(batch.obs)
        loss, dlogits = self.bc_upstream(batch, logits)
        return loss, self.model.g_backward(cache, dlogits)

    def bc_update(self, batch: Minibatch) -> float:
        loss, grad = self.bc_gradient(batch)
        self._apply(grad, loss)
        return loss

    def _apply(self, grad, loss):
        if not np.isfinite(loss):
            raise NumericError("non-finite loss", self.t + 1)
        if self.config.optimizer == "sgd":
            sgd_step(self.config.learning_rate, self.model.params, grad, self.t + 1)
        else:
            adam_step(self.optimizer, self.model.params, grad, self.t + 1)

    def update(self, batch: Minibatch, **kwargs) -> dict:
        losses, grad = self.compute_gradients(batch, **kwargs)
        self._apply(grad, losses["loss"])
        self.t += 1
        return losses

    def sync_target(self) -> bool:
        if self.t % self.config.target_update_rate == 0:
            self.target.params[:] = self.model.params
            return True
        return False

    # -- checkpoints --------------------------------------------------------
    def state_dict(self) -> dict:
        return {"algorithm": self.algorithm, "iteration": self.t, "config": self.config.to_dict(),
                "nets": list(self.model.nets)}


def _with_heads(z: np.ndarray) -> np.ndarray:
    """``[B, A, K]`` view of a Q output; a one-head net returns ``[B, A]``."""
    return z if z.ndim == 3 else z[..., None]


def sample_action(probs, rng: np.random.Generator) -> int:
    k = int(np.argmax(probs))
    if probs[k] >= 1.0:
        return k
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(probs) - 1))


class DQNAgent(Agent):
    algorithm = "dqn"


class QRDQNAgent(Agent):
    algorithm = "qrdqn"

    @property
    def q_heads(self) -> int:
        return self.config.num_quantiles

    def compute_gradients(self, batch: Minibatch):
        K = self.config.num_quantiles
        B = len(batch)
        rows = np.arange(B)
        z_next = _with_heads(self.target.q_forward(batch.next_obs)[0])
        a2 = np.argmax(z_next.mean(axis=2), axis=1)
        notdone = (1.0 - batch.dones)[:, None]
        target = batch.rewards[:, None] + self.config.discount * notdone * z_next[rows, a2]
        raw, cache = self.model.q_forward(batch.obs)
        z = _with_heads(raw)
        theta = z[rows, batch.actions]
        delta = target[:, None, :] - theta[:, :, None]  # [B, i (current), j (target)]
        tau = quantile_midpoints(K)[None, :, None]
        loss, dl = quantile_huber_loss(delta, tau, self.config.kappa)
        upstream = np.zeros_like(z)
        upstream[rows, batch.actions] = dl.sum(axis=2) * (-1.0 / (K * K * B))
        return ({"loss": float(loss.sum() / (K * K * B))},
                self.model.q_backward(cache, upstream.reshape(raw.shape)))


class REMAgent(Agent):
    algorithm = "rem"

    @property
    def q_heads(self) -> int:
        return self.config.num_heads

    def compute_gradients(self, batch: Minibatch, alpha=None):
        K = self.config.num_heads
        alpha = sample_simplex(K, self.rng) if alpha is None else np.asarray(alpha, np.float64)
        B = len(batch)
        rows = np.arange(B)
        v_next = (_with_heads(self.target.q_forward(batch.next_obs)[0]) @ alpha).max(axis=1)
        y = batch.rewards + self.config.discount * (1.0 - batch.dones) * v_next
        raw, cache = self.model.q_forward(batch.obs)
        z = _with_heads(raw)
        delta = y - z[rows, batch.actions] @ alpha
        loss, dl = huber_loss(delta, self.config.kappa)
        upstream = np.zeros_like(z)
        upstream[rows, batch.actions] = (-dl / B)[:, None] * alpha[None, :]
        return {"loss": float(np.mean(loss))}, self.model.q_backward(cache, upstream.reshape(raw.shape))


class _GenerativeAgent(Agent):
    generative = True

    def g_probs(self, obs) -> np.ndarray:
        return self.model.g_forward(np.atleast_2d(obs))[1]

    def combined(self, batch: Minibatch, q_loss, q_grad):
        bc_loss, bc_grad = self.bc_gradient(batch)
        return {"loss": q_loss, "bc_loss": bc_loss}, q_grad + bc_grad


class BCQAgent(_GenerativeAgent):
    """Discrete BCQ: Double-DQN targets restricted to actions the behavior cloner deems likely."""

    algorithm = "bcq"

    def next_actions(self, next_obs) -> np.ndarray:
        """Constrained argmax over the online Q-network (Double-DQN selection)."""
        q_next, _, g_next, _ = self.model.joint_forward(next_obs)
        return bcq_constrained_argmax(q_next, g_next, self.config.bcq_threshold)

    def next_values(self, batch: Minibatch) -> np.ndarray:
        a2 = self.next_actions(batch.next_obs)
        self.last_next_actions = a2
        return self.target.q_forward(batch.next_obs)[0][np.arange(len(batch)), a2]

    def compute_gradients(self, batch: Minibatch):
        y = self.targets(batch)
        q, logits, _, cache = self.model.joint_forward(batch.obs)
        q_loss, q_up = self.td_upstream(batch, q, y)
        bc_loss, g_up = self.bc_upstream(batch, logits)
        return {"loss": q_loss, "bc_loss": bc_loss}, self.model.joint_backward(cache, q_up, g_up)

    def policy_probs(self, obs, states=None) -> np.ndarray:
        obs = np.atleast_2d(obs)
        a = bcq_constrained_argmax(self.q_values(obs), self.g_probs(obs), self.config.bcq_threshold)
        pi = np.zeros((len(obs), self.num_actions))
        pi[np.arange(len(obs)), a] = 1.0
        return pi


class KLControlAgent(_GenerativeAgent):
    """Psi-learning toward a behavior-cloned prior with a dropout lower-bound target."""

    algorithm = "klcontrol"

    def target_lse(self, next_obs) -> np.ndarray:
        """Log-sum-exp of target Q under each of ``kl_masks`` dropout masks, ``[K, B]``."""
        K, B = self.config.kl_masks, len(next_obs)
        stacked = np.tile(next_obs, (K, 1))
        masks = self.target.masks(K * B, self.config.dropout, self.rng)
        q = self.target.q_forward(stacked, masks, self.config.dropout)[0]
        return logsumexp(q, axis=1).reshape(K, B)

    def compute_gradients(self, batch: Minibatch):
        rows = np.arange(len(batch))
        g_logits = self.model.g_forward(batch.obs)[0]
        log_g = log_softmax(g_logits)[rows, batch.actions]
        y = klcontrol_target(log_g, batch.rewards, batch.dones, self.target_lse(batch.next_obs),
                             self.config.kl_weight, self.config.discount)
        masks = self.model.masks(len(batch), self.config.dropout, self.rng)
        q_loss, q_grad = self.td_gradient(batch, y, masks)
        q_grad = clip_by_norm(q_grad, self.config.kl_grad_clip)
        return self.combined(batch, q_loss, q_grad)

    def policy_probs(self, obs, states=None) -> np.ndarray:
        q = self.q_values(np.atleast_2d(obs))
        if self.config.kl_policy == "boltzmann":
            return softmax(q)
        return Agent.policy_probs(self, obs, states)


class SPIBBAgent(_GenerativeAgent):
    """SPIBB-DQN with exact counts; the baseline is cloned from data unless supplied."""

    algorithm = "spibb"

    def __init__(self, config, obs_dim, num_actions, seed=0, counts=None, baseline=None):
        if counts is None:
            raise ValueError("SPIBB needs the dataset's state-action counts")
        super().__init__(config, obs_dim, num_actions, seed)
        self.counts = np.asarray(counts)
        self.baseline = None if baseline is None else np.asarray(baseline, dtype=np.float64)

    @property
    def bootstrapped(self) -> np.ndarray:
        return self.counts <= self.config.spibb_count_threshold

    def _states(self, obs, states):
        if states is not None:
            return np.asarray(states)
        return np.argmax(obs, axis=1)

    def baseline_probs(self, obs, states) -> np.ndarray:
        if self.baseline is not None:
            return self.baseline[states]
        return self.g_probs(obs)

    def policy_at(self, q, obs, states) -> np.ndarray:
        return spibb_policy(q, self.baseline_probs(obs, states), self.bootstrapped[states])

    def next_values(self, batch: Minibatch) -> np.ndarray:
        s2 = self._states(batch.next_obs, batch.next_states)
        q_next = self.target.q_forward(batch.next_obs)[0]
        pi = self.policy_at(q_next, batch.next_obs, s2)
        if self.config.spibb_sample_next:
            a2 = np.array([sample_action(p, self.rng) for p in pi])
            return q_next[np.arange(len(batch)), a2]
        return np.sum(pi * q_next, axis=1)

    def compute_gradients(self, batch: Minibatch):
        q_loss, q_grad = self.td_gradient(batch, self.targets(batch))
        if self.baseline is not None:
            return {"loss": q_loss}, q_grad
        return self.combined(batch, q_loss, q_grad)

    def policy_probs(self, obs, states=None) -> np.ndarray:
        obs = np.atleast_2d(obs)
        return self.policy_at(self.q_values(obs), obs, self._states(obs, states))


_CLASSES = {"dqn": DQNAgent, "qrdqn": QRDQNAgent, "rem": REMAgent, "bcq": BCQAgent,
            "klcontrol": KLControlAgent, "spibb": SPIBBAgent}


def make_agent(config: AgentConfig, obs_dim: int, num_actions: int, seed=0, counts=None,
               baseline=None) -> Agent:
    cls = _CLASSES[config.algorithm]
    if cls is SPIBBAgent:
        return cls(config, obs_dim, num_actions, seed, counts=counts, baseline=baseline)
    return cls(config, obs_dim, num_actions, seed)


def save_checkpoint(agent: Agent, directory) -> None:
    """Write ``params.bin`` (online then target nets) and an ``agent.json`` sidecar.

    Optimizer moments and the agent's random stream are not saved; a restored
    agent reproduces evaluation exactly but not further training.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "params.bin", "wb") as fh:
        for model in (agent.model, agent.target):
            for net in model.nets.values():
                write_net(fh, net)
    meta = {**agent.state_dict(), "obs_dim": agent.obs_dim, "num_actions": agent.num_actions}
    if isinstance(agent, SPIBBAgent):
        meta["counts"] = agent.counts.tolist()
        meta["baseline"] = None if agent.baseline is None else agent.baseline.tolist()
    (directory / "agent.json").write_text(json.dumps(meta, indent=1))


def load_checkpoint(directory) -> Agent:
    directory = Path(directory)
    meta = json.loads((directory / "agent.json").read_text())
    config = AgentConfig.from_dict(meta["config"])
    agent = make_agent(config, meta["obs_dim"], meta["num_actions"], counts=meta.get("counts"),
                       baseline=meta.get("baseline"))
    with open(directory / "params.bin", "rb") as fh:
        for model in (agent.model, agent.target):
            for name, net in model.nets.items():
                stored = read_net(fh)
                if stored.layer_sizes != net.layer_sizes or stored.head_count != net.head_count:
                    raise ValueError(f"checkpoint net {name!r} does not match the config")
                net.params[:] = stored.params
    agent.t = int(meta["iteration"])
    return agent
