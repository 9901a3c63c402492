"""Dense networks with hand-written backprop, Adam, dropout and the TD loss primitives.

Parameters of a network live in one flat float64 vector; per-layer weight and
bias arrays are views into it, so optimizers and target-network copies work on
the flat vector directly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DenseNet",
    "AdamState",
    "NumericError",
    "adam_step",
    "sgd_step",
    "clip_by_norm",
    "dropout_masks",
    "huber_loss",
    "quantile_huber_loss",
    "cross_entropy_loss",
    "logsumexp",
    "log_softmax",
    "softmax",
    "save_params",
    "load_params",
    "write_net",
    "read_net",
]

_OUTPUTS = ("linear", "softmax", "relu")


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class DenseNet:
    """Fully-connected net: ReLU hidden layers, linear / softmax / ReLU output.

    ``layer_sizes[-1]`` is the total output width.  With ``head_count > 1`` the
    output is reshaped to ``[batch, layer_sizes[-1] // head_count, head_count]``.
    """

    def __init__(self, layer_sizes, head_count: int = 1, output: str = "linear",
                 use_bias: bool = True, params: np.ndarray | None = None,
                 rng: np.random.Generator | None = None):
        sizes = [int(n) for n in layer_sizes]
        if len(sizes) < 2 or any(n <= 0 for n in sizes):
            raise ValueError("layer_sizes needs at least input and output, all positive")
        if output not in _OUTPUTS:
            raise ValueError(f"output must be one of {_OUTPUTS}")
        if head_count <= 0 or sizes[-1] % head_count:
            raise ValueError("output width must be a multiple of head_count")
        self.layer_sizes = tuple(sizes)
        self.head_count = int(head_count)
        self.output = output
        self.use_bias = bool(use_bias)
        n = self.num_params(sizes, use_bias)
        if params is None:
            params = np.zeros(n)
        elif params.shape != (n,):
            raise ValueError(f"parameter buffer must have {n} entries")
        self.params = params
        self.weights, self.biases = self._views(self.params)
        self._slices = self._layout()
        if rng is not None:
            self.init_params(rng)

    @staticmethod
    def num_params(layer_sizes, use_bias: bool = True) -> int:
        sizes = list(layer_sizes)
        return sum((i + int(use_bias)) * o for i, o in zip(sizes[:-1], sizes[1:]))

    @property
    def size(self) -> int:
        return self.params.size

    @property
    def num_outputs(self) -> int:
        return self.layer_sizes[-1] // self.head_count

    def _views(self, flat):
        weights, biases = [], []
        for ws, shape, bs in self._layout():
            weights.append(flat[ws].reshape(shape))
            biases.append(None if bs is None else flat[bs])
        return weights, biases

    def _layout(self):
        out, k = [], 0
        for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            ws = slice(k, k + i * o)
            k += i * o
            bs = None
            if self.use_bias:
                bs = slice(k, k + o)
                k += o
            out.append((ws, (i, o), bs))
        return out

    def init_params(self, rng: np.random.Generator) -> None:
        # He-uniform fan-in scaling, zero biases.
        for w, b in zip(self.weights, self.biases):
            bound = np.sqrt(6.0 / w.shape[0])
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            if b is not None:
                b[...] = 0.0

    def _shape_output(self, z):
        if self.head_count > 1:
            return z.reshape(z.shape[0], self.num_outputs, self.head_count)
        return z

    def forward(self, x, masks=None) -> np.ndarray:
        return self.forward_cache(x, masks)[0]

    def forward_cache(self, x, masks=None, dropout: float = 0.0):
        """Forward pass keeping the activations needed by :meth:`backward`.

        ``masks`` is an optional list of keep-masks, one per layer, applied to
        that layer's input with inverted scaling ``1 / (1 - dropout)``.
        """
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"input dim {x.shape[1]} != {self.layer_sizes[0]}")
        scale = 1.0 / (1.0 - dropout) if dropout else 1.0
        inputs, scales = [], []
        h = x
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if masks is not None and masks[i] is not None:
                m = masks[i] * scale
                h = h * m
                scales.append(m)
            else:
                scales.append(None)
            inputs.append(h)
            z = h @ w
            if b is not None:
                z += b
            if i < n_layers - 1:
                h = np.maximum(z, 0.0)
        logits = z
        if self.output == "softmax":
            out = softmax(logits)
        elif self.output == "relu":
            out = np.maximum(logits, 0.0)
        else:
            out = logits
        cache = (inputs, scales, logits, out)
        out = self._shape_output(out)
        return (out[0] if squeeze else out), cache

    def logits(self, x, masks=None, dropout: float = 0.0) -> np.ndarray:
        return self._shape_output(self.forward_cache(x, masks, dropout)[1][2])

    def backward(self, cache, upstream, wrt_logits: bool = False, input_grad: bool = False,
                 out: np.ndarray | None = None):
        """Reverse-mode gradient of ``sum(output * upstream)`` w.r.t. all parameters.

        With ``wrt_logits`` the upstream gradient is taken to be w.r.t. the
        pre-activation output (used by cross-entropy on softmax heads).
        Returns the flat parameter gradient, plus the input gradient if asked.
        """
        inputs, scales, logits, activ = cache
        g = np.asarray(upstream, dtype=np.float64).reshape(logits.shape[0], -1)
        if g.shape != logits.shape:
            raise ValueError(f"upstream shape {g.shape} does not match output {logits.shape}")
        if not wrt_logits:
            if self.output == "softmax":
                g = activ * (g - np.sum(g * activ, axis=1, keepdims=True))
            elif self.output == "relu":
                g = g * (logits > 0)
        grad = np.empty_like(self.params) if out is None else out
        for i in range(len(self.weights) - 1, -1, -1):
            h = inputs[i]
            ws, shape, bs = self._slices[i]
            np.matmul(h.T, g, out=grad[ws].reshape(shape))
            if bs is not None:
                np.sum(g, axis=0, out=grad[bs])
            if i > 0 or input_grad:
                g = g @ self.weights[i].T
                if scales[i] is not None:
                    g *= scales[i]
                if i > 0:
                    g *= h > 0
        if input_grad:
            return grad, g
        return grad

    def copy(self) -> "DenseNet":
        return DenseNet(self.layer_sizes, self.head_count, self.output, self.use_bias,
                        params=self.params.copy())


def dropout_masks(layer_sizes, batch: int, p: float, rng: np.random.Generator):
    """One boolean keep-mask per layer input, sampled independently per example."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    return [rng.random((batch, n)) >= p for n in layer_sizes[:-1]]


@dataclass
class AdamState:
    size: int
    learning_rate: float = 6.25e-5
    adam_epsilon: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def _check_finite(grad, iteration):
    if not np.isfinite(np.add.reduce(grad)) and not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient", iteration)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray,
              iteration: int | None = None) -> np.ndarray:
    """In-place bias-corrected Adam update of ``params``; returns ``params``."""
    if grad.shape != params.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and optimizer shapes differ")
    _check_finite(grad, iteration)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m += (1.0 - b1) * (grad - state.m)
    state.v += (1.0 - b2) * (grad * grad - state.v)
    # Bias corrections folded into the step size and the denominator.
    denom = np.sqrt(state.v * (1.0 / (1.0 - b2 ** state.step)))
    denom += state.adam_epsilon
    np.divide(state.m, denom, out=denom)
    denom *= state.learning_rate / (1.0 - b1 ** state.step)
    params -= denom
    return params


def sgd_step(learning_rate: float, params: np.ndarray, grad: np.ndarray,
             iteration: int | None = None) -> np.ndarray:
    _check_finite(grad, iteration)
    params -= learning_rate * grad
    return params


def clip_by_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


# ---------------------------------------------------------------------------
# Losses.  Each returns (loss, derivative) elementwise.
# ---------------------------------------------------------------------------

def huber_loss(delta, kappa: float = 1.0):
    """``0.5 d^2`` for ``|d| <= kappa``, else ``kappa (|d| - kappa/2)``."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    delta = np.asarray(delta, dtype=np.float64)
    # The derivative is delta clipped to [-kappa, kappa]; loss = c * (delta - c / 2).
    grad = np.clip(delta, -kappa, kappa)
    loss = grad * (delta - 0.5 * grad)
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def quantile_huber_loss(delta, quantile_level, kappa: float = 1.0):
    """Huber loss weighted by ``|tau - 1[delta < 0]|``."""
    tau = np.asarray(quantile_level, dtype=np.float64)
    if np.any((tau <= 0) | (tau >= 1)):
        raise ValueError("quantile level must lie in (0, 1)")
    delta = np.asarray(delta, dtype=np.float64)
    w = np.where(delta < 0, 1.0 - tau, tau)
    loss, grad = huber_loss(delta, kappa)
    loss, grad = w * loss, w * grad
    if np.ndim(loss) == 0:
        return float(loss), float(grad)
    return loss, grad


def logsumexp(values, axis=-1):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of an empty vector")
    m = np.max(v, axis=axis, keepdims=True)
    out = np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(v - m), axis=axis))
    return float(out) if np.ndim(out) == 0 else out


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def cross_entropy_loss(logits, target_action):
    """``-log softmax(logits)[target]`` and its gradient ``softmax - onehot``.

    Accepts a single logit vector with an integer target, or a batch
    ``[B, A]`` with a vector of targets (returning per-example losses).
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None] if single else z
    t = np.atleast_1d(np.asarray(target_action))
    if np.any(t < 0) or np.any(t >= z2.shape[1]):
        raise ValueError("target action out of range")
    lsm = log_softmax(z2)
    rows = np.arange(z2.shape[0])
    loss = -lsm[rows, t]
    grad = np.exp(lsm)
    grad[rows, t] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


# ---------------------------------------------------------------------------
# Binary parameter format: magic, version, output kind, bias flag, head count,
# layer count, layer sizes (uint32 LE), then float64 LE parameters.
# ---------------------------------------------------------------------------

_MAGIC = b"BRLN"
_VERSION = 1


def write_net(fh, net: DenseNet) -> None:
    head = struct.pack("<4sIBBII", _MAGIC, _VERSION, _OUTPUTS.index(net.output),
                       int(net.use_bias), net.head_count, len(net.layer_sizes))
    fh.write(head)
    fh.write(struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes))
    fh.write(net.params.astype("<f8").tobytes())


def read_net(fh) -> DenseNet:
    head_size = struct.calcsize("<4sIBBII")
    raw = fh.read(head_size)
    if len(raw) != head_size:
        raise ValueError("truncated network header")
    magic, version, out_kind, bias, heads, n = struct.unpack("<4sIBBII", raw)
    if magic != _MAGIC or version != _VERSION or out_kind >= len(_OUTPUTS):
        raise ValueError("not a network parameter block")
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise ValueError("truncated network header")
    sizes = struct.unpack(f"<{n}I", raw)
    count = DenseNet.num_params(sizes, bool(bias))
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise ValueError("truncated parameter array")
    params = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return DenseNet(sizes, heads, _OUTPUTS[out_kind], bool(bias), params=params)


def save_params(net: DenseNet, path) -> None:
    with open(path, "wb") as fh:
        write_net(fh, net)


def load_params(path) -> DenseNet:
    with open(path, "rb") as fh:
        return read_net(fh)
