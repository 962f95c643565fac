"""Small dense-network numerics used by the latency predictor and the supernet.

Everything is float64 numpy with explicit shapes. Layers follow the
``out x in`` weight convention; batched inputs are ``(batch, in)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("sigmoid", "tanh", "identity")


def make_rng(seed) -> np.random.Generator:
    """Seeded PCG64 generator. ``seed`` may be an int or a tuple of ints (substream key)."""
    if isinstance(seed, (tuple, list)):
        seed = [int(s) for s in seed]
    return np.random.Generator(np.random.PCG64(seed))


def sigmoid(z):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str = "sigmoid"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ValueError(
                f"weights {self.weights.shape} and biases {self.biases.shape} do not agree"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, n_in: int, n_out: int, activation: str, rng: np.random.Generator):
        """Symmetric uniform init on +-sqrt(6/(fan_in+fan_out)), zero biases."""
        bound = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        return cls(w, np.zeros(n_out), activation)


def _activate(z, activation):
    if activation == "sigmoid":
        return sigmoid(z)
    if activation == "tanh":
        return np.tanh(z)
    return z


def _check_input(layer: DenseLayer, x):
    if x.shape[-1] != layer.in_size:
        raise ValueError(
            f"dimension mismatch: layer expects input size {layer.in_size}, got {x.shape[-1]}"
        )


def dense_forward(layer: DenseLayer, x):
    """activation(W x + b) for a vector or a ``(batch, in)`` matrix."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(layer, x)
    return _activate(x @ layer.weights.T + layer.biases, layer.activation)


def dense_backward(layer: DenseLayer, x, grad_out, out=None):
    """Gradients of ``sum(grad_out * dense_forward(layer, x))``.

    Returns ``(grad_weights, grad_biases, grad_input)``. For batched input the
    parameter gradients are summed over the batch. ``out`` may be passed to
    skip recomputing the forward activation.
    """
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    _check_input(layer, x)
    if grad_out.shape[-1] != layer.out_size:
        raise ValueError(
            f"dimension mismatch: layer output size {layer.out_size}, grad has {grad_out.shape[-1]}"
        )
    if out is None:
        out = dense_forward(layer, x)
    if layer.activation == "sigmoid":
        dz = grad_out * out * (1.0 - out)
    elif layer.activation == "tanh":
        dz = grad_out * (1.0 - out * out)
    else:
        dz = grad_out
    if x.ndim == 1:
        gw = np.outer(dz, x)
        gb = dz.copy()
    else:
        gw = dz.T @ x
        gb = dz.sum(axis=0)
    gx = dz @ layer.weights
    return gw, gb, gx


def pad_last(x, left, right, fill=0.0):
    out = np.empty(x.shape[:-1] + (x.shape[-1] + left + right,))
    out[..., :left] = fill
    out[..., left + x.shape[-1]:] = fill
    out[..., left:left + x.shape[-1]] = x
    return out


def _conv_pads(k: int, dilation: int):
    span = (k - 1) * dilation
    left = span // 2
    return left, span - left


def conv1d_forward(kernel, dilation: int, x):
    """Same-length dilated cross-correlation with zero padding, center aligned.

    ``x`` is a vector or a ``(batch, length)`` matrix.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    k = kernel.shape[0]
    if k < 1 or dilation < 1:
        raise ValueError("kernel length and dilation must be >= 1")
    n = x.shape[-1]
    span = (k - 1) * dilation + 1
    if span > n:
        raise ValueError(f"kernel span {span} exceeds input length {n}")
    left, right = _conv_pads(k, dilation)
    xp = pad_last(x, left, right)
    out = np.zeros_like(x)
    for m in range(k):
        s = m * dilation
        out += kernel[m] * xp[..., s:s + n]
    return out


def conv1d_backward(kernel, dilation: int, x, grad_out):
    """Returns ``(grad_kernel, grad_input)`` for :func:`conv1d_forward` (kernel grad summed over batch)."""
    kernel = np.asarray(kernel, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    k = kernel.shape[0]
    n = x.shape[-1]
    left, right = _conv_pads(k, dilation)
    xp = pad_last(x, left, right)
    gxp = np.zeros_like(xp)
    gk = np.empty(k)
    for m in range(k):
        s = m * dilation
        gk[m] = np.vdot(grad_out, xp[..., s:s + n])
        gxp[..., s:s + n] += kernel[m] * grad_out
    return gk, gxp[..., left:left + n]


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_vjp(p, grad_out, axis=-1):
    """Vector-Jacobian product of softmax at output ``p``: ``p * (g - <p, g>)``."""
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    return p * (g - np.sum(p * g, axis=axis, keepdims=True))


def log_softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def mse(preds, targets):
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.size == 0:
        raise ValueError("mse of empty input")
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {targets.shape}")
    diff = preds - targets
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    b = logits.shape[0]
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(b), labels]))
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


@dataclass
class OptimizerState:
    kind: str = "sgd_momentum"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    buffers: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(params, grads, state: OptimizerState, lr=None):
    """One optimizer update. Returns new parameter arrays; ``state`` is advanced in place.

    SGD-momentum: ``v <- mu v + (g + wd p); p <- p - lr v``.
    Adam: standard bias-corrected update on ``g + wd p``.
    ``lr`` overrides ``state.lr`` for this step (used by schedules).
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    lr = state.lr if lr is None else lr
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"parameter block {i}: shape {np.shape(p)} vs grad {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {i}")
    if not state.buffers:
        if state.kind == "sgd_momentum":
            state.buffers = [np.zeros_like(p, dtype=np.float64) for p in params]
        else:
            state.buffers = [
                (np.zeros_like(p, dtype=np.float64), np.zeros_like(p, dtype=np.float64))
                for p in params
            ]
    state.step_count += 1
    t = state.step_count
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = g + state.weight_decay * p if state.weight_decay else g
        if state.kind == "sgd_momentum":
            v = state.momentum * state.buffers[i] + g
            state.buffers[i] = v
            new_params.append(p - lr * v)
        else:
            b1, b2 = state.betas
            m, s = state.buffers[i]
            m = b1 * m + (1.0 - b1) * g
            s = b2 * s + (1.0 - b2) * g * g
            state.buffers[i] = (m, s)
            mhat = m / (1.0 - b1 ** t)
            shat = s / (1.0 - b2 ** t)
            new_params.append(p - lr * mhat / (np.sqrt(shat) + state.eps))
    return new_params
