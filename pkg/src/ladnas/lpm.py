"""Latency prediction module: an MLP from architecture bits to milliseconds."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .numeric import (
    DenseLayer,
    OptimizerState,
    dense_backward,
    dense_forward,
    make_rng,
    mse,
    optimizer_step,
)
from .oracle import LatencyDataset

log = logging.getLogger(__name__)

MODEL_VERSION = 1
HIDDEN_DIMS = (112, 256, 64)
DEFAULT_DIMS = (112,) + HIDDEN_DIMS + (1,)


class LpmFormatError(ValueError):
    pass


@dataclass
class LpmTrainConfig:
    epochs: int = 1000
    batch_size: int = 200
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must be in [0, 1) and weight_decay >= 0")


class Lpm:
    """Four dense layers (sigmoid hidden, linear output) plus a min-max target scaler."""

    def __init__(self, layers, min_ms: float, max_ms: float, train_config=None):
        self.layers = list(layers)
        if not max_ms > min_ms:
            raise ValueError(f"scaler max ({max_ms}) must exceed min ({min_ms})")
        self.min_ms = float(min_ms)
        self.max_ms = float(max_ms)
        self.train_config = dict(train_config or {})
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_size != b.in_size:
                raise LpmFormatError(f"layer sizes do not chain: {a.out_size} -> {b.in_size}")
        if self.layers[-1].out_size != 1:
            raise LpmFormatError("final layer must have a single output")
        self.history: list[float] = []

    @classmethod
    def init(cls, input_dim: int = 112, rng=None, min_ms=0.0, max_ms=1.0):
        rng = rng if rng is not None else make_rng(0)
        dims = (input_dim,) + HIDDEN_DIMS + (1,)
        layers = [
            DenseLayer.init(a, b, "sigmoid" if k < len(dims) - 2 else "identity", rng)
            for k, (a, b) in enumerate(zip(dims, dims[1:]))
        ]
        return cls(layers, min_ms, max_ms)

    @property
    def dims(self) -> list:
        return [self.layers[0].in_size] + [layer.out_size for layer in self.layers]

    @property
    def span(self) -> float:
        return self.max_ms - self.min_ms

    def _forward(self, x):
        acts = [x]
        for layer in self.layers:
            acts.append(dense_forward(layer, acts[-1]))
        return acts

    def _backward(self, acts, grad_out, input_grad=True):
        grads = []
        g = grad_out
        last = len(self.layers) - 1
        for k in range(last, -1, -1):
            layer, x, out = self.layers[k], acts[k], acts[k + 1]
            if k == 0 and not input_grad:
                # training never needs d(loss)/d(bits)
                dz = g * out * (1.0 - out)
                grads.append((dz.T @ x, dz.sum(axis=0)))
                g = None
                break
            gw, gb, g = dense_backward(layer, x, g, out=out)
            grads.append((gw, gb))
        return grads[::-1], g

    def params(self):
        return [p for layer in self.layers for p in (layer.weights, layer.biases)]

    def set_params(self, params):
        for k, layer in enumerate(self.layers):
            layer.weights, layer.biases = params[2 * k], params[2 * k + 1]

    def predict_batch(self, X) -> np.ndarray:
        X = self._check(X)
        out = self._forward(X)[-1][..., 0]
        return self.min_ms + out * self.span

    def predict_batch_with_grad(self, X):
        """Predictions ``(n,)`` and input gradients ``(n, input_dim)``, both in ms."""
        X = self._check(X)
        acts = self._forward(X)
        _, gx = self._backward(acts, np.ones_like(acts[-1]))
        return self.min_ms + acts[-1][..., 0] * self.span, gx * self.span

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.dims[0]:
            raise ValueError(f"expected {self.dims[0]} input features, got {X.shape[-1]}")
        if not np.all(np.isfinite(X)):
            raise ValueError("input contains non-finite values")
        return X


def predict(lpm: Lpm, bits) -> float:
    return float(lpm.predict_batch(np.asarray(bits, dtype=np.float64)[None, :])[0])


def predict_with_grad(lpm: Lpm, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict_with_grad takes a single vector")
    val, grad = lpm.predict_batch_with_grad(x[None, :])
    return float(val[0]), grad[0]


def train_lpm(train: LatencyDataset | tuple, cfg: LpmTrainConfig = LpmTrainConfig()) -> Lpm:
    """Fit an LPM with momentum SGD on min-max scaled targets.

    ``train`` is a dataset or an ``(X, y)`` pair. Each epoch shuffles with a
    seeded permutation; the last partial batch is kept.
    """
    if isinstance(train, LatencyDataset):
        X, y = train.encodings(), train.latencies()
    else:
        X, y = (np.asarray(a, dtype=np.float64) for a in train)
    n = len(y)
    if n == 0:
        raise ValueError("empty training set")
    if cfg.batch_size > n:
        raise ValueError(f"batch size {cfg.batch_size} exceeds training-set size {n}")
    lo, hi = float(y.min()), float(y.max())
    if not hi > lo:
        raise ValueError("all training latencies are equal; cannot fit the target scaler")
    t = (y - lo) / (hi - lo)

    lpm = Lpm.init(X.shape[1], make_rng((cfg.seed, 0)), lo, hi)
    lpm.train_config = asdict(cfg)
    opt = OptimizerState("sgd_momentum", lr=cfg.learning_rate, momentum=cfg.momentum,
                         weight_decay=cfg.weight_decay)
    shuffle_rng = make_rng((cfg.seed, 1))
    params = lpm.params()
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            acts = lpm._forward(X[idx])
            loss, g = mse(acts[-1][:, 0], t[idx])
            grads, _ = lpm._backward(acts, g[:, None], input_grad=False)
            flat = [a for pair in grads for a in pair]
            params = optimizer_step(params, flat, opt)
            lpm.set_params(params)
            total += loss * len(idx)
        lpm.history.append(total / n)
        if not np.isfinite(lpm.history[-1]):
            raise FloatingPointError(f"training diverged at epoch {epoch}")
    return lpm


@dataclass
class EvalReport:
    mean_absolute_error_ms: float
    mean_relative_error: float
    kendall_tau: float
    concordant_fraction: float
    n_test: int
    n_pairs_sampled: int
    ties: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def kendall_counts(truth, pred):
    """(concordant, discordant, tied) pair counts over all pairs."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    iu = np.triu_indices(len(truth), k=1)
    s = np.sign(truth[:, None] - truth[None, :])[iu] * np.sign(pred[:, None] - pred[None, :])[iu]
    return int(np.sum(s > 0)), int(np.sum(s < 0)), int(np.sum(s == 0))


def kendall_tau(truth, pred):
    """Kendall tau-a with ties counted as neither concordant nor discordant.

    Returns ``(tau, concordant_fraction, ties)``.
    """
    c, d, ties = kendall_counts(truth, pred)
    total = c + d + ties
    if total == 0:
        raise ValueError("need at least two items")
    tau = (c - d) / total
    frac = c / total
    if ties == 0:
        assert 2 * c == (c - d) + total
    return tau, frac, ties


def evaluate(lpm: Lpm, test: LatencyDataset, pair_sample: int = 2000, rng=None) -> EvalReport:
    if len(test) == 0:
        raise ValueError("empty test set")
    if pair_sample < 2:
        raise ValueError("pair_sample must be >= 2")
    truth = test.latencies()
    if np.any(truth <= 0):
        raise ValueError("test latencies must be positive")
    pred = lpm.predict_batch(test.encodings())
    err = np.abs(pred - truth)
    rng = rng if rng is not None else make_rng(0)
    k = min(pair_sample, len(test))
    idx = np.sort(rng.choice(len(test), size=k, replace=False))
    if k >= 2:
        tau, frac, ties = kendall_tau(truth[idx], pred[idx])
    else:
        tau, frac, ties = float("nan"), float("nan"), 0
    return EvalReport(float(err.mean()), float(np.mean(err / truth)), float(tau), float(frac),
                      len(test), int(k), int(ties))


def save_lpm(lpm: Lpm, path) -> None:
    doc = {
        "version": MODEL_VERSION,
        "dims": lpm.dims,
        "hidden_activation": "sigmoid",
        "weights": [layer.weights.ravel().tolist() for layer in lpm.layers],
        "biases": [layer.biases.tolist() for layer in lpm.layers],
        "scaler": {"min_ms": lpm.min_ms, "max_ms": lpm.max_ms},
        "train_config": lpm.train_config,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_lpm(path) -> Lpm:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise LpmFormatError(f"{path}: cannot parse model file ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("version") != MODEL_VERSION:
        raise LpmFormatError(f"{path}: unsupported model version {doc.get('version')!r}")
    try:
        dims = [int(d) for d in doc["dims"]]
        weights, biases, scaler = doc["weights"], doc["biases"], doc["scaler"]
    except (KeyError, TypeError) as exc:
        raise LpmFormatError(f"{path}: missing field {exc}") from exc
    if len(dims) != 5 or dims[1:] != list(HIDDEN_DIMS) + [1]:
        raise LpmFormatError(f"{path}: dims {dims} do not match the LPM layout")
    if len(weights) != 4 or len(biases) != 4:
        raise LpmFormatError(f"{path}: expected 4 layers")
    layers = []
    for k, (a, b) in enumerate(zip(dims, dims[1:])):
        w = np.asarray(weights[k], dtype=np.float64)
        bias = np.asarray(biases[k], dtype=np.float64)
        if w.size != a * b or bias.shape != (b,):
            raise LpmFormatError(
                f"{path}: layer {k} expects {b}x{a} weights and {b} biases, "
                f"got {w.size} weights and {bias.size} biases"
            )
        layers.append(DenseLayer(w.reshape(b, a), bias, "sigmoid" if k < 3 else "identity"))
    return Lpm(layers, scaler["min_ms"], scaler["max_ms"], doc.get("train_config"))
