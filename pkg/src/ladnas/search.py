"""Latency-aware differentiable search on a miniature weight-sharing supernet.

Node features are length-``d`` vectors. Operations are 1-D proxies of the
DARTS image operators: pools slide a width-3 window, "sep" convs are learnable
width 3/5 kernels and "dil" convs the same with dilation 2, both followed by tanh.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .arch import (
    DEFAULT_CONFIG,
    CellConfig,
    DiscreteArch,
    bits_to_str,
    discretize,
    encode,
    encoding_grad_to_alpha,
    init_alpha,
    normalize,
    sample_encodings,
)
from .numeric import (
    OptimizerState,
    pad_last,
    conv1d_backward,
    cross_entropy,
    make_rng,
    optimizer_step,
    softmax_vjp,
)
from .oracle import CostTable, SyntheticHardwareModel, expected_flops, flops, synthetic_latency

log = logging.getLogger(__name__)

CONV_SPECS = {
    "sep_conv_3x3": (3, 1),
    "sep_conv_5x5": (5, 1),
    "dil_conv_3x3": (3, 2),
    "dil_conv_5x5": (5, 2),
}
HISTORY_FIELDS = ["epoch", "train_loss", "val_loss", "lat_ms", "total_loss", "probe_latency_ms"]
FLOPS_HISTORY_FIELDS = ["epoch", "train_loss", "val_loss", "exp_flops_m", "total_loss",
                        "probe_latency_ms"]


class SearchDiverged(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


def _pool_windows(x, fill):
    n = x.shape[-1]
    xp = pad_last(x, 1, 1, fill)
    return np.stack([xp[..., s:s + n] for s in range(3)], axis=-1)


def _avg_counts(n):
    c = np.full(n, 3.0)
    c[0] = c[-1] = 2.0
    return c


CONV_PAD = max((k - 1) * dil for k, dil in CONV_SPECS.values()) // 2


def op_forward(name, x, kernel=None, xp=None):
    """Output of operation ``name`` and a cache for :func:`op_backward`.

    ``xp`` may carry ``x`` zero-padded by ``CONV_PAD`` on both sides, shared
    between the conv ops reading the same node.
    """
    if name == "none":
        return np.zeros_like(x), None
    if name == "skip_connect":
        return x, None
    if name == "max_pool_3x3":
        out = x.copy()
        np.maximum(out[..., 1:], x[..., :-1], out=out[..., 1:])
        np.maximum(out[..., :-1], x[..., 1:], out=out[..., :-1])
        return out, None
    if name == "avg_pool_3x3":
        out = x.copy()
        out[..., 1:] += x[..., :-1]
        out[..., :-1] += x[..., 1:]
        return out / _avg_counts(x.shape[-1]), None
    k, dil = CONV_SPECS[name]
    n = x.shape[-1]
    if xp is None:
        xp = pad_last(x, CONV_PAD, CONV_PAD)
    # same alignment as conv1d_forward, read from the shared padding
    base = CONV_PAD - (k - 1) * dil // 2
    z = kernel[0] * xp[..., base:base + n]
    for m in range(1, k):
        off = base + m * dil
        z += kernel[m] * xp[..., off:off + n]
    out = np.tanh(z)
    return out, out


def op_backward(name, x, grad, cache, kernel=None):
    """(grad_input, grad_kernel or None)."""
    if name == "none":
        return np.zeros_like(x), None
    if name == "skip_connect":
        return grad, None
    n = x.shape[-1]
    if name == "max_pool_3x3":
        # first maximum in each window takes the gradient
        arg = np.argmax(_pool_windows(x, -np.inf), axis=-1)
        gwin = np.zeros(x.shape + (3,))
        np.put_along_axis(gwin, arg[..., None], grad[..., None], axis=-1)
        gx = np.zeros(x.shape[:-1] + (n + 2,))
        for s in range(3):
            gx[..., s:s + n] += gwin[..., s]
        return gx[..., 1:n + 1], None
    if name == "avg_pool_3x3":
        _, gx = conv1d_backward(np.ones(3), 1, x, grad / _avg_counts(n))
        return gx, None
    _, dil = CONV_SPECS[name]
    dz = grad * (1.0 - cache * cache)
    gk, gx = conv1d_backward(kernel, dil, x, dz)
    return gx, gk


class Supernet:
    """Stem (two affine maps) -> cell of mixed edges -> concat -> linear head."""

    def __init__(self, config: CellConfig = DEFAULT_CONFIG, d: int = 16, num_classes: int = 4,
                 rng=None):
        rng = rng if rng is not None else make_rng(0)
        spans = [(k - 1) * dil + 1 for o, (k, dil) in CONV_SPECS.items() if o in config.ops]
        if spans and d < max(spans):
            raise ValueError(f"feature size {d} is shorter than the widest kernel span {max(spans)}")
        self.config = config
        self.d = d
        self.num_classes = num_classes
        p = {}
        bound = math.sqrt(6.0 / (2 * d))
        for s in (0, 1):
            p[f"stem{s}.w"] = rng.uniform(-bound, bound, (d, d))
            p[f"stem{s}.b"] = np.zeros(d)
        for e in range(config.num_edges):
            for o in config.ops:
                if o in CONV_SPECS:
                    k = CONV_SPECS[o][0]
                    p[f"edge{e}.{o}"] = rng.uniform(-math.sqrt(3.0 / k), math.sqrt(3.0 / k), k)
        fan_in = config.num_intermediate * d
        hb = math.sqrt(6.0 / (fan_in + num_classes))
        p["head.w"] = rng.uniform(-hb, hb, (num_classes, fan_in))
        p["head.b"] = np.zeros(num_classes)
        self.params = p
        self._keys = [[f"edge{e}.{o}" for o in config.ops] for e in range(config.num_edges)]

    def forward(self, alpha_tilde, X, skip_zero=False):
        """Logits and the cache needed by :meth:`backward`.

        ``skip_zero`` drops ops whose mixture weight is exactly 0 (their
        alpha-gradient is then not available).
        """
        cfg = self.config
        p = self.params
        if alpha_tilde.shape != (cfg.num_edges, cfg.num_ops):
            raise ValueError(f"alpha_tilde shape {alpha_tilde.shape} does not match the cell")
        if X.shape[-1] != self.d:
            raise ValueError(f"expected inputs of size {self.d}, got {X.shape[-1]}")
        nodes = [X @ p["stem0.w"].T + p["stem0.b"], X @ p["stem1.w"].T + p["stem1.b"]]
        op_cache = {}
        weights = alpha_tilde.tolist()
        for e, (i, j) in enumerate(cfg.edges):
            if j == len(nodes):
                nodes.append(np.zeros_like(nodes[0]))
            xp = None
            acc = nodes[j]
            for k, o in enumerate(cfg.ops):
                if o == "none" or (skip_zero and weights[e][k] == 0.0):
                    continue
                if o in CONV_SPECS and xp is None:
                    xp = pad_last(nodes[i], CONV_PAD, CONV_PAD)
                out, c = op_forward(o, nodes[i], p.get(self._keys[e][k]), xp)
                op_cache[e, k] = (out, c)
                acc += weights[e][k] * out
        h = np.concatenate(nodes[2:], axis=-1)
        logits = h @ p["head.w"].T + p["head.b"]
        return logits, (X, nodes, h, op_cache)

    def backward(self, alpha_tilde, cache, grad_logits):
        """Gradients w.r.t. every parameter and w.r.t. alpha_tilde (ops skipped in forward get 0)."""
        cfg = self.config
        p = self.params
        X, nodes, h, op_cache = cache
        g = {"head.w": grad_logits.T @ h, "head.b": grad_logits.sum(axis=0)}
        gh = grad_logits @ p["head.w"]
        d = self.d
        gnodes = [np.zeros_like(nodes[0]) for _ in nodes]
        for j in range(2, cfg.num_nodes):
            gnodes[j] = gh[:, (j - 2) * d:(j - 1) * d].copy()
        galpha = np.zeros_like(alpha_tilde)
        for e in reversed(range(cfg.num_edges)):
            i, j = cfg.edges[e]
            gj = gnodes[j]
            for k, o in enumerate(cfg.ops):
                if (e, k) not in op_cache:
                    continue
                out, c = op_cache[e, k]
                galpha[e, k] = np.vdot(gj, out)
                key = f"edge{e}.{o}"
                gx, gk = op_backward(o, nodes[i], alpha_tilde[e, k] * gj, c, p.get(key))
                gnodes[i] += gx
                if gk is not None:
                    g[key] = gk
        for s in (0, 1):
            g[f"stem{s}.w"] = gnodes[s].T @ X
            g[f"stem{s}.b"] = gnodes[s].sum(axis=0)
        for key in p:
            g.setdefault(key, np.zeros_like(p[key]))
        return g, galpha


def supernet_forward(net: Supernet, alpha_tilde, X, y):
    """Mean cross-entropy and logits of the mixed network on a labelled batch."""
    logits, _ = net.forward(np.asarray(alpha_tilde, dtype=np.float64), X)
    loss, _ = cross_entropy(logits, y)
    return loss, logits


def supernet_loss_and_grads(net: Supernet, alpha_tilde, X, y):
    """(loss, parameter gradients, alpha_tilde gradient)."""
    alpha_tilde = np.asarray(alpha_tilde, dtype=np.float64)
    logits, cache = net.forward(alpha_tilde, X)
    loss, gl = cross_entropy(logits, y)
    g, ga = net.backward(alpha_tilde, cache, gl)
    return loss, g, ga


def latency_loss(alpha, lpm, M: int, rng, noise_std: float = 0.0,
                 config: CellConfig = DEFAULT_CONFIG):
    """Monte-Carlo expected latency (ms) over sampled sub-architectures and its
    straight-through gradient w.r.t. alpha.

    ``lpm`` is anything with ``predict_batch_with_grad(X) -> (values, grads)``.
    Noise is added to the value only.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    alpha_tilde = normalize(alpha)
    bits = sample_encodings(alpha_tilde, M, rng, config).astype(np.float64)
    vals, grads = lpm.predict_batch_with_grad(bits)
    if noise_std > 0:
        vals = vals + rng.normal(0.0, noise_std, size=M)
    lat = float(np.mean(vals))
    grad = encoding_grad_to_alpha(grads.mean(axis=0), alpha_tilde)
    return lat, grad


@dataclass
class Task:
    train_X: np.ndarray
    train_y: np.ndarray
    val_X: np.ndarray
    val_y: np.ndarray


def make_task(task_seed: int, d: int = 16, num_classes: int = 4, n_per_split: int = 2000,
              mean_scale: float = 3.0) -> Task:
    """Gaussian-mixture classification with two equal splits (weights / architecture)."""
    rng = make_rng((task_seed, 7))
    means = mean_scale * rng.standard_normal((num_classes, d))

    def draw():
        y = rng.integers(0, num_classes, n_per_split)
        return means[y] + rng.standard_normal((n_per_split, d)), y

    a, b = draw(), draw()
    return Task(a[0], a[1], b[0], b[1])


@dataclass
class SearchConfig:
    lam: float = 0.2
    M: int = 20
    epochs: int = 10
    batch_size_train: int = 64
    batch_size_val: int = 64
    w_lr: float = 0.025
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    a_lr: float = 3e-4
    a_betas: tuple = (0.5, 0.999)
    a_weight_decay: float = 1e-3
    seed: int = 0
    noise_std: float = 0.0
    raw_ms: bool = False
    d: int = 16
    num_classes: int = 4
    n_per_split: int = 2000
    num_intermediate: int = 4

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.M < 1 or self.epochs < 1:
            raise ValueError("M and epochs must be >= 1")
        if self.batch_size_train < 1 or self.batch_size_val < 1:
            raise ValueError("batch sizes must be >= 1")


@dataclass
class FlopsSearchConfig(SearchConfig):
    eta: float = 0.005

    def __post_init__(self):
        super().__post_init__()
        if self.eta < 0:
            raise ValueError("eta must be >= 0")


@dataclass
class SearchResult:
    alpha: np.ndarray
    arch: DiscreteArch
    history: list = field(default_factory=list)
    fields: list = field(default_factory=lambda: list(HISTORY_FIELDS))


def _probe(alpha, config, probe_model):
    return synthetic_latency(discretize(normalize(alpha), config), probe_model)


def _search_loop(cfg: SearchConfig, task_seed: int, penalty, fields, probe_model):
    """Shared first-order bi-level loop. ``penalty(alpha, alpha_tilde)`` returns
    ``(logged value, loss term, alpha gradient of the loss term)`` or None."""
    config = CellConfig(cfg.num_intermediate)
    probe_model = SyntheticHardwareModel(**{**asdict(probe_model or SyntheticHardwareModel()),
                                            "noise_std_ms": 0.0})
    task = make_task(task_seed, cfg.d, cfg.num_classes, cfg.n_per_split)
    net = Supernet(config, cfg.d, cfg.num_classes, make_rng((cfg.seed, 0)))
    alpha = init_alpha(config, make_rng((cfg.seed, 1)))
    batch_rng = make_rng((cfg.seed, 3))
    keys = list(net.params)
    w_opt = OptimizerState("sgd_momentum", lr=cfg.w_lr, momentum=cfg.w_momentum,
                           weight_decay=cfg.w_weight_decay)
    a_opt = OptimizerState("adam", lr=cfg.a_lr, betas=tuple(cfg.a_betas),
                           weight_decay=cfg.a_weight_decay)
    n_a, n_b = len(task.train_y), len(task.val_y)
    steps = math.ceil(n_a / cfg.batch_size_train)
    total_steps = steps * cfg.epochs
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        perm_a = batch_rng.permutation(n_a)
        perm_b = batch_rng.permutation(n_b)
        sums = np.zeros(4)
        for s in range(steps):
            ia = perm_a[s * cfg.batch_size_train:(s + 1) * cfg.batch_size_train]
            start_b = (s * cfg.batch_size_val) % n_b
            ib = perm_b[start_b:start_b + cfg.batch_size_val]
            # weights step on the first split, alpha frozen
            at = normalize(alpha)
            tl, g, _ = supernet_loss_and_grads(net, at, task.train_X[ia], task.train_y[ia])
            lr = 0.5 * cfg.w_lr * (1.0 + math.cos(math.pi * step / total_steps))
            new = optimizer_step([net.params[k] for k in keys], [g[k] for k in keys], w_opt, lr=lr)
            net.params = dict(zip(keys, new))
            # architecture step on the second split
            vl, _, ga_tilde = supernet_loss_and_grads(net, at, task.val_X[ib], task.val_y[ib])
            grad_alpha = softmax_vjp(at, ga_tilde, axis=1)
            logged, term = 0.0, 0.0
            pen = penalty(alpha, at) if penalty is not None else None
            if pen is not None:
                logged, term, pg = pen
                grad_alpha = grad_alpha + pg
            total = vl + term
            if not (math.isfinite(tl) and math.isfinite(total)):
                raise SearchDiverged(epoch)
            alpha = optimizer_step([alpha], [grad_alpha], a_opt)[0]
            sums += (tl, vl, logged, total)
            step += 1
        row = dict(zip(fields, [epoch, *(sums / steps), _probe(alpha, config, probe_model)]))
        history.append(row)
        log.info("epoch %d %s", epoch, row)
    return SearchResult(alpha, discretize(normalize(alpha), config), history, list(fields)), net, task


def run_search(cfg: SearchConfig, lpm, task_seed: int = 0, probe_model=None,
               return_state=False):
    """Latency-aware search: minimise val loss + lambda * LAT(alpha).

    With the default normalised mode the latency term is ``(LAT - min) / (max - min)``
    using the LPM scaler, and ``noise_std`` is in those units. With ``lam == 0``
    the LPM is never touched and may be None.
    """
    config = CellConfig(cfg.num_intermediate)
    penalty = None
    if cfg.lam > 0:
        if lpm is None:
            raise ValueError("a latency predictor is required when lambda > 0")
        lat_rng = make_rng((cfg.seed, 2))
        if cfg.raw_ms:
            lo, span = 0.0, 1.0
        else:
            lo, span = lpm.min_ms, lpm.max_ms - lpm.min_ms
        noise_ms = cfg.noise_std * span

        def penalty(alpha, at):
            lat, g = latency_loss(alpha, lpm, cfg.M, lat_rng, noise_ms, config)
            return lat, cfg.lam * (lat - lo) / span, cfg.lam * g / span

    result, net, task = _search_loop(cfg, task_seed, penalty, HISTORY_FIELDS, probe_model)
    return (result, net, task) if return_state else result


def run_flops_search(cfg: FlopsSearchConfig, table: CostTable | None = None, task_seed: int = 0,
                     probe_model=None, return_state=False):
    """FLOPs-aware control: val loss + eta * expected FLOPs (exact gradient, no sampling)."""
    table = table or CostTable()
    config = CellConfig(cfg.num_intermediate)
    penalty = None
    if cfg.eta > 0:
        def penalty(alpha, at):
            ef, g = expected_flops(at, table, config)
            return ef, cfg.eta * ef, cfg.eta * softmax_vjp(at, g, axis=1)

    result, net, task = _search_loop(cfg, task_seed, penalty, FLOPS_HISTORY_FIELDS, probe_model)
    return (result, net, task) if return_state else result


def evaluate_arch(arch: DiscreteArch, task: Task, epochs: int = 10, seed: int = 0, d: int = 16,
                  num_classes: int = 4, batch_size: int = 64, lr: float = 0.025) -> float:
    """Train a fresh network restricted to ``arch`` on the first split; accuracy on the second."""
    cfg = arch.config
    at = encode(arch).reshape(cfg.num_edges, cfg.num_ops).astype(np.float64)
    net = Supernet(cfg, d, num_classes, make_rng((seed, 5)))
    keys = list(net.params)
    opt = OptimizerState("sgd_momentum", lr=lr, momentum=0.9, weight_decay=3e-4)
    rng = make_rng((seed, 6))
    n = len(task.train_y)
    total = epochs * math.ceil(n / batch_size)
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            logits, cache = net.forward(at, task.train_X[idx], skip_zero=True)
            _, gl = cross_entropy(logits, task.train_y[idx])
            g, _ = net.backward(at, cache, gl)
            cur = 0.5 * lr * (1.0 + math.cos(math.pi * step / total))
            new = optimizer_step([net.params[k] for k in keys], [g[k] for k in keys], opt, lr=cur)
            net.params = dict(zip(keys, new))
            step += 1
    logits, _ = net.forward(at, task.val_X, skip_zero=True)
    return float(np.mean(np.argmax(logits, axis=1) == task.val_y))


def history_to_csv(result: SearchResult) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=result.fields, lineterminator="\n")
    w.writeheader()
    for row in result.history:
        w.writerow({k: (row[k] if k == "epoch" else repr(float(row[k]))) for k in result.fields})
    return buf.getvalue()


def arch_document(arch: DiscreteArch, **extra) -> dict:
    return {"version": 1, "bits": bits_to_str(encode(arch)), "edges": arch.to_json(), **extra}


def save_arch(arch: DiscreteArch, path, **extra) -> None:
    with open(path, "w") as fh:
        json.dump(arch_document(arch, **extra), fh, indent=2)
        fh.write("\n")


def arch_flops(arch: DiscreteArch, table: CostTable | None = None) -> float:
    return flops(arch, table or CostTable())
