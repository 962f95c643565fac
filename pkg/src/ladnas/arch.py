"""Normal-cell search space: edges, operations, the bit encoding and architectural parameters."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np

from .numeric import softmax, softmax_vjp

OPS = (
    "none",
    "skip_connect",
    "max_pool_3x3",
    "avg_pool_3x3",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
)
PARAM_FREE = frozenset({"skip_connect", "max_pool_3x3", "avg_pool_3x3"})


class EncodingError(ValueError):
    """Bit vector that does not describe a valid sub-architecture."""


class EncodingLengthError(EncodingError):
    pass


class NonBinaryError(EncodingError):
    pass


class BitCountError(EncodingError):
    pass


class NoneOpError(EncodingError):
    pass


class MultipleOpsError(EncodingError):
    pass


class EdgesPerNodeError(EncodingError):
    pass


@dataclass(frozen=True)
class CellConfig:
    num_intermediate: int = 4
    ops: tuple = OPS

    def __post_init__(self):
        if self.num_intermediate < 1:
            raise ValueError("need at least one intermediate node")
        if not self.ops or self.ops[0] != "none":
            raise ValueError("operation list must start with 'none'")
        unknown = set(self.ops) - set(OPS)
        if unknown:
            raise ValueError(f"unknown operations {sorted(unknown)}")
        object.__setattr__(self, "ops", tuple(self.ops))

    @property
    def num_nodes(self) -> int:
        return self.num_intermediate + 2

    @property
    def edges(self) -> tuple:
        # ordered by (destination, source)
        return tuple((i, j) for j in range(2, self.num_nodes) for i in range(j))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_ops(self) -> int:
        return len(self.ops)

    @property
    def num_bits(self) -> int:
        return self.num_edges * self.num_ops

    def edge_index(self, src: int, dst: int) -> int:
        # edges into node dst start after sum_{j<dst} j
        if not (0 <= src < dst < self.num_nodes):
            raise ValueError(f"invalid edge ({src},{dst})")
        return sum(range(2, dst)) + src

    def node_edge_slices(self):
        """(node, slice into the edge list) for each intermediate node."""
        start = 0
        for j in range(2, self.num_nodes):
            yield j, slice(start, start + j)
            start += j


DEFAULT_CONFIG = CellConfig()


@dataclass(frozen=True)
class DiscreteArch:
    """Selected edges as sorted ``(src, dst, op_name)`` triples."""

    edges: tuple
    config: CellConfig = DEFAULT_CONFIG

    def __post_init__(self):
        edges = tuple(sorted(
            ((int(s), int(d), str(o)) for s, d, o in self.edges),
            key=lambda e: (e[1], e[0]),
        ))
        object.__setattr__(self, "edges", edges)
        validate(self)

    @property
    def ops(self) -> list:
        return [o for _, _, o in self.edges]

    def to_json(self) -> list:
        return [{"from": s, "to": d, "op": o} for s, d, o in self.edges]

    @classmethod
    def from_json(cls, items, config: CellConfig = DEFAULT_CONFIG):
        return cls(tuple((e["from"], e["to"], e["op"]) for e in items), config)


def validate(arch: DiscreteArch) -> None:
    cfg = arch.config
    seen = set()
    per_node = {j: 0 for j in range(2, cfg.num_nodes)}
    for s, d, o in arch.edges:
        cfg.edge_index(s, d)
        if (s, d) in seen:
            raise ValueError(f"duplicate edge ({s},{d})")
        seen.add((s, d))
        if o not in cfg.ops:
            raise ValueError(f"operation {o!r} not in the search space")
        if o == "none":
            raise ValueError(f"edge ({s},{d}) carries 'none'")
        per_node[d] += 1
    for j, cnt in per_node.items():
        if cnt != 2:
            raise ValueError(f"node {j} has {cnt} selected input edges, expected 2")


def encode(arch: DiscreteArch) -> np.ndarray:
    cfg = arch.config
    bits = np.zeros(cfg.num_bits, dtype=np.uint8)
    for s, d, o in arch.edges:
        bits[cfg.edge_index(s, d) * cfg.num_ops + cfg.ops.index(o)] = 1
    return bits


def decode(bits, config: CellConfig = DEFAULT_CONFIG) -> DiscreteArch:
    bits = np.asarray(bits)
    if bits.ndim != 1 or bits.shape[0] != config.num_bits:
        raise EncodingLengthError(f"expected {config.num_bits} bits, got {bits.size}")
    if not np.all((bits == 0) | (bits == 1)):
        raise NonBinaryError("bits must be 0 or 1")
    want = 2 * config.num_intermediate
    found = int(bits.sum())
    if found != want:
        raise BitCountError(f"expected {want} set bits, found {found}")
    grid = bits.reshape(config.num_edges, config.num_ops)
    if grid[:, 0].any():
        e = int(np.flatnonzero(grid[:, 0])[0])
        raise NoneOpError(f"edge {config.edges[e]} selects 'none'")
    per_edge = grid.sum(axis=1)
    if (per_edge > 1).any():
        e = int(np.flatnonzero(per_edge > 1)[0])
        raise MultipleOpsError(f"edge {config.edges[e]} has {per_edge[e]} operations set")
    for j, sl in config.node_edge_slices():
        cnt = int(per_edge[sl].sum())
        if cnt != 2:
            raise EdgesPerNodeError(f"node {j} has {cnt} selected input edges, expected 2")
    edges = []
    for e, o in zip(*np.nonzero(grid)):
        s, d = config.edges[e]
        edges.append((s, d, config.ops[o]))
    return DiscreteArch(tuple(edges), config)


def bits_to_str(bits) -> str:
    return "".join("1" if b else "0" for b in np.asarray(bits))


def str_to_bits(text: str) -> np.ndarray:
    text = text.strip()
    if set(text) - {"0", "1"}:
        raise NonBinaryError("bit string may only contain '0' and '1'")
    return np.frombuffer(text.encode(), dtype=np.uint8) - ord("0")


def space_size(config: CellConfig = DEFAULT_CONFIG, ops_excluding_none: int | None = None) -> int:
    k = config.num_ops - 1 if ops_excluding_none is None else ops_excluding_none
    total = 1
    for j in range(2, config.num_nodes):
        total *= comb(j, 2)
    return total * k ** (2 * config.num_intermediate)


def edge_selections(config: CellConfig = DEFAULT_CONFIG):
    """All ways of keeping two input edges per intermediate node, as tuples of edge indices."""
    per_node = [itertools.combinations(range(sl.start, sl.stop), 2)
                for _, sl in config.node_edge_slices()]
    for combo in itertools.product(*per_node):
        yield tuple(e for pair in combo for e in pair)


def enumerate_archs(config: CellConfig = DEFAULT_CONFIG):
    """Every valid DiscreteArch of ``config``, as encodings. Only sensible for small spaces."""
    n_sel = 2 * config.num_intermediate
    for sel in edge_selections(config):
        for ops in itertools.product(range(1, config.num_ops), repeat=n_sel):
            bits = np.zeros(config.num_bits, dtype=np.uint8)
            for e, o in zip(sel, ops):
                bits[e * config.num_ops + o] = 1
            yield bits


def init_alpha(config: CellConfig = DEFAULT_CONFIG, rng=None, scale=1e-3) -> np.ndarray:
    if rng is None:
        return np.zeros((config.num_edges, config.num_ops))
    return scale * rng.standard_normal((config.num_edges, config.num_ops))


def normalize(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 2:
        raise ValueError(f"alpha must be a matrix, got shape {alpha.shape}")
    if not np.all(np.isfinite(alpha)):
        raise ValueError("alpha contains non-finite entries")
    return softmax(alpha, axis=1)


def _op_distributions(alpha_tilde):
    mass = alpha_tilde[:, 1:].sum(axis=1)
    if np.any(mass <= 1e-12):
        e = int(np.flatnonzero(mass <= 1e-12)[0])
        raise ValueError(f"edge {e} has no probability mass outside 'none'")
    return alpha_tilde[:, 1:] / mass[:, None]


def sample_encodings(alpha_tilde, n: int, rng: np.random.Generator,
                     config: CellConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Draw ``n`` sub-architectures as an ``(n, num_bits)`` 0/1 matrix.

    Two input edges per intermediate node uniformly without replacement; the
    operation on each kept edge from the edge's non-``none`` weights, renormalized.
    """
    alpha_tilde = np.asarray(alpha_tilde, dtype=np.float64)
    if alpha_tilde.shape != (config.num_edges, config.num_ops):
        raise ValueError(f"alpha_tilde shape {alpha_tilde.shape} does not match the cell")
    probs = _op_distributions(alpha_tilde)
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    selected = np.zeros((n, config.num_edges), dtype=bool)
    for j, sl in config.node_edge_slices():
        keys = rng.random((n, j))
        top2 = np.argsort(keys, axis=1)[:, :2]
        rows = np.arange(n)[:, None]
        selected[rows, sl.start + top2] = True
    u = rng.random((n, config.num_edges))
    op = 1 + (u[:, :, None] >= cdf[None, :, :]).sum(axis=2)
    op = np.minimum(op, config.num_ops - 1)
    bits = np.zeros((n, config.num_edges, config.num_ops), dtype=np.uint8)
    nn, ee = np.nonzero(selected)
    bits[nn, ee, op[nn, ee]] = 1
    return bits.reshape(n, config.num_bits)


def sample_subarch(alpha_tilde, rng, config: CellConfig = DEFAULT_CONFIG) -> DiscreteArch:
    return decode(sample_encodings(alpha_tilde, 1, rng, config)[0], config)


def random_arch_encodings(n: int, rng, config: CellConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Uniform over edge selections and non-``none`` operations."""
    return sample_encodings(np.full((config.num_edges, config.num_ops), 1.0 / config.num_ops),
                            n, rng, config)


def discretize(alpha_tilde, config: CellConfig = DEFAULT_CONFIG) -> DiscreteArch:
    """Keep the two strongest input edges per node and the strongest non-``none`` op on each.

    Ties go to the lower edge index, then the lower op index.
    """
    alpha_tilde = np.asarray(alpha_tilde, dtype=np.float64)
    best_op = 1 + np.argmax(alpha_tilde[:, 1:], axis=1)
    strength = np.max(alpha_tilde[:, 1:], axis=1)
    edges = []
    for j, sl in config.node_edge_slices():
        order = np.argsort(-strength[sl], kind="stable")[:2]
        for k in order:
            e = sl.start + int(k)
            s, d = config.edges[e]
            edges.append((s, d, config.ops[best_op[e]]))
    return DiscreteArch(tuple(edges), config)


def encoding_grad_to_alpha(grad_bits, alpha_tilde) -> np.ndarray:
    """Straight-through chain: bits -> alpha_tilde is taken as identity, then the row softmax VJP."""
    alpha_tilde = np.asarray(alpha_tilde, dtype=np.float64)
    grad_bits = np.asarray(grad_bits, dtype=np.float64)
    if grad_bits.size != alpha_tilde.size:
        raise ValueError(f"gradient has {grad_bits.size} entries, expected {alpha_tilde.size}")
    return softmax_vjp(alpha_tilde, grad_bits.reshape(alpha_tilde.shape), axis=1)
