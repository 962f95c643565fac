import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from ladnas.arch import (
    DEFAULT_CONFIG,
    OPS,
    BitCountError,
    CellConfig,
    DiscreteArch,
    EdgesPerNodeError,
    EncodingError,
    EncodingLengthError,
    MultipleOpsError,
    NonBinaryError,
    NoneOpError,
    bits_to_str,
    decode,
    discretize,
    encode,
    encoding_grad_to_alpha,
    enumerate_archs,
    normalize,
    random_arch_encodings,
    sample_encodings,
    sample_subarch,
    space_size,
    str_to_bits,
)
from ladnas.numeric import make_rng, softmax

from conftest import central_diff, rel_err

EXAMPLE = DiscreteArch((
    (0, 2, "skip_connect"), (1, 2, "sep_conv_3x3"),
    (0, 3, "sep_conv_3x3"), (2, 3, "dil_conv_3x3"),
    (0, 4, "max_pool_3x3"), (1, 4, "skip_connect"),
    (2, 5, "sep_conv_5x5"), (4, 5, "avg_pool_3x3"),
))


def test_edge_ordering():
    cfg = DEFAULT_CONFIG
    assert cfg.num_edges == 14 and cfg.num_bits == 112
    assert cfg.edges[0] == (0, 2) and cfg.edges[1] == (1, 2) and cfg.edges[2] == (0, 3)
    assert cfg.edges[13] == (4, 5)
    for k, (s, d) in enumerate(cfg.edges):
        assert s < d and cfg.edge_index(s, d) == k
    assert OPS[0] == "none" and len(OPS) == 8


def test_normalize_examples():
    np.testing.assert_allclose(normalize(np.zeros((14, 8))), 1 / 8, rtol=1e-15)
    c = 0.7
    row = np.full(8, c)
    row[3] = c + np.log(7.0)
    p = normalize(row[None, :])[0]
    np.testing.assert_allclose(p[3], 0.5, rtol=1e-12)
    np.testing.assert_allclose(np.delete(p, 3), 1 / 14, rtol=1e-12)


def test_normalize_rejects_nonfinite():
    a = np.zeros((14, 8))
    a[2, 2] = np.nan
    with pytest.raises(ValueError):
        normalize(a)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-30, 30))
def test_normalize_rows_and_shift(seed, shift):
    a = make_rng(seed).standard_normal((14, 8)) * 3
    p = normalize(a)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p > 0) and np.all(p < 1)
    np.testing.assert_allclose(normalize(a + shift), p, rtol=1e-9)


def test_encode_example_bits():
    bits = encode(EXAMPLE)
    assert set(np.flatnonzero(bits).tolist()) == {1, 12, 20, 38, 42, 49, 93, 107}
    assert decode(bits) == EXAMPLE


def test_round_trip_10k():
    encs = random_arch_encodings(10_000, make_rng(5))
    for bits in encs:
        arch = decode(bits)
        assert np.array_equal(encode(arch), bits)
        assert decode(encode(arch)) == arch


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_property(seed):
    arch = sample_subarch(normalize(make_rng(seed).standard_normal((14, 8))), make_rng(seed))
    assert decode(encode(arch)) == arch
    assert bits_to_str(encode(arch)).count("1") == 8
    assert np.array_equal(str_to_bits(bits_to_str(encode(arch))), encode(arch))


def test_decode_zero_vector_message():
    with pytest.raises(BitCountError, match="expected 8 set bits, found 0"):
        decode(np.zeros(112, dtype=np.uint8))


def _bits():
    return encode(EXAMPLE).copy()


def test_decode_error_classes_are_distinct():
    cases = []
    cases.append((EncodingLengthError, np.zeros(111, dtype=np.uint8)))
    b = _bits().astype(np.int64)
    b[0] = 2
    b[1] = 0
    cases.append((NonBinaryError, b))
    b = _bits()
    b[5] = 1
    cases.append((BitCountError, b))
    b = _bits()
    b[1], b[0] = 0, 1  # move skip on edge (0,2) onto none
    cases.append((NoneOpError, b))
    b = _bits()
    b[12], b[2] = 0, 1  # edge (1,2) loses its op, edge (0,2) gains a second one
    cases.append((MultipleOpsError, b))
    b = _bits()
    b[12], b[3 * 8 + 1] = 0, 1  # node 2 loses an edge, node 3 gains one
    cases.append((EdgesPerNodeError, b))
    seen = set()
    for cls, bits in cases:
        with pytest.raises(cls):
            decode(bits)
        assert issubclass(cls, EncodingError)
        seen.add(cls)
    assert len(seen) == 6


def test_discrete_arch_validation():
    with pytest.raises(ValueError):
        DiscreteArch(EXAMPLE.edges[:-1])
    with pytest.raises(ValueError):
        DiscreteArch(EXAMPLE.edges[:-1] + ((4, 5, "none"),))
    with pytest.raises(ValueError):
        DiscreteArch(EXAMPLE.edges[:-1] + ((2, 5, "skip_connect"),))


def test_json_round_trip():
    assert DiscreteArch.from_json(EXAMPLE.to_json()) == EXAMPLE


def test_space_size_examples():
    assert space_size() == 1_037_664_180
    assert space_size(CellConfig(1), 1) == 1
    assert space_size(CellConfig(2), 2) == 48
    assert space_size(CellConfig(8), 7) == np.prod([comb(j, 2) for j in range(2, 10)], dtype=object) * 7**16


def test_space_size_default_brute_force_edges():
    selections = 0
    for combo in itertools.product(*[itertools.combinations(range(j), 2) for j in range(2, 6)]):
        selections += 1
    assert selections == 180
    assert selections * 7**8 == space_size()


@pytest.mark.parametrize("n_int", [1, 2])
@pytest.mark.parametrize("ops", [("none", "skip_connect"), ("none", "skip_connect", "sep_conv_3x3")])
def test_space_size_matches_enumeration(n_int, ops):
    cfg = CellConfig(n_int, ops)
    encs = list(enumerate_archs(cfg))
    assert len(encs) == space_size(cfg)
    assert len({e.tobytes() for e in encs}) == len(encs)
    for e in encs:
        decode(e, cfg)


def test_sample_degenerate_skip():
    at = np.zeros((14, 8))
    at[:, 0] = 0.5
    at[:, 1] = 0.5
    for _ in range(20):
        arch = sample_subarch(at, make_rng(_))
        assert set(arch.ops) == {"skip_connect"}


def test_sample_rejects_all_none_row():
    at = np.full((14, 8), 1 / 8)
    at[3] = 0.0
    at[3, 0] = 1.0
    with pytest.raises(ValueError, match="edge 3"):
        sample_encodings(at, 1, make_rng(0))


def test_sample_marginals_uniform():
    n = 100_000
    encs = sample_encodings(np.full((14, 8), 1 / 8), n, make_rng(11))
    grid = encs.reshape(n, 14, 8)
    chosen = grid.any(axis=2)
    # node 5 edges are 9..13
    freq = chosen[:, 9:14].mean(axis=0)
    np.testing.assert_allclose(freq, 0.4, atol=0.01)
    for j, sl in DEFAULT_CONFIG.node_edge_slices():
        counts = chosen[:, sl].sum(axis=0)
        assert chisquare(counts).pvalue > 0.001
    e = 9
    ops = grid[chosen[:, e], e, 1:].sum(axis=0)
    np.testing.assert_allclose(ops / ops.sum(), 1 / 7, atol=0.01)
    assert chisquare(ops).pvalue > 0.001


def test_sample_op_marginals_follow_alpha():
    at = normalize(make_rng(3).standard_normal((14, 8)))
    n = 100_000
    grid = sample_encodings(at, n, make_rng(4)).reshape(n, 14, 8)
    for e in (0, 7, 13):
        sel = grid[:, e, :].any(axis=1)
        counts = grid[sel, e, 1:].sum(axis=0)
        expect = at[e, 1:] / at[e, 1:].sum() * counts.sum()
        assert chisquare(counts, expect).pvalue > 0.001


def test_sampled_encodings_are_valid():
    at = normalize(make_rng(8).standard_normal((14, 8)) * 2)
    for bits in sample_encodings(at, 500, make_rng(9)):
        decode(bits)


def test_discretize_uniform_ties():
    arch = discretize(np.full((14, 8), 1 / 8))
    assert [(s, d) for s, d, _ in arch.edges] == [(0, 2), (1, 2), (0, 3), (1, 3), (0, 4), (1, 4), (0, 5), (1, 5)]
    assert set(arch.ops) == {"skip_connect"}


def test_discretize_strict_top2():
    rng = make_rng(2)
    at = np.full((14, 8), 1e-3)
    strengths = rng.permutation(14) + 1.0
    ops = rng.integers(1, 8, size=14)
    at[np.arange(14), ops] = strengths
    at = at / at.sum(axis=1, keepdims=True)
    arch = discretize(at)
    for j, sl in DEFAULT_CONFIG.node_edge_slices():
        top = sorted(range(sl.start, sl.stop), key=lambda e: -at[e, ops[e]])[:2]
        kept = {(s, d, o) for s, d, o in arch.edges if d == j}
        assert kept == {(*DEFAULT_CONFIG.edges[e], OPS[ops[e]]) for e in top}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_discretize_always_valid(seed):
    arch = discretize(normalize(make_rng(seed).standard_normal((14, 8)) * 4))
    decode(encode(arch))


def test_encoding_grad_examples():
    at = np.full((14, 8), 1 / 8)
    assert not encoding_grad_to_alpha(np.zeros(112), at).any()
    g = np.zeros((14, 8))
    g[0, 0] = 1.0
    out = encoding_grad_to_alpha(g.ravel(), at)
    e0 = np.eye(8)[0]
    np.testing.assert_allclose(out[0], (e0 - 1 / 8) / 8, rtol=1e-15)
    g2 = g.copy()
    g2[0] += 3.3
    np.testing.assert_allclose(encoding_grad_to_alpha(g2.ravel(), at)[0], out[0], atol=1e-15)
    with pytest.raises(ValueError):
        encoding_grad_to_alpha(np.zeros(111), at)


@pytest.mark.parametrize("seed", range(10))
def test_encoding_grad_matches_finite_differences(seed):
    rng = make_rng(seed)
    alpha = rng.standard_normal((14, 8))
    w = rng.standard_normal(112)
    got = encoding_grad_to_alpha(w, softmax(alpha, axis=1))
    fd = central_diff(lambda a: float(w @ softmax(a, axis=1).ravel()), alpha.copy())
    assert rel_err(got, fd) < 1e-6
