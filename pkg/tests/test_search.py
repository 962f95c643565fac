import csv
import io
import itertools
import json
import math

import numpy as np
import pytest

from ladnas.arch import (
    DEFAULT_CONFIG,
    OPS,
    PARAM_FREE,
    CellConfig,
    decode,
    encode,
    normalize,
    sample_encodings,
    str_to_bits,
)
from ladnas.lpm import Lpm, predict
from ladnas.numeric import make_rng, softmax
from ladnas.oracle import CostTable, SyntheticHardwareModel, synthetic_latency
from ladnas.search import (
    CONV_SPECS,
    FlopsSearchConfig,
    SearchConfig,
    SearchDiverged,
    Supernet,
    evaluate_arch,
    history_to_csv,
    latency_loss,
    make_task,
    op_backward,
    op_forward,
    run_flops_search,
    run_search,
    save_arch,
    supernet_forward,
    supernet_loss_and_grads,
)

from conftest import central_diff, rel_err

SMALL = dict(epochs=2, n_per_split=200)


class LinearPredictor:
    """Additive table latency with its exact (constant) input gradient."""

    def __init__(self, config=DEFAULT_CONFIG):
        t = CostTable()
        self.w = np.tile([0.0] + [t.latency_ms[o] for o in config.ops[1:]], config.num_edges)
        self.min_ms, self.max_ms = 2.4, 27.2

    def predict_batch_with_grad(self, X):
        return X @ self.w, np.tile(self.w, (len(X), 1))


class SyntheticPredictor:
    def __init__(self, config=DEFAULT_CONFIG):
        self.config = config
        self.model = SyntheticHardwareModel()

    def predict_batch_with_grad(self, X):
        vals = [synthetic_latency(decode(x.astype(np.uint8), self.config), self.model) for x in X]
        return np.array(vals), np.zeros_like(X)


@pytest.mark.parametrize("name", OPS)
def test_op_backward_matches_finite_differences(name):
    rng = make_rng(OPS.index(name))
    x = rng.standard_normal((3, 16))
    g = rng.standard_normal((3, 16))
    kern = rng.standard_normal(CONV_SPECS[name][0]) if name in CONV_SPECS else None
    out, cache = op_forward(name, x, kern)
    gx, gk = op_backward(name, x, g, cache, kern)
    fd = central_diff(lambda v: float(np.sum(g * op_forward(name, v, kern)[0])), x.copy())
    assert rel_err(gx, fd) < 1e-6 or (not fd.any() and not gx.any())
    if kern is not None:
        fdk = central_diff(lambda k: float(np.sum(g * op_forward(name, x, k)[0])), kern.copy())
        assert rel_err(gk, fdk) < 1e-6


def test_pool_values():
    x = np.array([1.0, 5.0, 2.0, 0.0])
    np.testing.assert_array_equal(op_forward("max_pool_3x3", x)[0], [5.0, 5.0, 5.0, 2.0])
    np.testing.assert_allclose(op_forward("avg_pool_3x3", x)[0], [3.0, 8 / 3, 7 / 3, 1.0])


def test_all_none_gives_log_classes():
    net = Supernet(d=9, rng=make_rng(0))
    at = np.zeros((14, 8))
    at[:, 0] = 1.0
    X = make_rng(1).standard_normal((10, 9))
    y = np.arange(10) % 4
    loss, logits = supernet_forward(net, at, X, y)
    assert loss == pytest.approx(math.log(4), abs=1e-15)
    assert not logits.any()


def test_all_skip_is_linear_propagation():
    cfg = CellConfig(2, OPS[:4])
    net = Supernet(cfg, d=4, rng=make_rng(2))
    at = np.zeros((cfg.num_edges, cfg.num_ops))
    at[:, 1] = 1.0
    X = make_rng(3).standard_normal((5, 4))
    _, (_, nodes, h, _) = net.forward(at, X)
    x0, x1 = nodes[0], nodes[1]
    np.testing.assert_allclose(nodes[2], x0 + x1)
    np.testing.assert_allclose(nodes[3], x0 + x1 + (x0 + x1))
    np.testing.assert_allclose(h, np.concatenate([nodes[2], nodes[3]], axis=1))


def test_supernet_dimension_errors():
    net = Supernet(d=9)
    with pytest.raises(ValueError):
        net.forward(np.full((14, 8), 1 / 8), np.zeros((2, 5)))
    with pytest.raises(ValueError, match="span 9"):
        Supernet(d=8)


SMALL_D4 = ("none", "skip_connect", "max_pool_3x3", "avg_pool_3x3", "sep_conv_3x3")


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("ops,d", [(SMALL_D4, 4), (OPS, 9)])
def test_supernet_backward_matches_finite_differences(seed, ops, d):
    cfg = CellConfig(2, ops)
    rng = make_rng(seed)
    net = Supernet(cfg, d=d, rng=rng)
    for k in net.params:
        net.params[k] = net.params[k] + 0.1 * rng.standard_normal(net.params[k].shape)
    at = normalize(rng.standard_normal((cfg.num_edges, cfg.num_ops)))
    X = rng.standard_normal((6, d))
    y = rng.integers(0, 4, 6)
    _, g, ga = supernet_loss_and_grads(net, at, X, y)
    for key in net.params:
        orig = net.params[key].copy()

        def f(v, key=key):
            net.params[key] = v
            return supernet_forward(net, at, X, y)[0]

        fd = central_diff(f, orig.copy())
        net.params[key] = orig
        assert rel_err(g[key], fd) < 1e-4, key
    fd = central_diff(lambda a: supernet_forward(net, a, X, y)[0], at.copy())
    assert rel_err(ga, fd) < 1e-4


def test_latency_loss_single_sample():
    lpm = Lpm.init(112, make_rng(0), 5.0, 40.0)
    alpha = make_rng(1).standard_normal((14, 8))
    lat, _ = latency_loss(alpha, lpm, 1, make_rng(9))
    bits = sample_encodings(normalize(alpha), 1, make_rng(9))[0]
    assert lat == pytest.approx(predict(lpm, bits), rel=1e-14)


def test_latency_loss_repeatable():
    lpm = Lpm.init(112, make_rng(0), 5.0, 40.0)
    alpha = make_rng(2).standard_normal((14, 8))
    a = latency_loss(alpha, lpm, 20, make_rng(3))
    b = latency_loss(alpha, lpm, 20, make_rng(3))
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
    with pytest.raises(ValueError):
        latency_loss(alpha, lpm, 0, make_rng(3))


def test_latency_noise_affects_value_only():
    lpm = Lpm.init(112, make_rng(0), 5.0, 40.0)
    alpha = make_rng(2).standard_normal((14, 8))
    clean = latency_loss(alpha, lpm, 20, make_rng(3))
    noisy = latency_loss(alpha, lpm, 20, make_rng(3), noise_std=1.0)
    assert clean[0] != noisy[0]
    assert np.array_equal(clean[1], noisy[1])


def test_latency_loss_skip_degenerate_matches_exhaustive_mean():
    alpha = np.full((14, 8), -30.0)
    alpha[:, 1] = 0.0
    model = SyntheticHardwareModel()
    exact = []
    for sel in itertools.product(*[itertools.combinations(range(j), 2) for j in range(2, 6)]):
        edges = [(s, j + 2, "skip_connect") for j, pair in enumerate(sel) for s in pair]
        exact.append(synthetic_latency(decode(encode_edges(edges)), model))
    assert len(exact) == 180
    lat, _ = latency_loss(alpha, SyntheticPredictor(), 100_000, make_rng(4))
    assert lat == pytest.approx(np.mean(exact), rel=0.005)


def encode_edges(edges):
    from ladnas.arch import DiscreteArch

    return encode(DiscreteArch(tuple(edges)))


def test_task_shapes_and_determinism():
    t1, t2 = make_task(3), make_task(3)
    assert t1.train_X.shape == (2000, 16) and t1.val_X.shape == (2000, 16)
    assert np.array_equal(t1.train_X, t2.train_X) and np.array_equal(t1.val_y, t2.val_y)
    assert set(np.unique(t1.train_y)) == {0, 1, 2, 3}


def test_search_history_rows_and_decomposition():
    lpm = LinearPredictor()
    cfg = SearchConfig(lam=0.2, **SMALL)
    res = run_search(cfg, lpm, task_seed=1)
    assert len(res.history) == cfg.epochs
    span = lpm.max_ms - lpm.min_ms
    for row in res.history:
        assert all(math.isfinite(v) for v in row.values())
        assert row["total_loss"] == pytest.approx(
            row["val_loss"] + cfg.lam * (row["lat_ms"] - lpm.min_ms) / span, rel=1e-12)
    decode(encode(res.arch))


def test_search_raw_ms_mode():
    cfg = SearchConfig(lam=0.01, raw_ms=True, **SMALL)
    res = run_search(cfg, LinearPredictor(), task_seed=1)
    row = res.history[-1]
    assert row["total_loss"] == pytest.approx(row["val_loss"] + 0.01 * row["lat_ms"], rel=1e-12)


def test_lambda_zero_never_touches_predictor():
    class Exploding:
        min_ms, max_ms = 0.0, 1.0

        def predict_batch_with_grad(self, X):
            raise AssertionError("predictor consulted")

    cfg = SearchConfig(lam=0.0, **SMALL)
    a = run_search(cfg, Exploding(), task_seed=2)
    b = run_search(cfg, None, task_seed=2)
    assert a.alpha.tobytes() == b.alpha.tobytes()
    assert a.arch == b.arch


def test_eta_zero_equals_lambda_zero():
    a = run_search(SearchConfig(lam=0.0, **SMALL), None, task_seed=2)
    b = run_flops_search(FlopsSearchConfig(eta=0.0, **SMALL), CostTable(), task_seed=2)
    assert a.alpha.tobytes() == b.alpha.tobytes()
    assert a.arch == b.arch


def test_flops_history_uses_expected_flops():
    res = run_flops_search(FlopsSearchConfig(eta=0.001, **SMALL), CostTable(), task_seed=0)
    assert res.fields[3] == "exp_flops_m"
    row = res.history[0]
    assert row["total_loss"] == pytest.approx(row["val_loss"] + 0.001 * row["exp_flops_m"], rel=1e-12)


def test_search_is_reproducible():
    cfg = SearchConfig(lam=0.2, **SMALL)
    a = history_to_csv(run_search(cfg, LinearPredictor(), 0))
    b = history_to_csv(run_search(cfg, LinearPredictor(), 0))
    assert a == b
    rows = list(csv.reader(io.StringIO(a)))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "lat_ms", "total_loss", "probe_latency_ms"]
    assert len(rows) == 3


def test_extreme_lambda_prefers_parameter_free_ops():
    res = run_search(SearchConfig(lam=1.0, seed=0), LinearPredictor(), task_seed=0)
    assert sum(o in PARAM_FREE for o in res.arch.ops) >= 6


def test_divergence_reports_epoch():
    class NanPredictor(LinearPredictor):
        def predict_batch_with_grad(self, X):
            v, g = super().predict_batch_with_grad(X)
            return v * np.nan, g

    with pytest.raises(SearchDiverged) as info:
        run_search(SearchConfig(lam=0.2, **SMALL), NanPredictor(), 0)
    assert info.value.epoch == 0


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(lam=-1)
    with pytest.raises(ValueError):
        SearchConfig(M=0)
    with pytest.raises(ValueError):
        FlopsSearchConfig(eta=-0.1)
    with pytest.raises(ValueError, match="required"):
        run_search(SearchConfig(lam=0.2, **SMALL), None, 0)


def test_evaluate_arch_deterministic():
    task = make_task(0, n_per_split=300)
    arch = decode(sample_encodings(np.full((14, 8), 1 / 8), 1, make_rng(0))[0])
    a = evaluate_arch(arch, task, epochs=2)
    assert 0.0 <= a <= 1.0
    assert a == evaluate_arch(arch, task, epochs=2)
    assert a > 0.5  # well-separated mixture


def test_save_arch_document(tmp_path):
    arch = decode(sample_encodings(np.full((14, 8), 1 / 8), 1, make_rng(1))[0])
    p = tmp_path / "arch.json"
    save_arch(arch, p, **{"lambda": 0.2, "seed": 3})
    doc = json.loads(p.read_text())
    assert doc["version"] == 1 and doc["lambda"] == 0.2 and doc["seed"] == 3
    assert decode(str_to_bits(doc["bits"])) == arch
    assert len(doc["edges"]) == 8
