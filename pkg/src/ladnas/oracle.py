"""Ground-truth latency sources, FLOPs accounting and the (encoding, latency) dataset."""
from __future__ import annotations

import json
import logging
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .arch import (
    DEFAULT_CONFIG,
    CellConfig,
    DiscreteArch,
    bits_to_str,
    decode,
    encode,
    random_arch_encodings,
    str_to_bits,
)
from .numeric import make_rng

log = logging.getLogger(__name__)

DATASET_VERSION = 1

DEFAULT_LATENCY_MS = {
    "skip_connect": 0.3,
    "max_pool_3x3": 0.8,
    "avg_pool_3x3": 0.8,
    "sep_conv_3x3": 2.6,
    "sep_conv_5x5": 3.4,
    "dil_conv_3x3": 1.9,
    "dil_conv_5x5": 2.5,
}
DEFAULT_FLOPS_M = {
    "skip_connect": 0.0,
    "max_pool_3x3": 15.0,
    "avg_pool_3x3": 15.0,
    "sep_conv_3x3": 90.0,
    "sep_conv_5x5": 150.0,
    "dil_conv_3x3": 45.0,
    "dil_conv_5x5": 75.0,
}


def _check_costs(costs: dict, what: str):
    if "none" in costs:
        raise ValueError(f"{what}: 'none' has no cost entry")
    for op, v in costs.items():
        if v < 0:
            raise ValueError(f"{what}: negative cost for {op}")


@dataclass
class CostTable:
    latency_ms: dict = field(default_factory=lambda: dict(DEFAULT_LATENCY_MS))
    flops_m: dict = field(default_factory=lambda: dict(DEFAULT_FLOPS_M))

    def __post_init__(self):
        _check_costs(self.latency_ms, "latency table")
        _check_costs(self.flops_m, "FLOPs table")

    def flops_vector(self, config: CellConfig = DEFAULT_CONFIG) -> np.ndarray:
        return np.array([0.0] + [self.flops_m[o] for o in config.ops[1:]])


@dataclass
class SyntheticHardwareModel:
    """Additive op costs plus topology terms, so latency is not a function of the op multiset alone."""

    fixed_overhead_ms: float = 5.0
    base_ms: dict = field(default_factory=lambda: dict(DEFAULT_LATENCY_MS))
    memory_penalty_ms: float = 0.9
    depth_penalty_ms: float = 1.2
    noise_std_ms: float = 0.0

    def __post_init__(self):
        _check_costs(self.base_ms, "synthetic base costs")
        for name in ("fixed_overhead_ms", "memory_penalty_ms", "depth_penalty_ms", "noise_std_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def load_oracle_config(path) -> tuple[SyntheticHardwareModel, CostTable]:
    """Read a JSON file with optional ``synthetic`` and ``table`` sections."""
    with open(path) as fh:
        raw = json.load(fh)
    model = SyntheticHardwareModel(**raw.get("synthetic", {}))
    table = CostTable(**raw.get("table", {}))
    return model, table


def memory_count(arch: DiscreteArch) -> int:
    """Selected edges whose source is an intermediate node."""
    return sum(1 for s, _, _ in arch.edges if s >= 2)


def depth(arch: DiscreteArch) -> int:
    """Edges on the longest selected path from an input node to any intermediate node."""
    longest = [0] * arch.config.num_nodes
    for s, d, _ in arch.edges:  # sorted by destination, so sources are final
        longest[d] = max(longest[d], longest[s] + 1)
    return max(longest[2:])


def synthetic_latency(arch: DiscreteArch, model: SyntheticHardwareModel, repeats: int = 1,
                      rng: np.random.Generator | None = None) -> float:
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    lat = model.fixed_overhead_ms
    lat += sum(model.base_ms[o] for o in arch.ops)
    lat += model.memory_penalty_ms * memory_count(arch)
    lat += model.depth_penalty_ms * depth(arch)
    if model.noise_std_ms > 0:
        if rng is None:
            raise ValueError("a generator is required when noise_std_ms > 0")
        lat += float(np.mean(rng.normal(0.0, model.noise_std_ms, size=repeats)))
    return float(lat)


def table_latency(arch: DiscreteArch, table: CostTable) -> float:
    return float(sum(table.latency_ms[o] for o in arch.ops))


def flops(arch: DiscreteArch, table: CostTable) -> float:
    return float(sum(table.flops_m[o] for o in arch.ops))


def edge_selection_probs(config: CellConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Probability 2/j that an edge into node j is kept by the uniform per-node sampler."""
    return np.array([2.0 / d for _, d in config.edges])


def expected_flops(alpha_tilde, table: CostTable, config: CellConfig = DEFAULT_CONFIG,
                   edge_weighting: bool = True):
    """Expected FLOPs under the sampler, and its (constant) gradient w.r.t. alpha_tilde."""
    alpha_tilde = np.asarray(alpha_tilde, dtype=np.float64)
    w = edge_selection_probs(config) if edge_weighting else np.ones(config.num_edges)
    grad = w[:, None] * table.flops_vector(config)[None, :]
    return float(np.sum(grad * alpha_tilde)), grad


class OracleError(RuntimeError):
    pass


class AdapterTimeout(OracleError):
    pass


class AdapterMalformedResponse(OracleError):
    pass


class AdapterExitError(OracleError):
    pass


def external_latency(arch_or_bits, adapter_command: str, timeout_s: float = 30.0) -> float:
    """Ask an external process for a latency over a one-line JSON exchange on stdin/stdout."""
    if isinstance(arch_or_bits, DiscreteArch):
        bits = bits_to_str(encode(arch_or_bits))
    else:
        bits = bits_to_str(arch_or_bits)
    request = json.dumps({"bits": bits}) + "\n"
    try:
        proc = subprocess.run(adapter_command, shell=True, input=request, capture_output=True,
                              text=True, timeout=timeout_s)
    except subprocess.TimeoutExpired as exc:
        raise AdapterTimeout(f"adapter timed out after {timeout_s}s") from exc
    if proc.returncode != 0:
        raise AdapterExitError(
            f"adapter exited with status {proc.returncode}: {proc.stderr.strip()[:200]}"
        )
    lines = proc.stdout.strip().splitlines()
    try:
        value = float(json.loads(lines[0])["latency_ms"])
    except (IndexError, KeyError, TypeError, ValueError) as exc:
        raise AdapterMalformedResponse(f"bad adapter response {proc.stdout[:200]!r}") from exc
    if not np.isfinite(value) or value <= 0:
        raise AdapterMalformedResponse(f"adapter returned non-positive latency {value}")
    return value


class SyntheticOracle:
    oracle_id = "synthetic"

    def __init__(self, model: SyntheticHardwareModel | None = None):
        self.model = model or SyntheticHardwareModel()

    def params(self):
        return {"kind": "synthetic", **asdict(self.model)}

    def measure(self, arch, repeats, rng):
        return synthetic_latency(arch, self.model, repeats, rng), repeats


class TableOracle:
    oracle_id = "table"

    def __init__(self, table: CostTable | None = None):
        self.table = table or CostTable()

    def params(self):
        return {"kind": "table", "latency_ms": dict(self.table.latency_ms)}

    def measure(self, arch, repeats, rng):
        return table_latency(arch, self.table), repeats


class ExternalOracle:
    oracle_id = "external"

    def __init__(self, command: str, timeout_s: float = 30.0):
        self.command = command
        self.timeout_s = timeout_s

    def params(self):
        return {"kind": "external", "command": self.command, "timeout_s": self.timeout_s}

    def measure(self, arch, repeats, rng):
        # the adapter aggregates its own measurements
        return external_latency(arch, self.command, self.timeout_s), 1


@dataclass
class LatencyRecord:
    bits: str
    latency_ms: float
    flops_m: float | None = None
    repeats: int = 1
    oracle_id: str = "synthetic"

    def __post_init__(self):
        if not self.latency_ms > 0:
            raise ValueError(f"latency must be positive, got {self.latency_ms}")


class LatencyDataset:
    def __init__(self, records, meta=None, allow_duplicates=False,
                 config: CellConfig = DEFAULT_CONFIG):
        self.records = list(records)
        self.meta = dict(meta or {})
        self.allow_duplicates = allow_duplicates
        self.config = config
        if not allow_duplicates:
            seen = set()
            for r in self.records:
                if r.bits in seen:
                    raise ValueError(f"duplicate encoding {r.bits}")
                seen.add(r.bits)

    def __len__(self):
        return len(self.records)

    def encodings(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.config.num_bits))
        return np.stack([str_to_bits(r.bits) for r in self.records]).astype(np.float64)

    def latencies(self) -> np.ndarray:
        return np.array([r.latency_ms for r in self.records], dtype=np.float64)

    def subset(self, indices):
        return LatencyDataset([self.records[i] for i in indices], self.meta,
                              self.allow_duplicates, self.config)

    def validate(self):
        for i, r in enumerate(self.records):
            try:
                decode(str_to_bits(r.bits), self.config)
            except ValueError as exc:
                raise ValueError(f"record {i}: {exc}") from exc


class CollectionAborted(OracleError):
    def __init__(self, message, partial: LatencyDataset):
        super().__init__(message)
        self.partial = partial


def collect_dataset(n: int, oracle, repeats: int = 20, seed: int = 0, dedupe: bool = True,
                    table: CostTable | None = None, jobs: int = 1, retries: int = 2,
                    max_failures: int = 10, config: CellConfig = DEFAULT_CONFIG) -> LatencyDataset:
    """Measure ``n`` uniformly random architectures.

    Record ``i`` draws its measurement noise from the substream ``(seed, 1, i)``, so
    output does not depend on ``jobs``. Records whose oracle call fails ``1 + retries``
    times are skipped and listed under ``meta["failures"]``; more than
    ``max_failures`` skips raises :class:`CollectionAborted` carrying the partial dataset.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    table = table or CostTable()
    arch_rng = make_rng((seed, 0))
    encs = []
    seen = set()
    while len(encs) < n:
        batch = random_arch_encodings(max(n - len(encs), 1), arch_rng, config)
        for bits in batch:
            key = bits_to_str(bits)
            if dedupe and key in seen:
                continue
            seen.add(key)
            encs.append(key)
            if len(encs) == n:
                break

    def measure(i):
        arch = decode(str_to_bits(encs[i]), config)
        last = None
        for attempt in range(1 + retries):
            rng = make_rng((seed, 1, i, attempt))
            try:
                lat, reps = oracle.measure(arch, repeats, rng)
                return LatencyRecord(encs[i], lat, flops(arch, table), reps, oracle.oracle_id), None
            except OracleError as exc:
                last = exc
        return None, {"index": i, "error": type(last).__name__, "message": str(last)}

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(measure, range(n)))
    else:
        results = [measure(i) for i in range(n)]

    records, failures = [], []
    for rec, fail in results:
        if fail is not None:
            log.warning("record %d skipped: %s: %s", fail["index"], fail["error"], fail["message"])
            failures.append(fail)
        else:
            records.append(rec)
    meta = {
        "seed": seed,
        "n": n,
        "repeats": repeats,
        "dedupe": dedupe,
        "oracle": oracle.params(),
        "flops_table": dict(table.flops_m),
        "version": DATASET_VERSION,
    }
    if failures:
        meta["failures"] = failures
    ds = LatencyDataset(records, meta, allow_duplicates=not dedupe, config=config)
    if len(failures) > max_failures:
        raise CollectionAborted(f"{len(failures)} records failed (budget {max_failures})", ds)
    return ds


def split_dataset(ds: LatencyDataset, train_fraction: float, seed: int = 0):
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(ds)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} records at {train_fraction} leaves an empty side")
    perm = make_rng(seed).permutation(n)
    return ds.subset(perm[:n_train]), ds.subset(perm[n_train:])


def save_dataset(ds: LatencyDataset, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"meta": ds.meta}) + "\n")
        for r in ds.records:
            fh.write(json.dumps(asdict(r)) + "\n")


def load_dataset(path, config: CellConfig = DEFAULT_CONFIG) -> LatencyDataset:
    records, meta = [], {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if "meta" in obj:
                meta = obj["meta"]
                continue
            try:
                records.append(LatencyRecord(**obj))
            except TypeError as exc:
                raise ValueError(f"{path}:{lineno}: bad record ({exc})") from exc
    if meta.get("version", DATASET_VERSION) != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {meta.get('version')}")
    ds = LatencyDataset(records, meta, allow_duplicates=not meta.get("dedupe", True), config=config)
    ds.validate()
    return ds
