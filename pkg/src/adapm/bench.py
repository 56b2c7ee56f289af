"""Synthetic workloads, policy comparison and metrics.

Workers run inside the simulated cluster: between two synchronization rounds
each worker processes batches until its local time passes the end of the
round. A batch costs ``compute_ms_per_access`` per accessed key plus
``remote_read_ms`` for every synchronous read it had to make.

The default ``additive`` kernel pushes small integer-valued deltas derived
from (worker, batch, key), so final parameter values are exact and identical
across policies. The ``sgd`` kernel runs matrix-factorization SGD steps and
reports a held-out loss.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .client import Worker
from .core import ValidationError
from .protocol import PolicyMode
from .simulation import NetworkModel, SimCluster
from .timing import TimingConfig


PREFETCH_BATCHES = 16  # batches the loader prepares before training starts


class WorkloadKind(enum.Enum):
    ZIPF_HOTSPOT = "zipf"
    ROW_LOCALITY_MF = "mf"
    UNIFORM_SPARSE = "uniform"


class MemoryBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    kind: WorkloadKind = WorkloadKind.ZIPF_HOTSPOT
    num_keys: int = 10_000
    value_len: int = 8
    batches_per_epoch: int = 200
    batch_size: int = 16
    zipf_exponent: float = 1.1
    signal_offset_batches: int = 16
    seed: int = 0
    kernel: str = "additive"          # or "sgd" (MF only)
    mf_row_share: float = 0.5         # fraction of keys that are MF rows
    learning_rate: float = 0.05

    def __post_init__(self):
        if self.num_keys < 1 or self.value_len < 1:
            raise ValidationError("num_keys and value_len must be positive")
        if self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ValidationError("batches_per_epoch and batch_size must be positive")
        if self.signal_offset_batches < 0:
            raise ValidationError("signal offset must be non-negative")
        if self.kernel not in ("additive", "sgd"):
            raise ValidationError(f"unknown kernel {self.kernel!r}")
        if self.kernel == "sgd" and self.kind is not WorkloadKind.ROW_LOCALITY_MF:
            raise ValidationError("the sgd kernel needs the MF workload")
        if self.zipf_exponent <= 0:
            raise ValidationError("zipf exponent must be positive")


# -- access generation -----------------------------------------------------------

def _zipf_cdf(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** s
    return np.cumsum(w) / w.sum()


def generate_accesses(spec: WorkloadSpec, nodes: int, workers_per_node: int,
                      epochs: int) -> Dict[tuple, List[np.ndarray]]:
    """(node, worker) -> list of per-batch key arrays (with repeats) over all epochs."""
    root = np.random.SeedSequence(spec.seed)
    total = epochs * spec.batches_per_epoch
    out: Dict[tuple, List[np.ndarray]] = {}
    gids = [(n, w) for n in range(nodes) for w in range(workers_per_node)]
    children = root.spawn(len(gids) + 1)
    shared = np.random.default_rng(children[-1])
    if spec.kind is WorkloadKind.ROW_LOCALITY_MF:
        rows, cols = mf_split(spec.num_keys, spec.mf_row_share)
        if rows < len(gids):
            raise ValidationError("MF workload needs at least one row per worker")
        col_cdf = _zipf_cdf(cols, spec.zipf_exponent)
        col_perm = shared.permutation(cols)
        row_blocks = np.array_split(np.arange(rows), len(gids))
        for i, gid in enumerate(gids):
            rng = np.random.default_rng(children[i])
            n = total * spec.batch_size
            r = rng.choice(row_blocks[i], size=n)
            c = col_perm[np.searchsorted(col_cdf, rng.random(n), side="right").clip(0, cols - 1)]
            # visit points column by column, each worker starting at its own column
            start = (i * cols) // len(gids)
            order = np.lexsort((r, (c - start) % cols))
            pts = np.stack([r[order], rows + c[order]], axis=1)
            out[gid] = [pts[b * spec.batch_size:(b + 1) * spec.batch_size].reshape(-1)
                        for b in range(total)]
        return out
    if spec.kind is WorkloadKind.ZIPF_HOTSPOT:
        cdf = _zipf_cdf(spec.num_keys, spec.zipf_exponent)
        perm = shared.permutation(spec.num_keys)
    for i, gid in enumerate(gids):
        rng = np.random.default_rng(children[i])
        n = total * spec.batch_size
        if spec.kind is WorkloadKind.ZIPF_HOTSPOT:
            ranks = np.searchsorted(cdf, rng.random(n), side="right").clip(0, spec.num_keys - 1)
            keys = perm[ranks]
        else:
            keys = rng.integers(0, spec.num_keys, size=n)
        out[gid] = list(keys.reshape(total, spec.batch_size))
    return out


def mf_split(num_keys: int, row_share: float) -> tuple:
    rows = max(1, min(num_keys - 1, int(round(num_keys * row_share))))
    return rows, num_keys - rows


def additive_delta(gid: int, batch: int, keys: np.ndarray, value_len: int) -> np.ndarray:
    """Integer-valued deltas in [-3, 3], a pure function of (worker, batch, key)."""
    h = (keys.astype(np.uint64) * np.uint64(0x9E3779B1)
         + np.uint64(batch) * np.uint64(0x85EBCA77)
         + np.uint64(gid) * np.uint64(0xC2B2AE3D)) & np.uint64(0xFFFFFFFF)
    h ^= h >> np.uint64(15)
    h = (h * np.uint64(0x2C1B3C6D)) & np.uint64(0xFFFFFFFF)
    shifts = (np.arange(value_len, dtype=np.uint64) * np.uint64(3)) % np.uint64(30)
    return (((h[:, None] >> shifts[None, :]) % np.uint64(7)).astype(np.float32) - 3.0)


# -- metrics ------------------------------------------------------------------------

@dataclass
class MetricsReport:
    workload: str
    mode: str
    nodes: int
    workers_per_node: int
    epochs: int
    signal_offset: int
    bytes_sent_per_node: List[int]
    total_bytes: int
    pulls: int
    remote_pulls: int
    remote_access_share: float
    staleness_mean_ms: float
    staleness_p50_ms: float
    staleness_p99_ms: float
    relocation_count: int
    replica_creation_count: int
    rounds_executed: int
    sim_time_ms: float
    epoch_times_ms: List[float]
    loss: List[float]
    protocol_warnings: int
    max_hops: int
    invariant_violations: List[str]
    rows: List[dict] = field(default_factory=list)
    lambda_trace: List[List[float]] = field(default_factory=list)
    trace_csv: str = ""
    final_values: Optional[np.ndarray] = field(default=None, repr=False)
    expected_values: Optional[np.ndarray] = field(default=None, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        for k in ("rows", "lambda_trace", "trace_csv", "final_values", "expected_values"):
            d.pop(k)
        return d

    def to_json(self) -> str:
        d = self.summary()
        d["per_node_epoch"] = self.rows
        d["lambda_trace"] = self.lambda_trace
        return json.dumps(d, indent=2, sort_keys=True)


CSV_FIELDS = ["workload", "mode", "signal_offset", "node", "epoch", "bytes_sent", "pulls",
              "remote_pulls", "remote_access_share", "staleness_mean_ms", "relocations",
              "replica_creations", "rounds", "epoch_time_ms", "loss"]


def reports_csv(reports: Iterable[MetricsReport]) -> str:
    """One row per node per epoch, then a summary row (node and epoch ``all``)."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for rep in reports:
        for row in rep.rows:
            w.writerow(row)
        w.writerow({
            "workload": rep.workload, "mode": rep.mode, "signal_offset": rep.signal_offset,
            "node": "all", "epoch": "all", "bytes_sent": rep.total_bytes, "pulls": rep.pulls,
            "remote_pulls": rep.remote_pulls,
            "remote_access_share": _fmt(rep.remote_access_share),
            "staleness_mean_ms": _fmt(rep.staleness_mean_ms),
            "relocations": rep.relocation_count,
            "replica_creations": rep.replica_creation_count, "rounds": rep.rounds_executed,
            "epoch_time_ms": _fmt(rep.sim_time_ms),
            "loss": _fmt(rep.loss[-1]) if rep.loss else "",
        })
    return buf.getvalue()


def _fmt(x: float) -> str:
    return "nan" if x is None or math.isnan(x) else f"{x:.6g}"


# -- the benchmark loop ------------------------------------------------------------------

@dataclass
class _WorkerState:
    gid: int
    handle: Worker
    batches: List[np.ndarray]
    t: float = 0.0
    next_batch: int = 0
    signaled: int = 0


def memory_needed(spec: WorkloadSpec, mode: PolicyMode, nodes: int) -> int:
    """Bytes of parameter values one node must hold under ``mode``."""
    per_key = spec.value_len * 4
    if mode is PolicyMode.FULL_REPLICATION:
        return spec.num_keys * per_key
    return -(-spec.num_keys // nodes) * per_key


class _MF:
    """Ground truth and held-out sample for the SGD kernel."""

    def __init__(self, spec: WorkloadSpec, held_out: int = 2000):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7]))
        self.rows, self.cols = mf_split(spec.num_keys, spec.mf_row_share)
        scale = 1.0 / math.sqrt(spec.value_len)
        self.truth = rng.normal(0.0, scale, (spec.num_keys, spec.value_len)).astype(np.float32)
        self.init = rng.normal(0.0, 0.1, (spec.num_keys, spec.value_len)).astype(np.float32)
        r = rng.integers(0, self.rows, held_out)
        c = self.rows + rng.integers(0, self.cols, held_out)
        self.held_out = (r, c, np.einsum("ij,ij->i", self.truth[r], self.truth[c]))

    def loss(self, values: np.ndarray) -> float:
        r, c, y = self.held_out
        pred = np.einsum("ij,ij->i", values[r], values[c])
        return float(np.mean((pred - y) ** 2))


def run_benchmark(spec: WorkloadSpec, mode: PolicyMode = PolicyMode.ADAPM, nodes: int = 4,
                  workers_per_node: int = 2, epochs: int = 1, *,
                  timing: Optional[TimingConfig] = None, net: Optional[NetworkModel] = None,
                  compute_ms_per_access: float = 0.05, use_cache: bool = True,
                  check_invariants: bool = False, trace_keys: Iterable[int] = (),
                  memory_budget: Optional[int] = None,
                  max_drain_rounds: int = 10_000) -> MetricsReport:
    """Run ``epochs`` passes of ``spec`` on a simulated cluster and measure it."""
    if nodes < 1 or workers_per_node < 1 or epochs < 1:
        raise ValidationError("nodes, workers_per_node and epochs must be positive")
    if memory_budget is not None and memory_needed(spec, mode, nodes) > memory_budget:
        raise MemoryBudgetExceeded(
            f"{mode.value} needs {memory_needed(spec, mode, nodes)} bytes of parameters "
            f"per node, budget is {memory_budget}")
    net = net or NetworkModel()
    mf = _MF(spec) if spec.kernel == "sgd" else None
    cluster = SimCluster(nodes, workers_per_node, spec.num_keys, spec.value_len, mode, timing,
                         use_cache=use_cache, net=net, check_invariants=check_invariants,
                         trace_keys=trace_keys,
                         init_value=(lambda k: mf.init[k].copy()) if mf else None)
    accesses = generate_accesses(spec, nodes, workers_per_node, epochs)
    workers = []
    for n in range(nodes):
        for w in range(workers_per_node):
            workers.append(_WorkerState(n * workers_per_node + w,
                                        Worker(cluster.nodes[n], w, cluster),
                                        accesses[(n, w)]))
    total = epochs * spec.batches_per_epoch
    offset = spec.signal_offset_batches
    signals = mode.uses_intent
    expected = np.zeros((spec.num_keys, spec.value_len), dtype=np.float64)
    limit = spec.batches_per_epoch

    def signal_ahead(ws: _WorkerState, b: int) -> None:
        last = min(b + offset, total - 1)
        while ws.signaled <= last:
            j = ws.signaled
            ws.handle.intent(np.unique(ws.batches[j]).tolist(), j, j + 1)
            ws.signaled += 1

    def run_batch(ws: _WorkerState) -> None:
        b = ws.next_batch
        if signals:
            signal_ahead(ws, b)
        keys = ws.batches[b]
        uniq, inverse = np.unique(keys, return_inverse=True)
        trips = cluster.sync_round_trips
        cluster.now = ws.t
        values = ws.handle.pull(uniq.tolist())
        if mf is None:
            per_access = additive_delta(ws.gid, b, keys, spec.value_len)
            deltas = np.zeros((len(uniq), spec.value_len), dtype=np.float32)
            np.add.at(deltas, inverse, per_access)
            np.add.at(expected, keys, per_access)
        else:
            deltas = _sgd_deltas(np.asarray(values), inverse, keys, mf, spec.learning_rate)
        ws.handle.push(zip(uniq.tolist(), deltas))
        ws.t += compute_ms_per_access * len(keys) \
            + (cluster.sync_round_trips - trips) * net.remote_read_ms
        ws.handle.advance_clock()
        ws.next_batch = b + 1

    def worker_phase(start: float, end: float) -> None:
        for ws in workers:
            ws.t = max(ws.t, start)
            while ws.next_batch < limit and ws.t < end:
                run_batch(ws)

    rows: List[dict] = []
    epoch_times: List[float] = []
    losses: List[float] = []
    lam_trace: List[List[float]] = []
    # the loader signals `offset` batches ahead right away, but training only
    # waits for a short prefetch queue, prepared at the per-access cost
    head_start = min(offset, PREFETCH_BATCHES, total) * spec.batch_size * compute_ms_per_access
    for ws in workers:
        if signals:
            signal_ahead(ws, 0)
        ws.t = head_start
    snap = _snapshot(cluster)
    epoch_start = head_start
    epoch = 0
    while epoch < epochs:
        cluster.run_round(worker_phase)
        if signals:
            lam_trace.append([float(np.mean([e.lambda_hat for e in node.registry.estimators]))
                              for node in cluster.nodes])
        if all(ws.next_batch >= limit for ws in workers):
            if epoch == epochs - 1:
                cluster.drain(max_drain_rounds)
            now = cluster.now
            for ws in workers:
                ws.t = max(ws.t, now)
            if mf is not None:
                losses.append(mf.loss(cluster.final_values()))
            snap = _epoch_rows(cluster, snap, rows, spec, mode, epoch, now - epoch_start,
                               losses[-1] if losses else None)
            epoch_times.append(now - epoch_start)
            epoch_start = now
            epoch += 1
            limit += spec.batches_per_epoch

    pulls = sum(n.metrics.pulls for n in cluster.nodes)
    remote = sum(n.metrics.remote_pulls for n in cluster.nodes)
    stale = np.concatenate([np.asarray(n.metrics.staleness, dtype=np.float64)
                            for n in cluster.nodes]) if pulls else np.zeros(0)
    per_node = [int(cluster.hub.counter.bytes_sent[n]) for n in range(nodes)]
    return MetricsReport(
        workload=spec.kind.value, mode=mode.value, nodes=nodes,
        workers_per_node=workers_per_node, epochs=epochs, signal_offset=offset,
        bytes_sent_per_node=per_node, total_bytes=sum(per_node), pulls=pulls,
        remote_pulls=remote, remote_access_share=remote / pulls if pulls else 0.0,
        staleness_mean_ms=float(stale.mean()) if stale.size else float("nan"),
        staleness_p50_ms=float(np.percentile(stale, 50)) if stale.size else float("nan"),
        staleness_p99_ms=float(np.percentile(stale, 99)) if stale.size else float("nan"),
        relocation_count=sum(n.metrics.relocations for n in cluster.nodes),
        replica_creation_count=sum(n.metrics.replica_creations for n in cluster.nodes),
        rounds_executed=cluster.round, sim_time_ms=cluster.now, epoch_times_ms=epoch_times,
        loss=losses, protocol_warnings=cluster.protocol_warnings(),
        max_hops=cluster.max_hops(), invariant_violations=cluster.violations.all(),
        rows=rows, lambda_trace=lam_trace, trace_csv=cluster.trace_csv() if trace_keys else "",
        final_values=cluster.final_values(),
        expected_values=expected.astype(np.float32) if mf is None else None)


def _sgd_deltas(values: np.ndarray, inverse: np.ndarray, keys: np.ndarray, mf: _MF,
                lr: float) -> np.ndarray:
    # keys alternate row, column for each data point
    r_idx, c_idx = inverse[0::2], inverse[1::2]
    w, h = values[r_idx], values[c_idx]
    y = np.einsum("ij,ij->i", mf.truth[keys[0::2]], mf.truth[keys[1::2]])
    err = y - np.einsum("ij,ij->i", w, h)
    deltas = np.zeros_like(values)
    np.add.at(deltas, r_idx, lr * err[:, None] * h)
    np.add.at(deltas, c_idx, lr * err[:, None] * w)
    return deltas


def _snapshot(cluster: SimCluster) -> dict:
    return {n.node: dict(bytes=cluster.hub.counter.bytes_sent[n.node], pulls=n.metrics.pulls,
                         remote=n.metrics.remote_pulls, stale=len(n.metrics.staleness),
                         reloc=n.metrics.relocations, created=n.metrics.replica_creations,
                         rounds=cluster.round)
            for n in cluster.nodes}


def _epoch_rows(cluster, prev, rows, spec, mode, epoch, epoch_ms, loss) -> dict:
    cur = _snapshot(cluster)
    for n in cluster.nodes:
        a, b = prev[n.node], cur[n.node]
        pulls = b["pulls"] - a["pulls"]
        remote = b["remote"] - a["remote"]
        stale = n.metrics.staleness[a["stale"]:b["stale"]]
        rows.append({
            "workload": spec.kind.value, "mode": mode.value,
            "signal_offset": spec.signal_offset_batches, "node": n.node, "epoch": epoch,
            "bytes_sent": b["bytes"] - a["bytes"], "pulls": pulls, "remote_pulls": remote,
            "remote_access_share": _fmt(remote / pulls if pulls else 0.0),
            "staleness_mean_ms": _fmt(float(np.mean(stale)) if stale else float("nan")),
            "relocations": b["reloc"] - a["reloc"],
            "replica_creations": b["created"] - a["created"],
            "rounds": b["rounds"] - a["rounds"], "epoch_time_ms": _fmt(epoch_ms),
            "loss": _fmt(loss) if loss is not None else "",
        })
    return cur


def sweep_signal_offset(spec: WorkloadSpec, offsets: Sequence[int],
                        modes: Sequence[PolicyMode] = (PolicyMode.ADAPM,
                                                       PolicyMode.IMMEDIATE_ACTION),
                        **kwargs) -> Dict[tuple, MetricsReport]:
    """(offset, mode) -> report, for every combination."""
    out = {}
    for off in offsets:
        for mode in modes:
            out[(off, mode)] = run_benchmark(replace(spec, signal_offset_batches=off), mode,
                                             **kwargs)
    return out


def emit_parameter_trace(report: MetricsReport) -> str:
    """Per-round ``round,key,owner,holders`` CSV of the keys traced in ``report``."""
    if not report.trace_csv:
        raise ValidationError("run the benchmark with trace_keys to get a trace")
    return report.trace_csv
