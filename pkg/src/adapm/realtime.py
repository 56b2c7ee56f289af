"""Wall-clock driver: one node per process, synchronizing over a transport.

Rounds run in lockstep. Every node sends one request to every peer per round
(empty if it has nothing to say), handles all requests of the round in sender
order, answers each with one response, then applies the responses in sender
order. This is the same phase structure the simulator uses, so the protocol
sees the same orderings; only worker timing differs.

Synchronous reads travel outside the rounds as READ / READ_REPLY frames. A read
is forwarded along the owner route and parked where the main copy is expected.
"""

from __future__ import annotations

import itertools
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .bench import WorkloadSpec, additive_delta, generate_accesses
from .client import Worker
from .protocol import Node, PolicyMode
from .timing import TimingConfig
from .wire import CONTROL_FIN, Kind, SyncEnvelope, decode, encode

log = logging.getLogger(__name__)


class RealtimeError(RuntimeError):
    pass


@dataclass
class _PendingRead:
    keys: List[int]
    values: Dict[int, np.ndarray] = field(default_factory=dict)
    owners: Dict[int, int] = field(default_factory=dict)
    done: threading.Event = field(default_factory=threading.Event)


class RealtimeNode:
    """A protocol node driven by its own sync thread.

    ``transport`` needs ``send(to, frame)``, ``receive(timeout)`` and ``close()``.
    Worker threads use :meth:`worker` handles; all node state is guarded by one lock.
    """

    def __init__(self, node_id: int, num_nodes: int, num_workers: int, num_keys: int,
                 value_len: int, transport, policy: PolicyMode = PolicyMode.ADAPM,
                 timing: Optional[TimingConfig] = None, rounds_per_sec: Optional[float] = None,
                 read_timeout: float = 60.0, round_timeout: float = 60.0):
        self.id = node_id
        self.num_nodes = num_nodes
        self.value_len = value_len
        self.transport = transport
        self.rounds_per_sec = rounds_per_sec
        self.read_timeout = read_timeout
        self.round_timeout = round_timeout
        self.lock = threading.RLock()
        self.node = Node(node_id, num_nodes, num_workers, num_keys, value_len, policy, timing,
                         clock=lambda: time.monotonic() * 1000.0)
        self.peers = [p for p in range(num_nodes) if p != node_id]
        self.round = 0
        self.workers_done = threading.Event()
        self.stopped = threading.Event()
        self.error: Optional[BaseException] = None
        self._stash: Dict[tuple, SyncEnvelope] = {}
        self._reads: Dict[int, _PendingRead] = {}
        self._read_ids = itertools.count(1)
        self._parked_reads: List[tuple] = []
        self._thread = threading.Thread(target=self._run, name=f"sync-{node_id}", daemon=True)

    # -- lifecycle -------------------------------------------------------------------

    def start(self) -> None:
        self._thread.start()

    def join(self, timeout: Optional[float] = None) -> None:
        self._thread.join(timeout)
        if self._thread.is_alive():
            raise RealtimeError(f"node {self.id} did not finish in time")
        if self.error is not None:
            raise RealtimeError(f"node {self.id} failed: {self.error}") from self.error

    def worker(self, index: int) -> Worker:
        return Worker(self.node, index, self, self.lock)

    # -- synchronous reads (RemoteFetcher) ---------------------------------------------

    def fetch(self, node: int, keys: Sequence[int]) -> List[np.ndarray]:
        req = _PendingRead(list(keys))
        rid = next(self._read_ids)
        groups: Dict[int, list] = {}
        with self.lock:
            self._reads[rid] = req
            for k in req.keys:
                groups.setdefault(self.node.router.route_target(k), []).append(k)
            local = groups.pop(self.id, [])
            for k in local:
                self._serve_or_pass(k, rid, self.id, 0)
        for dest, ks in groups.items():
            env = SyncEnvelope(self.id, dest, 0, Kind.READ,
                               read_requests=[(k, rid, self.id, 0) for k in ks])
            self.transport.send(dest, encode(env, self.value_len))
        if not req.done.wait(self.read_timeout):
            raise RealtimeError(f"node {self.id}: remote read of {len(req.keys)} keys timed out")
        with self.lock:
            for k in req.keys:
                self.node.note_remote_pull(k, req.owners.get(k))
        return [req.values[k].copy() for k in req.keys]

    def _serve_or_pass(self, k: int, rid: int, origin: int, hops: int) -> None:
        # caller holds the lock
        value, nxt = self.node.serve_read(k)
        if value is not None:
            self._reply(origin, k, rid, value)
        elif nxt == self.id:
            self._parked_reads.append((k, rid, origin, hops))
        else:
            env = SyncEnvelope(self.id, nxt, 0, Kind.READ,
                               read_requests=[(k, rid, origin, hops + 1)])
            self.transport.send(nxt, encode(env, self.value_len))

    def _reply(self, origin: int, k: int, rid: int, value: np.ndarray) -> None:
        if origin == self.id:
            self._deliver(self.id, k, rid, value)
            return
        env = SyncEnvelope(self.id, origin, 0, Kind.READ_REPLY, read_replies=[(k, rid, value)])
        self.transport.send(origin, encode(env, self.value_len))

    def _deliver(self, src: int, k: int, rid: int, value: np.ndarray) -> None:
        req = self._reads.get(rid)
        if req is None:
            return
        req.values[k] = np.asarray(value, dtype=np.float32)
        if src != self.id:
            req.owners[k] = src
        if len(req.values) == len(set(req.keys)):
            del self._reads[rid]
            req.done.set()

    def _retry_parked_reads(self) -> None:
        parked, self._parked_reads = self._parked_reads, []
        for item in parked:
            self._serve_or_pass(*item)

    # -- the sync thread ------------------------------------------------------------------

    def _pump(self, deadline: float) -> None:
        """Receive one frame (or time out) and route it."""
        got = self.transport.receive(timeout=0.05)
        if got is None:
            if time.monotonic() > deadline:
                raise RealtimeError(f"node {self.id}: round {self.round} stalled")
            return
        src, frame = got
        env = decode(frame)
        if env.kind == Kind.READ:
            with self.lock:
                for k, rid, origin, hops in env.read_requests:
                    self._serve_or_pass(k, rid, origin, hops)
        elif env.kind == Kind.READ_REPLY:
            with self.lock:
                for k, rid, value in env.read_replies:
                    self._deliver(env.src, k, rid, value)
        elif env.kind in (Kind.REQUEST, Kind.RESPONSE):
            self._stash[(int(env.kind), env.round, env.src)] = env
        else:
            log.debug("node %d: ignoring control frame from %d", self.id, src)

    def _collect(self, kind: Kind, rnd: int) -> Dict[int, SyncEnvelope]:
        deadline = time.monotonic() + self.round_timeout
        while not all((int(kind), rnd, p) in self._stash for p in self.peers):
            self._pump(deadline)
        return {p: self._stash.pop((int(kind), rnd, p)) for p in self.peers}

    def _idle(self) -> bool:
        return (self.workers_done.is_set() and not self._reads and not self._parked_reads
                and self.node.quiescent())

    def _run(self) -> None:
        try:
            self._loop()
        except BaseException as exc:  # surfaced by join()
            log.exception("node %d sync thread failed", self.id)
            self.error = exc
        finally:
            self.stopped.set()

    def _loop(self) -> None:
        min_gap = 1.0 / self.rounds_per_sec if self.rounds_per_sec else 0.0
        while True:
            began = time.monotonic()
            rnd = self.round
            with self.lock:
                fin = self._idle()
                envs = self.node.begin_round(rnd)
                frames = {}
                for p in self.peers:
                    env = envs.get(p) or SyncEnvelope(self.id, p, rnd, Kind.REQUEST)
                    if fin:
                        env.control.append((CONTROL_FIN,))
                    frames[p] = encode(env, self.value_len)
            for p, frame in frames.items():
                self.transport.send(p, frame)
            requests = self._collect(Kind.REQUEST, rnd)
            all_fin = fin and all(
                any(c == CONTROL_FIN for (c,) in env.control) for env in requests.values())
            with self.lock:
                for p in self.peers:
                    self.node.handle(requests[p])
                replies = {p: encode(self.node.compose(p, Kind.RESPONSE), self.value_len)
                           for p in self.peers}
            for p, frame in replies.items():
                self.transport.send(p, frame)
            responses = self._collect(Kind.RESPONSE, rnd)
            with self.lock:
                for p in self.peers:
                    self.node.handle(responses[p])
                self._retry_parked_reads()
            self.round += 1
            if all_fin:
                return
            if not self.peers and not fin:
                time.sleep(0.001)  # nothing to wait for; don't spin
            spare = min_gap - (time.monotonic() - began)
            if spare > 0:
                time.sleep(spare)


# -- running a workload on one node -------------------------------------------------------


@dataclass
class NodeRunConfig:
    spec: WorkloadSpec
    mode: PolicyMode = PolicyMode.ADAPM
    workers_per_node: int = 2
    epochs: int = 1
    timing: Optional[TimingConfig] = None
    rounds_per_sec: Optional[float] = None
    compute_ms_per_access: float = 0.0
    channels: int = 1  # accepted for compatibility; one stream per peer pair is used


def run_node(node_id: int, num_nodes: int, transport, cfg: NodeRunConfig,
             stop: Optional[threading.Event] = None, timeout: float = 600.0) -> dict:
    """Run this node's share of ``cfg.spec``; returns its final state as a dict.

    Setting ``stop`` makes the workers quit after their current batch; the
    node then drains with its peers as usual.
    """
    spec = cfg.spec
    rt = RealtimeNode(node_id, num_nodes, cfg.workers_per_node, spec.num_keys,
                      spec.value_len, transport, cfg.mode, cfg.timing, cfg.rounds_per_sec)
    accesses = generate_accesses(spec, num_nodes, cfg.workers_per_node, cfg.epochs)
    total = cfg.epochs * spec.batches_per_epoch
    offset = spec.signal_offset_batches
    stop = stop or threading.Event()
    done_batches = [0] * cfg.workers_per_node
    failures: List[BaseException] = []

    def work(w: int) -> None:
        handle = rt.worker(w)
        batches = accesses[(node_id, w)]
        gid = node_id * cfg.workers_per_node + w
        signaled = 0
        try:
            for b in range(total):
                if stop.is_set():
                    break
                if cfg.mode.uses_intent:
                    while signaled <= min(b + offset, total - 1):
                        handle.intent(np.unique(batches[signaled]).tolist(), signaled, signaled + 1)
                        signaled += 1
                keys = batches[b]
                uniq, inverse = np.unique(keys, return_inverse=True)
                handle.pull(uniq.tolist())
                deltas = np.zeros((len(uniq), spec.value_len), dtype=np.float32)
                np.add.at(deltas, inverse, additive_delta(gid, b, keys, spec.value_len))
                handle.push(zip(uniq.tolist(), deltas))
                if cfg.compute_ms_per_access:
                    time.sleep(cfg.compute_ms_per_access * len(keys) / 1000.0)
                handle.advance_clock()
                done_batches[w] = b + 1
            # run the clock past every signaled intent so all of them expire
            while handle.clock <= signaled + 1:
                handle.advance_clock()
        except BaseException as exc:
            failures.append(exc)

    started = time.monotonic()
    rt.start()
    threads = [threading.Thread(target=work, args=(w,), name=f"worker-{node_id}-{w}", daemon=True)
               for w in range(cfg.workers_per_node)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
    rt.workers_done.set()
    if failures:
        stop.set()
    rt.join(timeout)
    if failures:
        raise RealtimeError(f"node {node_id}: worker failed: {failures[0]}") from failures[0]
    m = rt.node.metrics
    owned = {int(k): rec.value.tolist() for k, rec in sorted(rt.node.store.owned.items())}
    return {
        "node": node_id,
        "rounds": rt.round,
        "wall_seconds": time.monotonic() - started,
        "batches_done": done_batches,
        "bytes_sent": int(sum(transport.counter.bytes_sent.values()))
        if hasattr(transport, "counter") else None,
        "pulls": m.pulls,
        "remote_pulls": m.remote_pulls,
        "relocations": m.relocations,
        "replica_creations": m.replica_creations,
        "protocol_warnings": m.protocol_warnings,
        "max_hops": m.max_hops,
        "owned": owned,
    }


def expected_values(spec: WorkloadSpec, num_nodes: int, workers_per_node: int, epochs: int,
                    batches_done: Optional[Dict[tuple, int]] = None) -> np.ndarray:
    """Brute-force sum of every delta the workload pushes (initial values are zero)."""
    accesses = generate_accesses(spec, num_nodes, workers_per_node, epochs)
    out = np.zeros((spec.num_keys, spec.value_len), dtype=np.float64)
    for (n, w), batches in accesses.items():
        upto = len(batches) if batches_done is None else batches_done[(n, w)]
        gid = n * workers_per_node + w
        for b in range(upto):
            np.add.at(out, batches[b], additive_delta(gid, b, batches[b], spec.value_len))
    return out.astype(np.float32)


def merge_owned(results: Sequence[dict], num_keys: int, value_len: int) -> np.ndarray:
    """Assemble final values from every node's ``owned`` map; each key exactly once."""
    out = np.full((num_keys, value_len), np.nan, dtype=np.float32)
    seen = np.zeros(num_keys, dtype=bool)
    for res in results:
        for k, v in res["owned"].items():
            k = int(k)
            if seen[k]:
                raise RealtimeError(f"key {k} owned by two nodes")
            seen[k] = True
            out[k] = v
    if not seen.all():
        raise RealtimeError(f"{int((~seen).sum())} keys have no owner")
    return out
