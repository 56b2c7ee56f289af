"""Deterministic in-process cluster and intent-script replay.

All nodes run on one thread. A round is:

1. every node assembles its requests (``Node.begin_round``),
2. every node ingests the requests addressed to it, in node order, and answers
   each with one response,
3. optionally, workers run for the round's simulated duration,
4. every node ingests its responses.

Time is simulated in milliseconds: a round lasts ``2 * latency`` plus the
largest per-node byte volume of the round divided by the bandwidth.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import ValidationError
from .protocol import Node, PolicyMode
from .registry import Announce
from .timing import TimingConfig
from .transport import LoopbackHub
from .wire import Kind, SyncEnvelope, decode, encode


@dataclass
class NetworkModel:
    latency_ms: float = 0.5
    bytes_per_ms: float = 1.0e5     # ~100 MB/s
    remote_read_ms: float = 1.0     # per hop, round trip included


@dataclass
class RoundReport:
    round: int
    start_ms: float
    duration_ms: float
    bytes: int
    requests: int
    responses: int


@dataclass
class InvariantViolations:
    owner: List[str] = field(default_factory=list)
    replica: List[str] = field(default_factory=list)
    grouping: List[str] = field(default_factory=list)

    def all(self) -> List[str]:
        return self.owner + self.replica + self.grouping


# rounds a replica may outlive its last local intent: one round to announce
# the end, one for the acknowledgement, one spare for a forwarded end
REPLICA_GRACE_ROUNDS = 3


class SimCluster:
    def __init__(self, num_nodes: int, workers_per_node: int, num_keys: int,
                 value_len: int, policy: PolicyMode = PolicyMode.ADAPM,
                 timing: Optional[TimingConfig] = None, use_cache: bool = True,
                 net: Optional[NetworkModel] = None, check_invariants: bool = False,
                 trace_keys: Iterable[int] = (), keep_rate_history: bool = False,
                 init_value=None):
        if num_nodes < 1:
            raise ValidationError("need at least one node")
        self.num_nodes = num_nodes
        self.num_keys = num_keys
        self.value_len = value_len
        self.policy = policy
        self.net = net or NetworkModel()
        self.now = 0.0
        self.round = 0
        self.hub = LoopbackHub(num_nodes)
        self.events: List[tuple] = []
        self.nodes = [Node(n, num_nodes, workers_per_node, num_keys, value_len, policy,
                           timing, use_cache, clock=self._clock, init_value=init_value,
                           keep_rate_history=keep_rate_history)
                      for n in range(num_nodes)]
        for node in self.nodes:
            node.events = self.events
        self.endpoints = [self.hub.endpoint(n) for n in range(num_nodes)]
        self.check_invariants = check_invariants
        self.violations = InvariantViolations()
        self._stale_age: dict = {}
        self.trace_keys = sorted(set(trace_keys))
        self.trace: List[tuple] = []
        self.reports: List[RoundReport] = []
        self.read_hops_max = 0
        self.sync_round_trips = 0
        self._read_req_size = len(encode(SyncEnvelope(0, 0, 0, Kind.READ,
                                                      read_requests=[(0, 0, 0, 0)]),
                                         value_len)) + 4
        self._read_reply_size = len(encode(SyncEnvelope(0, 0, 0, Kind.READ_REPLY,
                                                        read_replies=[(0, 0, np.zeros(value_len))]),
                                           value_len)) + 4

    def _clock(self) -> float:
        return self.now

    # -- rounds -----------------------------------------------------------------

    def run_round(self, worker_phase: Optional[Callable[[float, float], None]] = None
                  ) -> RoundReport:
        rnd = self.round
        start = self.now
        before = dict(self.hub.counter.bytes_sent)
        nreq = nresp = 0
        for node, ep in zip(self.nodes, self.endpoints):
            for peer, env in node.begin_round(rnd).items():
                ep.send(peer, encode(env, self.value_len))
                nreq += 1
        self.hub.step()
        for node, ep in zip(self.nodes, self.endpoints):
            requesters = []
            while True:
                got = ep.receive()
                if got is None:
                    break
                src, frame = got
                node.handle(decode(frame))
                requesters.append(src)
            for src in requesters:
                ep.send(src, encode(node.compose(src, Kind.RESPONSE), self.value_len))
                nresp += 1
        sent = {n: self.hub.counter.bytes_sent[n] - before.get(n, 0)
                for n in range(self.num_nodes)}
        peak = max(sent.values()) if sent else 0
        duration = 2.0 * self.net.latency_ms + peak / self.net.bytes_per_ms
        if worker_phase is not None:
            worker_phase(start, start + duration)
        self.now = start + duration
        self.hub.step()
        for node, ep in zip(self.nodes, self.endpoints):
            while True:
                got = ep.receive()
                if got is None:
                    break
                node.handle(decode(got[1]))
        report = RoundReport(rnd, start, duration, sum(sent.values()), nreq, nresp)
        self.reports.append(report)
        if self.check_invariants:
            self._check(rnd)
        if self.trace_keys:
            self._trace(rnd)
        self.round += 1
        return report

    def quiescent(self) -> bool:
        return self.hub.pending() == 0 and all(n.quiescent() for n in self.nodes)

    def drain(self, max_rounds: int = 1000) -> int:
        """Run rounds until nothing is left to exchange; returns rounds run."""
        for i in range(max_rounds):
            if self.quiescent():
                return i
            self.run_round()
        raise RuntimeError(f"cluster not quiescent after {max_rounds} rounds")

    # -- synchronous remote reads ----------------------------------------------------

    def owner_of(self, key: int) -> Optional[int]:
        for node in self.nodes:
            if key in node.store.owned:
                return node.node
        return None

    def _in_transit_value(self, key: int):
        for node in self.nodes:
            for ob in node._out.values():
                for g in ob.grants:
                    if g[0] == key:
                        return np.array(g[2], dtype=np.float32)
        for q in self.hub._staged + self.hub._ready:
            for _src, frame in q:
                for g in decode(frame).relocation_grants:
                    if g[0] == key:
                        return np.array(g[2], dtype=np.float32)
        raise RuntimeError(f"key {key} has no main copy anywhere")

    def _route_hops(self, reader: int, key: int, dest: int) -> int:
        """Messages a read takes from ``reader`` to ``dest``, the owner or grant target."""
        ends = {dest}
        rec = self.nodes[dest].store.owned.get(key)
        if rec is not None and rec.moving_to is not None:
            # the home may already point at the proposed owner, which parks reads
            ends.add(rec.moving_to)
        target = self.nodes[reader].router.route_target(key)
        hops = 1
        for _ in range(2 * self.num_nodes):
            if target in ends or key in self.nodes[target].router.expected:
                break
            target, hops = self.nodes[target].router.forward_target(key), hops + 1
        return hops

    def _grant_target(self, key: int) -> int:
        for node in self.nodes:
            for peer, ob in node._out.items():
                if any(g[0] == key for g in ob.grants):
                    return peer
        for n, q in enumerate(self.hub._staged + self.hub._ready):
            for _src, frame in q:
                if any(g[0] == key for g in decode(frame).relocation_grants):
                    return n % self.num_nodes
        raise RuntimeError(f"key {key} has no main copy anywhere")

    def fetch(self, reader: int, keys: Sequence[int]) -> List[np.ndarray]:
        """Synchronous reads, one request/reply pair per owner node."""
        groups: dict = {}
        values: dict = {}
        for k in keys:
            owner = self.owner_of(k)
            if owner is None:
                values[k] = self._in_transit_value(k)
                owner = self._grant_target(k)
            else:
                values[k] = self.nodes[owner].store.owned[k].value.copy()
            groups.setdefault(owner, []).append(k)
            self.read_hops_max = max(self.read_hops_max, self._route_hops(reader, k, owner))
            self.nodes[reader].note_remote_pull(k, owner)
        counter = self.hub.counter
        for owner, ks in groups.items():
            n = len(ks)
            counter.bytes_sent[reader] += self._read_req_size + (n - 1) * 21
            counter.bytes_sent[owner] += self._read_reply_size + (n - 1) * (16 + 4 * self.value_len)
            self.sync_round_trips += 1
        return [values[k] for k in keys]

    # -- checks and tracing ------------------------------------------------------------

    def _check(self, rnd: int) -> None:
        owned_total = sum(len(n.store.owned) for n in self.nodes)
        grants = [k for n in self.nodes for k in n.outbox_grants()]
        if owned_total + len(grants) != self.num_keys:
            self.violations.owner.append(
                f"round {rnd}: {owned_total} owned + {len(grants)} in flight != {self.num_keys}")
        else:
            seen = set(grants)
            for n in self.nodes:
                seen.update(n.store.owned)
            if len(seen) != self.num_keys:
                self.violations.owner.append(f"round {rnd}: a key has two main copies")
        if self.policy is not PolicyMode.FULL_REPLICATION:
            ages = {}
            for n in self.nodes:
                for k in n.store.replicas:
                    st = n.registry.status(k)
                    if st is Announce.IDLE:
                        self.violations.replica.append(
                            f"round {rnd}: node {n.node} holds replica of {k} without announced intent")
                    if not n.registry.has_live(k):
                        age = self._stale_age.get((n.node, k), 0) + 1
                        ages[(n.node, k)] = age
                        if age > REPLICA_GRACE_ROUNDS:
                            self.violations.replica.append(
                                f"round {rnd}: node {n.node} kept replica of {k} "
                                f"{age} rounds after its intents expired")
            self._stale_age = ages
        for (r, s, d, kind), c in self.hub.counter.per_pair.items():
            if r == rnd and kind in (Kind.REQUEST, Kind.RESPONSE) and c > 1:
                self.violations.grouping.append(f"round {r}: {c} frames of kind {kind} {s}->{d}")

    def _trace(self, rnd: int) -> None:
        for k in self.trace_keys:
            owner = self.owner_of(k)
            holders = [n.node for n in self.nodes if k in n.store.replicas]
            self.trace.append((rnd, k, -1 if owner is None else owner, holders))

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "key", "owner", "holders"])
        for rnd, k, owner, holders in self.trace:
            w.writerow([rnd, k, owner, ";".join(map(str, holders))])
        return buf.getvalue()

    # -- aggregate state ---------------------------------------------------------------

    def final_values(self) -> np.ndarray:
        out = np.zeros((self.num_keys, self.value_len), dtype=np.float32)
        for node in self.nodes:
            for k, rec in node.store.owned.items():
                out[k] = rec.value
        return out

    def protocol_warnings(self) -> int:
        return sum(n.metrics.protocol_warnings for n in self.nodes)

    def max_hops(self) -> int:
        return max(max(n.metrics.max_hops for n in self.nodes), self.read_hops_max)


# -- intent scripts ------------------------------------------------------------------------

class ScriptError(ValidationError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class Directive:
    op: str
    args: tuple
    lineno: int


def parse_script(text: str) -> List[Directive]:
    """Parse an intent script.

    One directive per line; ``#`` starts a comment::

        advance <node> <worker>
        intent <node> <worker> <key> <c_start> <c_end>
        round
    """
    arity = {"advance": 2, "intent": 5, "round": 0}
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        op, *rest = line.split()
        if op not in arity:
            raise ScriptError(lineno, f"unknown directive {op!r}")
        if len(rest) != arity[op]:
            raise ScriptError(lineno, f"{op} takes {arity[op]} arguments, got {len(rest)}")
        try:
            args = tuple(int(a) for a in rest)
        except ValueError:
            raise ScriptError(lineno, "arguments must be integers") from None
        if any(a < 0 for a in args):
            raise ScriptError(lineno, "arguments must be non-negative")
        if op == "intent" and args[3] >= args[4]:
            raise ScriptError(lineno, f"empty intent window [{args[3]}, {args[4]})")
        out.append(Directive(op, args, lineno))
    return out


def run_simulated_scenario(script, timing: Optional[TimingConfig] = None,
                           policy: PolicyMode = PolicyMode.ADAPM,
                           num_nodes: Optional[int] = None,
                           trace_keys: Iterable[int] = ()) -> List[tuple]:
    """Replay a script and return the (round, event, key, node) timeline."""
    directives = parse_script(script) if isinstance(script, str) else list(script)
    if not directives:
        return []
    nodes_seen = [d.args[0] for d in directives if d.op != "round"]
    keys_seen = [d.args[2] for d in directives if d.op == "intent"]
    workers_seen = [d.args[1] for d in directives if d.op != "round"]
    n_nodes = num_nodes or (max(nodes_seen) + 1 if nodes_seen else 1)
    cluster = SimCluster(n_nodes, max(workers_seen, default=0) + 1,
                         max(keys_seen, default=0) + 1, 1, policy, timing,
                         check_invariants=True, trace_keys=trace_keys)
    for d in directives:
        if d.op == "round":
            cluster.run_round()
        elif d.op == "advance":
            node, worker = d.args
            cluster.nodes[node].registry.advance_clock(worker)
        else:
            node, worker, key, c0, c1 = d.args
            cluster.nodes[node].registry.intent(worker, [key], c0, c1)
    return list(cluster.events)


def timeline_csv(events: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "event", "key", "node"])
    for row in events:
        w.writerow(row)
    return buf.getvalue()


# -- randomized stress ---------------------------------------------------------------------

@dataclass
class StressResult:
    final: np.ndarray
    expected: np.ndarray
    rounds: int
    pushes: int
    protocol_warnings: int
    max_hops: int
    hop_counts: dict
    violations: InvariantViolations
    # most REQUEST / RESPONSE frames any ordered node pair exchanged in one round
    max_requests_per_pair: int = 0
    max_responses_per_pair: int = 0


def run_random_stress(seed: int, num_nodes: int = 4, workers_per_node: int = 4,
                      num_keys: int = 10_000, total_pushes: int = 100_000,
                      value_len: int = 2, pushes_per_step: int = 8,
                      policy: PolicyMode = PolicyMode.ADAPM, use_cache: bool = True,
                      check_invariants: bool = True, hot_keys: int = 200) -> StressResult:
    """Random overlapping intents and integer pushes; returns final vs brute-force sums.

    Every step each worker advances its clock, signals a few intents on a mix
    of hot and random keys, reads a few keys and pushes integer deltas, mostly
    to keys it has intent for. One synchronization round runs per step.
    """
    rng = np.random.default_rng(seed)
    cluster = SimCluster(num_nodes, workers_per_node, num_keys, value_len, policy,
                         use_cache=use_cache, check_invariants=check_invariants)
    expected = np.zeros((num_keys, value_len), dtype=np.int64)
    workers = [(n, w) for n in range(num_nodes) for w in range(workers_per_node)]
    recent = {gw: [] for gw in workers}   # keys of this worker's recent intents
    pushes = 0
    while pushes < total_pushes:
        for (n, w) in workers:
            node = cluster.nodes[n]
            clock = node.registry.advance_clock(w)
            for _ in range(rng.integers(0, 3)):
                size = int(rng.integers(1, 9))
                hot = rng.random(size) < 0.5
                keys = np.where(hot, rng.integers(0, hot_keys, size),
                                rng.integers(0, num_keys, size))
                start = clock + int(rng.integers(0, 6))
                node.registry.intent(w, keys.tolist(), start, start + int(rng.integers(1, 9)))
                recent[(n, w)] = (recent[(n, w)] + keys.tolist())[-32:]
            for k in rng.integers(0, num_keys, 2).tolist():
                if node.pull_local(k) is None:
                    cluster.fetch(n, [k])
            n_push = min(pushes_per_step, total_pushes - pushes)
            pool = recent[(n, w)]
            from_pool = rng.random(n_push) < 0.7
            picks = rng.integers(0, max(len(pool), 1), n_push)
            anywhere = rng.integers(0, num_keys, n_push)
            ds = rng.integers(-3, 4, (n_push, value_len))
            fds = ds.astype(np.float32)
            for i in range(n_push):
                k = pool[picks[i]] if (pool and from_pool[i]) else int(anywhere[i])
                expected[k] += ds[i]
                node.push(k, fds[i])
            pushes += n_push
            if pushes >= total_pushes:
                break
        cluster.run_round()
    # let every intent expire, then settle
    horizon = max(c.value for node in cluster.nodes for c in node.registry.clocks) + 16
    for node in cluster.nodes:
        for w in range(workers_per_node):
            while node.registry.clock(w) < horizon:
                node.registry.advance_clock(w)
    cluster.drain()
    hops: dict = {}
    for node in cluster.nodes:
        for h, c in node.metrics.hop_counts.items():
            hops[h] = hops.get(h, 0) + c
    return StressResult(cluster.final_values(), expected.astype(np.float32), cluster.round,
                        pushes, cluster.protocol_warnings(), cluster.max_hops(), hops,
                        cluster.violations,
                        cluster.hub.counter.max_per_pair(Kind.REQUEST),
                        cluster.hub.counter.max_per_pair(Kind.RESPONSE))


BUNDLED_SCENARIOS = ("separate", "overlap", "hotspot", "exactly_one")


def bundled_scenario(name: str) -> Tuple[str, str]:
    """(script text, expected timeline CSV) of a scenario shipped with the package."""
    if name not in BUNDLED_SCENARIOS:
        raise ValidationError(f"unknown scenario {name!r}; have {', '.join(BUNDLED_SCENARIOS)}")
    base = resources.files("adapm") / "scenarios"
    return ((base / f"{name}.txt").read_text(), (base / f"{name}.expected.csv").read_text())

