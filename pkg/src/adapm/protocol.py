"""Round-based synchronization engine.

A :class:`Node` owns one node's registry, store and routing state. Each round
it turns due intent announcements, replica updates and queued pushes into one
envelope per destination (``begin_round``), ingests envelopes from peers
(``handle``) and answers each request with one grouped response (``compose``).
The transport and the round schedule are supplied by the caller, which is
either the deterministic simulator or the multi-process runner.
"""

from __future__ import annotations

import collections
import enum
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Tuple

import numpy as np

from .core import VALUE_DTYPE
from .registry import Announce, IntentRegistry
from .routing import LocationSource, Router
from .store import NodeStore, ParameterRecord, ReplicaRecord, RefreshReply, Served
from .timing import TimingConfig
from .wire import Kind, SyncEnvelope

log = logging.getLogger(__name__)


class PolicyMode(enum.Enum):
    ADAPM = "adapm"
    NO_RELOCATION = "no-relocation"
    NO_REPLICATION = "no-replication"
    IMMEDIATE_ACTION = "immediate-action"
    STATIC_PARTITIONING = "static-partitioning"
    FULL_REPLICATION = "full-replication"

    @property
    def uses_intent(self) -> bool:
        return self not in (PolicyMode.STATIC_PARTITIONING, PolicyMode.FULL_REPLICATION)


# -- relocate / replicate decision ---------------------------------------------

class EventKind(enum.Enum):
    START = "start"
    END = "end"


@dataclass(frozen=True)
class IntentEvent:
    kind: EventKind
    node: int


def IntentStart(node: int) -> IntentEvent:
    return IntentEvent(EventKind.START, node)


def IntentEnd(node: int) -> IntentEvent:
    return IntentEvent(EventKind.END, node)


@dataclass(frozen=True)
class Relocate:
    to: int


@dataclass(frozen=True)
class CreateReplica:
    at: int


@dataclass(frozen=True)
class DestroyReplica:
    at: int


def _wanted_holders(active, owner, policy) -> set:
    if policy is PolicyMode.NO_REPLICATION:
        return set()
    if policy is PolicyMode.NO_RELOCATION or len(active) >= 2:
        return set(active) - {owner}
    return set()


def desired_actions(active, owner: int, holders, policy: PolicyMode = PolicyMode.ADAPM,
                    event: Optional[IntentEvent] = None) -> list:
    """Actions that move (active, holders) to the configuration the policy wants."""
    holders = set(holders)
    actions: list = []
    if policy in (PolicyMode.ADAPM, PolicyMode.IMMEDIATE_ACTION) and len(active) == 1:
        (m,) = active
        if m != owner:
            actions.extend(DestroyReplica(h) for h in sorted(holders - {m}))
            actions.append(Relocate(m))
            return actions
    want = _wanted_holders(active, owner, policy)
    actions.extend(DestroyReplica(h) for h in sorted(holders - want))
    actions.extend(CreateReplica(h) for h in sorted(want - holders))
    if (policy is PolicyMode.NO_REPLICATION and event is not None
            and event.kind is EventKind.START and event.node != owner):
        actions.append(Relocate(event.node))
    return actions


def owner_decide(active: Iterable[int], owner: int, event: IntentEvent,
                 policy: PolicyMode = PolicyMode.ADAPM,
                 holders: Optional[Iterable[int]] = None) -> Tuple[FrozenSet[int], list]:
    """Apply one aggregated intent announcement at the owner.

    ``holders`` defaults to the replica set the policy maintains for
    ``active``. Returns the new active set and the actions to execute.
    """
    active = set(active)
    if holders is None:
        holders = _wanted_holders(active, owner, policy)
    if event.kind is EventKind.START:
        active.add(event.node)
    else:
        active.discard(event.node)
    return frozenset(active), desired_actions(active, owner, holders, policy, event)


# -- per-peer outgoing buffer ------------------------------------------------------

@dataclass
class _Outbox:
    starts: list = field(default_factory=list)
    ends: list = field(default_factory=list)
    updates: list = field(default_factory=list)
    pushes: list = field(default_factory=list)
    grants: list = field(default_factory=list)
    payloads: dict = field(default_factory=dict)     # key -> None (ordered set)
    destroys: dict = field(default_factory=dict)
    start_acks: dict = field(default_factory=dict)
    end_acks: dict = field(default_factory=dict)
    notices: list = field(default_factory=list)
    loc_updates: list = field(default_factory=list)
    refresh: dict = field(default_factory=dict)      # key -> holder version


@dataclass
class NodeMetrics:
    pulls: int = 0
    remote_pulls: int = 0
    staleness: list = field(default_factory=list)
    relocations: int = 0
    replica_creations: int = 0
    protocol_warnings: int = 0
    forwards: int = 0
    max_hops: int = 0
    hop_counts: collections.Counter = field(default_factory=collections.Counter)


class Node:
    def __init__(self, node: int, num_nodes: int, num_workers: int, num_keys: int,
                 value_len: int, policy: PolicyMode = PolicyMode.ADAPM,
                 timing: Optional[TimingConfig] = None, use_cache: bool = True,
                 clock: Callable[[], float] = time.monotonic,
                 init_value: Optional[Callable[[int], np.ndarray]] = None,
                 keep_rate_history: bool = False):
        self.node = node
        self.num_nodes = num_nodes
        self.num_keys = num_keys
        self.value_len = value_len
        self.policy = policy
        timing = timing or TimingConfig()
        if policy is PolicyMode.IMMEDIATE_ACTION and not timing.immediate:
            timing = TimingConfig(timing.alpha, timing.quantile, timing.initial_rate, True)
        self.registry = IntentRegistry(node, num_workers, num_keys, timing,
                                       keep_history=keep_rate_history)
        self.store = NodeStore(node, num_keys, value_len)
        self.router = Router(node, num_nodes, use_cache)
        self.clock = clock
        self.round = 0
        self.metrics = NodeMetrics()
        self.events: List[tuple] = []
        self._out: Dict[int, _Outbox] = defaultdict(_Outbox)
        self._parked: List[tuple] = []
        self._touched: Dict[int, list] = {}
        self.store.init_owned(range(node, num_keys, num_nodes), init_value)
        if policy is PolicyMode.FULL_REPLICATION:
            self._init_full_replication(init_value)

    def _init_full_replication(self, init_value) -> None:
        others = [n for n in range(self.num_nodes) if n != self.node]
        for rec in self.store.owned.values():
            for n in others:
                rec.holders[n] = 0
        now = self.clock()
        for k in range(self.num_keys):
            if k % self.num_nodes != self.node:
                v = np.zeros(self.value_len, VALUE_DTYPE) if init_value is None else init_value(k)
                self.store.replicas[k] = ReplicaRecord(k, v, 0, now)

    # -- helpers ---------------------------------------------------------------

    def owns(self, key: int) -> bool:
        return key in self.store.owned

    def _event(self, name: str, key: int, node: int) -> None:
        self.events.append((self.round, name, key, node))

    def _warn(self, what: str, key: int, peer: int) -> None:
        self.metrics.protocol_warnings += 1
        log.warning("node %d round %d: %s for key %d from node %d",
                    self.node, self.round, what, key, peer)

    def _reply_target(self, origin: int) -> Optional[_Outbox]:
        return None if origin == self.node else self._out[origin]

    # -- worker-facing -----------------------------------------------------------

    def pull_local(self, key: int):
        """(value, served) if servable without the network, else None."""
        res = self.store.local_read(key, self.clock())
        if res is None:
            return None
        value, served, stale = res
        self.metrics.pulls += 1
        if served is Served.REPLICA:
            self.metrics.staleness.append(stale)
        return value, served

    def note_remote_pull(self, key: int, owner: Optional[int]) -> None:
        self.metrics.pulls += 1
        self.metrics.remote_pulls += 1
        if owner is not None:
            self.router.record_location(key, owner, LocationSource.REMOTE_ACCESS_RESPONSE)

    def push(self, key: int, delta) -> Served:
        return self.store.push(key, delta)

    # -- round assembly ---------------------------------------------------------------

    def begin_round(self, rnd: Optional[int] = None) -> Dict[int, SyncEnvelope]:
        if rnd is not None:
            self.round = rnd
        self._retry_parked()
        if self.policy.uses_intent:
            starts, ends = self.registry.collect_round_signals()
            for k in ends:
                if self.owns(k):
                    self.registry.ack_end(k)
                    self._owner_event(self.store.owned[k], IntentEnd(self.node))
                else:
                    self._out[self.router.route_target(k)].ends.append((k, self.node, 0))
            for k in starts:
                if self.owns(k):
                    self.registry.ack_start(k)
                    self._owner_event(self.store.owned[k], IntentStart(self.node))
                else:
                    self._out[self.router.route_target(k)].starts.append((k, self.node, 0))
        for k, rep in self.store.replicas.items():
            delta = rep.ship()
            self._out[self.router.route_target(k)].updates.append(
                (k, rep.synced_version, self.node, 0, delta))
        for k, delta in self.store.take_outgoing().items():
            if self.owns(k):  # became owner since the push was queued
                self.store.owned[k].add(delta)
            else:
                self._out[self.router.route_target(k)].pushes.append((k, self.node, 0, delta))
        own = self._out.pop(self.node, None)
        if own is not None:
            # this node is the home and the key is on its way here
            self._parked.extend(("start", k, o, h, None, None) for k, o, h in own.starts)
            self._parked.extend(("end", k, o, h, None, None) for k, o, h in own.ends)
            self._parked.extend(("update", k, o, h, v, d) for k, v, o, h, d in own.updates)
            self._parked.extend(("push", k, o, h, None, d) for k, o, h, d in own.pushes)
        self.flush_decisions()
        envs = {}
        for peer in sorted(self._out):
            if peer == self.node:
                continue
            env = self.compose(peer, Kind.REQUEST)
            if not env.is_empty():
                envs[peer] = env
        return envs

    def has_outgoing(self) -> bool:
        return any(p != self.node for p in self._out) or bool(self.store.outgoing) \
            or bool(self._parked) or bool(self._touched)

    def compose(self, peer: int, kind: Kind = Kind.RESPONSE) -> SyncEnvelope:
        if self._touched:
            self.flush_decisions()
        ob = self._out.pop(peer, None)
        env = SyncEnvelope(self.node, peer, self.round, kind)
        if ob is None:
            return env
        env.intent_starts = ob.starts
        env.intent_ends = ob.ends
        env.replica_updates = ob.updates
        env.remote_pushes = ob.pushes
        env.relocation_grants = ob.grants
        env.location_notices = ob.notices
        env.location_updates = ob.loc_updates
        env.start_acks = [(k,) for k in ob.start_acks]
        env.end_acks = [(k,) for k in ob.end_acks]
        env.replica_destroys = [(k,) for k in ob.destroys]
        for k in ob.payloads:
            rec = self.store.owned.get(k)
            if rec is None or peer not in rec.holders:
                continue
            rec.seal()
            rec.holders[peer] = rec.version
            env.replica_payloads.append((k, rec.version, rec.value.copy()))
        for k, hv in ob.refresh.items():
            rec = self.store.owned.get(k)
            if rec is None or k in ob.destroys or k in ob.payloads or peer not in rec.holders:
                continue
            reply = rec.refresh_reply(peer, hv)
            if reply.deltas is None:
                env.refresh_deltas.append((k, reply.version, 1, [reply.full]))
            else:
                env.refresh_deltas.append((k, reply.version, 0, reply.deltas))
        return env

    # -- ingest -----------------------------------------------------------------------

    def handle(self, env: SyncEnvelope) -> None:
        src = env.src
        for k, new_owner in env.location_notices:
            self._on_notice(k, new_owner, src)
        for k, owner in env.location_updates:
            if owner == self.node and k not in self.store.owned:
                self.router.expected.add(k)
        for k, version, value, active in env.relocation_grants:
            self._install_grant(k, version, value, active, src)
        for k, version, value in env.replica_payloads:
            self._install_replica(k, version, value, src)
        for k, version, is_full, vecs in env.refresh_deltas:
            self._apply_refresh(k, version, is_full, vecs, src)
        for (k,) in env.replica_destroys:
            self._destroy_local_replica(k, src)
        for (k,) in env.start_acks:
            self.registry.ack_start(k)
        for (k,) in env.end_acks:
            self.registry.ack_end(k)
        # owner-side content: ends, then merges, then starts
        for k, origin, hops in env.intent_ends:
            self._item("end", k, origin, hops)
        for k, version, origin, hops, delta in env.replica_updates:
            self._item("update", k, origin, hops, version, delta)
        for k, origin, hops, delta in env.remote_pushes:
            self._item("push", k, origin, hops, None, delta)
        for k, origin, hops in env.intent_starts:
            self._item("start", k, origin, hops)
        # last: a go-ahead must not move a key away from items routed here before it
        for k, owner in env.location_updates:
            if owner != self.node:
                self._on_location_update(k, owner)

    def _item(self, what: str, k: int, origin: int, hops: int, version=None, delta=None) -> None:
        rec = self.store.owned.get(k)
        if rec is None:
            self._forward(what, k, origin, hops, version, delta)
            return
        # messages this item took: the original send plus one per forward
        taken = hops + 1
        self.metrics.hop_counts[taken] += 1
        if taken > self.metrics.max_hops:
            self.metrics.max_hops = taken
        if what == "end":
            self._on_end(rec, origin)
        elif what == "start":
            self._on_start(rec, origin)
        elif what == "update":
            if delta.any():
                rec.add(np.asarray(delta, VALUE_DTYPE))
            if origin in rec.holders:
                self._out[origin].refresh[k] = version
            elif origin != self.node:
                self._out[origin].destroys[k] = None
        else:
            rec.add(np.asarray(delta, VALUE_DTYPE))

    def _forward(self, what, k, origin, hops, version, delta) -> None:
        if k in self.router.expected:
            # the home announced the main copy is on its way here
            self._parked.append((what, k, origin, hops, version, delta))
            return
        target = self.router.forward_target(k)
        if target == self.node:  # pragma: no cover - the home always knows the owner
            raise RuntimeError(f"node {self.node} is home of key {k} but cannot route it")
        self.metrics.forwards += 1
        ob = self._out[target]
        h = hops + 1
        if what == "end":
            ob.ends.append((k, origin, h))
        elif what == "start":
            ob.starts.append((k, origin, h))
        elif what == "update":
            ob.updates.append((k, version, origin, h, delta))
        else:
            ob.pushes.append((k, origin, h, delta))

    def _retry_parked(self) -> None:
        parked, self._parked = self._parked, []
        for what, k, origin, hops, version, delta in parked:
            self._item(what, k, origin, hops, version, delta)

    # -- owner side ------------------------------------------------------------------------

    def _on_start(self, rec: ParameterRecord, origin: int) -> None:
        if origin in rec.active:
            self._warn("duplicate start", rec.key, origin)
            self._ack_start(rec.key, origin)
            return
        self._owner_event(rec, IntentStart(origin))

    def _on_end(self, rec: ParameterRecord, origin: int) -> None:
        k = rec.key
        if origin not in rec.active:
            self._warn("end without start", k, origin)
        else:
            self._owner_event(rec, IntentEnd(origin))
        if origin == self.node:
            self.registry.ack_end(k)
        else:
            self._out[origin].end_acks[k] = None

    def _ack_start(self, k: int, origin: int) -> None:
        if origin == self.node:
            self.registry.ack_start(k)
        else:
            self._out[origin].start_acks[k] = None

    def _owner_event(self, rec: ParameterRecord, event: IntentEvent) -> None:
        # the active set changes now; the decision waits until the whole batch is in
        if event.kind is EventKind.START:
            rec.active.add(event.node)
        else:
            rec.active.discard(event.node)
        starters = self._touched.setdefault(rec.key, [])
        if event.kind is EventKind.START:
            starters.append(event.node)

    def flush_decisions(self) -> None:
        """Decide for every key whose active set changed since the last flush."""
        touched, self._touched = self._touched, {}
        for k, starters in touched.items():
            rec = self.store.owned.get(k)
            if rec is None:  # pragma: no cover - keys only leave through a decision
                continue
            event = None
            live = [n for n in starters if n in rec.active and n != self.node]
            if live:
                event = IntentStart(live[-1])
            elif (self.policy is PolicyMode.NO_REPLICATION and rec.active
                  and self.node not in rec.active):
                # a start that arrived while the key was moving: follow it now
                event = IntentStart(min(rec.active))
            answered = self._execute(rec, desired_actions(rec.active, self.node, rec.holders,
                                                          self.policy, event))
            for n in starters:
                if n not in answered:
                    self._ack_start(k, n)

    def _execute(self, rec: ParameterRecord, actions, event=None) -> set:
        """Carry out decided actions; returns nodes that received a grant or payload."""
        k = rec.key
        answered = set()
        for act in actions:
            if isinstance(act, DestroyReplica):
                rec.remove_holder(act.at)
                self._out[act.at].destroys[k] = None
            elif isinstance(act, CreateReplica):
                rec.add_holder(act.at)
                self._out[act.at].payloads[k] = None
                self._out[act.at].destroys.pop(k, None)
                self.metrics.replica_creations += 1
                answered.add(act.at)
            elif isinstance(act, Relocate):
                if rec.moving_to is None:
                    self._relocate(rec, act.to)
                if rec.moving_to == act.to or k not in self.store.owned:
                    # the grant acknowledges the target's start
                    answered.add(act.to)
        return answered

    def _relocate(self, rec: ParameterRecord, to: int) -> None:
        k = rec.key
        self.metrics.relocations += 1
        self._event("RelocateStart", k, self.node)
        home = self.router.home(k)
        if home == self.node:
            self.router.set_directory(k, to)
            self._transfer(rec, to)
        else:
            # the home repoints its directory first, then tells us to go ahead
            rec.moving_to = to
            self._out[home].notices.append((k, to))

    def _transfer(self, rec: ParameterRecord, to: int) -> None:
        k = rec.key
        rec.seal()
        del self.store.owned[k]
        for h in list(rec.holders):
            if h != to:
                self._out[h].destroys[k] = None
        for ob in self._out.values():
            ob.payloads.pop(k, None)
            ob.refresh.pop(k, None)
        self.router.record_location(k, to, LocationSource.RELOCATION_NOTICE)
        self._out[to].grants.append((k, rec.version, rec.value, frozenset(rec.active)))
        self._out[to].destroys.pop(k, None)
        self._out[to].start_acks.pop(k, None)

    # -- client side of responses ------------------------------------------------------------

    def _install_grant(self, k, version, value, active, src) -> None:
        rec = ParameterRecord(k, np.array(value, dtype=VALUE_DTYPE), version, active)
        rep = self.store.replicas.pop(k, None)
        if rep is not None:
            if rep.pending is not None:
                rec.add(rep.pending)
            self._event("ReplicaDestroy", k, self.node)
        self.store.owned[k] = rec
        self.router.expected.discard(k)
        self.router.cache.pop(k, None)
        if self.router.is_home(k):
            self.router.set_directory(k, self.node)
        # the active set says which of our announcements the old owner has seen
        st = self.registry.status(k)
        if st is Announce.STARTING and self.node in rec.active:
            self.registry.ack_start(k)
        elif st is Announce.ENDING and self.node not in rec.active:
            self.registry.ack_end(k)
        self._event("RelocateDone", k, self.node)
        # the active set may have changed while the key was moving
        self._touched.setdefault(k, [])

    def _install_replica(self, k, version, value, src) -> None:
        if k in self.store.owned:
            return
        if self.registry.status(k) is Announce.IDLE:
            self._warn("replica without intent", k, src)
            return
        now = self.clock()
        self.store.replicas[k] = ReplicaRecord(k, np.array(value, dtype=VALUE_DTYPE), version, now)
        self.router.record_location(k, src, LocationSource.SYNC_RESPONSE)
        self.registry.ack_start(k)
        self._event("ReplicaCreate", k, self.node)

    def _apply_refresh(self, k, version, is_full, vecs, src) -> None:
        rep = self.store.replicas.get(k)
        if rep is None:
            return
        if is_full:
            reply = RefreshReply(version, None, vecs[0])
        else:
            reply = RefreshReply(version, vecs)
        rep.apply_refresh(reply, self.clock())
        self.router.record_location(k, src, LocationSource.SYNC_RESPONSE)

    def _destroy_local_replica(self, k, src) -> None:
        rep = self.store.replicas.pop(k, None)
        if rep is not None:
            if rep.pending is not None:
                acc = self.store.outgoing.get(k)
                if acc is None:
                    self.store.outgoing[k] = rep.pending
                else:
                    acc += rep.pending
            self._event("ReplicaDestroy", k, self.node)
        if k not in self.store.owned:
            self.router.record_location(k, src, LocationSource.SYNC_RESPONSE)

    def _on_notice(self, k, new_owner, src) -> None:
        # this node is k's home; src proposes to hand k to new_owner
        self.router.set_directory(k, new_owner)
        if new_owner == self.node:
            self.router.expected.add(k)
        else:
            self._out[new_owner].loc_updates.append((k, new_owner))
        self._out[src].loc_updates.append((k, new_owner))

    def _on_location_update(self, k, owner) -> None:
        rec = self.store.owned.get(k)
        if rec is not None and rec.moving_to == owner:
            rec.moving_to = None
            self._transfer(rec, owner)
        elif rec is None:
            self.router.record_location(k, owner, LocationSource.SYNC_RESPONSE)

    # -- remote reads ---------------------------------------------------------------------

    def serve_read(self, k: int):
        """(value copy, None) if owned here, (None, this node) if the main copy is
        about to arrive, else (None, next hop)."""
        rec = self.store.owned.get(k)
        if rec is not None:
            return rec.value.copy(), None
        if k in self.router.expected:
            return None, self.node
        return None, self.router.forward_target(k)

    # -- introspection -----------------------------------------------------------------------

    def quiescent(self) -> bool:
        if self.has_outgoing():
            return False
        if self.policy is PolicyMode.FULL_REPLICATION:
            return all(r.pending is None and r.inflight is None
                       for r in self.store.replicas.values())
        return not self.store.replicas and (not self.policy.uses_intent
                                            or self.registry.quiescent())

    def outbox_grants(self):
        return [g[0] for ob in self._out.values() for g in ob.grants]
