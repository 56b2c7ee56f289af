"""Main copies, replicas and the versioned delta log used for replica refresh."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import VALUE_DTYPE, ValidationError


class Served(enum.Enum):
    OWNED_LOCAL = "owned_local"
    REPLICA = "replica"
    REMOTE_SYNC = "remote_sync"


@dataclass
class RefreshReply:
    version: int
    deltas: Optional[List[np.ndarray]]  # None means: full value below
    full: Optional[np.ndarray] = None


class ParameterRecord:
    """The main copy of one key, held by its current owner."""

    __slots__ = ("key", "value", "version", "unversioned", "active", "holders",
                 "log", "log_base", "moving_to")

    def __init__(self, key: int, value: np.ndarray, version: int = 0,
                 active=None):
        self.key = key
        self.value = value
        self.version = version
        self.unversioned: Optional[np.ndarray] = None
        self.active: set = set(active or ())
        self.holders: Dict[int, int] = {}      # holder node -> last synced version
        self.log: List[Tuple[int, np.ndarray]] = []
        self.log_base = version               # log covers (log_base, version]
        self.moving_to: Optional[int] = None  # proposed relocation target, awaiting the home

    def add(self, delta: np.ndarray) -> None:
        self.value += delta
        if self.unversioned is None:
            self.unversioned = delta.astype(VALUE_DTYPE, copy=True)
        else:
            self.unversioned += delta

    def seal(self) -> int:
        """Close the current batch of updates into one version."""
        if self.unversioned is not None:
            self.version += 1
            if self.holders:
                self.log.append((self.version, self.unversioned))
            else:
                self.log_base = self.version
            self.unversioned = None
        return self.version

    @property
    def min_outstanding_version(self) -> int:
        return min(self.holders.values()) if self.holders else self.version

    def add_holder(self, node: int) -> int:
        self.seal()
        if not self.holders:
            self.log.clear()
            self.log_base = self.version
        self.holders[node] = self.version
        return self.version

    def remove_holder(self, node: int) -> None:
        self.holders.pop(node, None)
        if not self.holders:
            self.log.clear()
            self.log_base = self.version
        else:
            self._prune()

    def _prune(self) -> None:
        horizon = self.min_outstanding_version
        if self.log and self.log[0][0] <= horizon:
            self.log = [e for e in self.log if e[0] > horizon]
            self.log_base = max(self.log_base, horizon)

    def refresh_reply(self, holder: int, holder_version: int) -> RefreshReply:
        self.seal()
        known = holder in self.holders
        if not known:
            self.add_holder(holder)
        if known and holder_version >= self.log_base and holder_version <= self.version:
            deltas = [d for v, d in self.log if v > holder_version]
            reply = RefreshReply(self.version, deltas)
        else:
            reply = RefreshReply(self.version, None, self.value.copy())
        self.holders[holder] = self.version
        self._prune()
        return reply


class ReplicaRecord:
    """A node-local replica: base (owner value at synced_version) plus local updates."""

    __slots__ = ("key", "base", "pending", "inflight", "value", "synced_version",
                 "created_at", "last_refresh")

    def __init__(self, key: int, base: np.ndarray, version: int, now: float):
        self.key = key
        self.base = base
        self.pending: Optional[np.ndarray] = None
        self.inflight: Optional[np.ndarray] = None
        self.value = base.copy()
        self.synced_version = version
        self.created_at = now
        self.last_refresh = now

    def add(self, delta: np.ndarray) -> None:
        self.value += delta
        if self.pending is None:
            self.pending = delta.astype(VALUE_DTYPE, copy=True)
        else:
            self.pending += delta

    def ship(self) -> np.ndarray:
        """Move unshipped updates in flight; returns what to send (may be zeros)."""
        out = self.pending
        self.pending = None
        if out is None:
            return np.zeros_like(self.base)
        if self.inflight is None:
            self.inflight = out.copy()
        else:
            self.inflight += out
        return out

    def apply_refresh(self, reply: RefreshReply, now: float) -> None:
        if reply.deltas is None:
            self.base = reply.full.astype(VALUE_DTYPE, copy=True)
        else:
            for d in reply.deltas:
                self.base += d
        self.synced_version = reply.version
        self.inflight = None
        self.value = self.base.copy()
        if self.pending is not None:
            self.value += self.pending
        self.last_refresh = now


class NodeStore:
    """All parameter state held by one node."""

    def __init__(self, node: int, num_keys: int, value_len: int):
        self.node = node
        self.num_keys = num_keys
        self.value_len = value_len
        self.owned: Dict[int, ParameterRecord] = {}
        self.replicas: Dict[int, ReplicaRecord] = {}
        self.outgoing: Dict[int, np.ndarray] = {}  # asynchronous pushes to remote owners

    def check_delta(self, delta) -> np.ndarray:
        arr = np.asarray(delta, dtype=VALUE_DTYPE)
        if arr.shape != (self.value_len,):
            raise ValidationError(
                f"delta has shape {arr.shape}, expected ({self.value_len},)")
        return arr

    def init_owned(self, keys, init=None) -> None:
        for k in keys:
            v = np.zeros(self.value_len, VALUE_DTYPE) if init is None else init(k)
            self.owned[k] = ParameterRecord(k, v)

    def local_read(self, key: int, now: float) -> Optional[Tuple[np.ndarray, Served, float]]:
        """(copy of value, how it was served, staleness) or None if not local."""
        rec = self.owned.get(key)
        if rec is not None:
            return rec.value.copy(), Served.OWNED_LOCAL, 0.0
        rep = self.replicas.get(key)
        if rep is not None:
            return rep.value.copy(), Served.REPLICA, now - rep.last_refresh
        return None

    def push(self, key: int, delta) -> Served:
        d = self.check_delta(delta)
        rec = self.owned.get(key)
        if rec is not None:
            rec.add(d)
            return Served.OWNED_LOCAL
        rep = self.replicas.get(key)
        if rep is not None:
            rep.add(d)
            return Served.REPLICA
        acc = self.outgoing.get(key)
        if acc is None:
            self.outgoing[key] = d.copy()
        else:
            acc += d
        return Served.REMOTE_SYNC

    def take_outgoing(self) -> Dict[int, np.ndarray]:
        out, self.outgoing = self.outgoing, {}
        return out


def owner_merge(record: ParameterRecord, deltas, from_node: int = -1) -> int:
    """Sum a batch of deltas into the main copy as one new version."""
    if len(deltas) == 0:
        return record.version
    total = np.sum(np.asarray(deltas, dtype=VALUE_DTYPE), axis=0, dtype=VALUE_DTYPE)
    record.add(total)
    return record.seal()


def replica_refresh_response(record: ParameterRecord, holder: int,
                             holder_version: int) -> RefreshReply:
    return record.refresh_reply(holder, holder_version)
