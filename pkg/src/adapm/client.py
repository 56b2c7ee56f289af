"""The four operations a training worker uses: intent, clock, pull, push."""

from __future__ import annotations

import contextlib
from typing import Iterable, List, Mapping, Protocol, Sequence, Tuple, Union

import numpy as np

from .core import IntentType, ValidationError, check_keys
from .protocol import Node


class RemoteFetcher(Protocol):
    def fetch(self, node: int, keys: Sequence[int]) -> List[np.ndarray]:
        """Synchronously read ``keys`` from their owners, one message per owner."""


Deltas = Union[Mapping[int, object], Iterable[Tuple[int, object]]]


class Worker:
    """Handle for one worker thread on one node.

    All calls are safe to make concurrently with the node's sync thread when a
    shared ``lock`` is given.
    """

    def __init__(self, node: Node, index: int, fetcher: RemoteFetcher, lock=None):
        if not 0 <= index < len(node.registry.clocks):
            raise ValidationError(f"node {node.node} has no worker {index}")
        self.node = node
        self.index = index
        self.fetcher = fetcher
        self._lock = lock if lock is not None else contextlib.nullcontext()

    def intent(self, keys: Iterable[int], c_start: int, c_end: int,
               intent_type: IntentType = IntentType.READ_WRITE) -> None:
        with self._lock:
            self.node.registry.intent(self.index, keys, c_start, c_end, intent_type)

    def advance_clock(self) -> int:
        with self._lock:
            return self.node.registry.advance_clock(self.index)

    @property
    def clock(self) -> int:
        return self.node.registry.clock(self.index)

    def pull(self, keys: Sequence[int]) -> List[np.ndarray]:
        """Current values of ``keys`` (copies), in order.

        Keys with a local main copy or replica are served without messages;
        the rest are fetched in one batch per owner.
        """
        keys = list(keys)
        if not keys:
            return []
        check_keys(keys, self.node.num_keys)
        out: List[np.ndarray] = [None] * len(keys)  # type: ignore[list-item]
        remote: List[int] = []
        with self._lock:
            for i, k in enumerate(keys):
                got = self.node.pull_local(k)
                if got is None:
                    remote.append(i)
                else:
                    out[i] = got[0]
        if remote:
            values = self.fetcher.fetch(self.node.node, [keys[i] for i in remote])
            for i, v in zip(remote, values):
                out[i] = v
        return out

    def push(self, deltas: Deltas) -> None:
        """Add update terms; never blocks on the network."""
        items = deltas.items() if isinstance(deltas, Mapping) else deltas
        checked = []
        for k, d in items:
            if not 0 <= k < self.node.num_keys:
                raise ValidationError(f"key {k} outside [0, {self.node.num_keys})")
            checked.append((k, self.node.store.check_delta(d)))
        # validated up front so a bad entry leaves no partial push behind
        with self._lock:
            for k, d in checked:
                self.node.push(k, d)
