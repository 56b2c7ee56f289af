"""Node-local intent storage and per-round aggregation.

Signaled intents wait in a per-worker heap ordered by start clock. Each round
the collector moves every intent the timing rule says to act on into a second
heap ordered by end clock, and counts per key how many acted-on, unexpired
intents exist. A key's announcement state then follows that count:

    IDLE --start--> STARTING --ack--> ACTIVE --end--> ENDING --ack--> IDLE

Only one start and one end per key and round leave the node, no matter how
many workers signaled.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import math
import threading
from typing import Callable, Dict, Iterable, List, Optional, Tuple

from .core import Intent, IntentType, ValidationError, WorkerClock, WorkerId, check_keys
from .timing import RateEstimator, TimingConfig


class Announce(enum.Enum):
    IDLE = 0
    STARTING = 1   # start sent, waiting for grant / replica payload
    ACTIVE = 2
    ENDING = 3     # end sent, waiting for acknowledgement


# threshold callback: (worker index, current clock) -> act iff c_start < threshold
ActDecider = Callable[[int, int], float]


class IntentRegistry:
    def __init__(self, node: int, num_workers: int, num_keys: int,
                 timing: Optional[TimingConfig] = None, keep_history: bool = False):
        self.node = node
        self.num_keys = num_keys
        self.timing = timing or TimingConfig()
        self.clocks = [WorkerClock() for _ in range(num_workers)]
        self.estimators = [RateEstimator.from_config(self.timing, keep_history=keep_history)
                           for _ in range(num_workers)]
        self._pending: List[list] = [[] for _ in range(num_workers)]
        self._acted: List[list] = [[] for _ in range(num_workers)]
        self._live: Dict[int, int] = {}
        self._status: Dict[int, Announce] = {}
        self._dirty: set = set()
        self._seq = itertools.count()
        self._lock = threading.Lock()
        self.signaled = 0

    # -- worker-facing -------------------------------------------------------

    def signal_intent(self, intent: Intent) -> None:
        if intent.worker.node != self.node:
            raise ValidationError("intent signaled on the wrong node")
        if not 0 <= intent.worker.index < len(self.clocks):
            raise ValidationError(f"unknown worker {intent.worker}")
        keys = check_keys(intent.keys, self.num_keys)
        with self._lock:
            heapq.heappush(self._pending[intent.worker.index],
                           (intent.c_start, next(self._seq), intent.c_end, keys))
            self.signaled += 1

    def intent(self, worker: int, keys: Iterable[int], c_start: int, c_end: int,
               intent_type: IntentType = IntentType.READ_WRITE) -> None:
        self.signal_intent(Intent(WorkerId(self.node, worker), frozenset(keys),
                                  c_start, c_end, intent_type))

    def advance_clock(self, worker: int) -> int:
        return self.clocks[worker].advance()

    def clock(self, worker: int) -> int:
        return self.clocks[worker].value

    # -- sync-thread-facing --------------------------------------------------

    def default_decider(self) -> ActDecider:
        if self.timing.immediate:
            return lambda w, c: math.inf
        return lambda w, c: self.estimators[w].update(c)

    def collect_round_signals(self, act_decider: Optional[ActDecider] = None
                              ) -> Tuple[List[int], List[int]]:
        """Return (starts, ends) to announce this round and update states.

        ``act_decider`` is called exactly once per worker per round.
        """
        decide = act_decider or self.default_decider()
        with self._lock:
            for w, clock in enumerate(self.clocks):
                now = clock.value
                # an intent that is already active is always acted on
                threshold = max(decide(w, now), now + 1)
                pending = self._pending[w]
                acted = self._acted[w]
                while pending and pending[0][0] < threshold:
                    _c_start, seq, c_end, keys = heapq.heappop(pending)
                    if c_end <= now:
                        continue  # expired before it was acted on
                    heapq.heappush(acted, (c_end, seq, keys))
                    for k in keys:
                        self._live[k] = self._live.get(k, 0) + 1
                    self._dirty.update(keys)
                while acted and acted[0][0] <= now:
                    _c_end, _seq, keys = heapq.heappop(acted)
                    for k in keys:
                        n = self._live[k] - 1
                        if n:
                            self._live[k] = n
                        else:
                            del self._live[k]
                    self._dirty.update(keys)

            starts, ends = [], []
            for k in sorted(self._dirty):
                st = self._status.get(k, Announce.IDLE)
                live = k in self._live
                if live and st is Announce.IDLE:
                    self._status[k] = Announce.STARTING
                    starts.append(k)
                elif not live and st is Announce.ACTIVE:
                    self._status[k] = Announce.ENDING
                    ends.append(k)
            # keys waiting on an ack stay dirty so they are re-examined
            self._dirty = {k for k in self._dirty
                           if self._status.get(k) in (Announce.STARTING, Announce.ENDING)}
            return starts, ends

    def ack_start(self, key: int) -> None:
        with self._lock:
            if self._status.get(key) is Announce.STARTING:
                self._status[key] = Announce.ACTIVE
                self._dirty.add(key)

    def ack_end(self, key: int) -> None:
        with self._lock:
            if self._status.get(key) is Announce.ENDING:
                del self._status[key]
                self._dirty.add(key)

    # -- introspection -------------------------------------------------------

    def status(self, key: int) -> Announce:
        return self._status.get(key, Announce.IDLE)

    def announced(self, key: int) -> bool:
        """Start announced and no end announced since (remote_active)."""
        return self._status.get(key, Announce.IDLE) in (Announce.STARTING, Announce.ACTIVE)

    def has_live(self, key: int) -> bool:
        return key in self._live

    def live_keys(self):
        return set(self._live)

    def pending_count(self) -> int:
        return sum(len(h) for h in self._pending) + sum(len(h) for h in self._acted)

    def quiescent(self) -> bool:
        return not self._live and not self._status and self.pending_count() == 0
