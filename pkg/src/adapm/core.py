"""Shared vocabulary: keys, clocks, intents, worker identities."""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import FrozenSet, Iterable, NamedTuple

import numpy as np

VALUE_DTYPE = np.float32


class ValidationError(ValueError):
    """Raised for malformed inputs (bad intent windows, wrong value length, ...)."""


class IntentType(enum.Enum):
    READ = "read"
    WRITE = "write"
    READ_WRITE = "read_write"


class IntentState(enum.Enum):
    INACTIVE = "inactive"
    ACTIVE = "active"
    EXPIRED = "expired"


class WorkerId(NamedTuple):
    node: int
    index: int


@dataclass(frozen=True)
class Intent:
    """A worker's declared access to ``keys`` while its clock is in [c_start, c_end)."""

    worker: WorkerId
    keys: FrozenSet[int]
    c_start: int
    c_end: int
    intent_type: IntentType = IntentType.READ_WRITE

    def __post_init__(self):
        if self.c_start >= self.c_end:
            raise ValidationError(
                f"empty intent window [{self.c_start}, {self.c_end})")
        if self.c_start < 0:
            raise ValidationError("c_start must be non-negative")

    @property
    def node(self) -> int:
        return self.worker.node


def intent_state(intent: Intent, current_clock: int) -> IntentState:
    if current_clock < intent.c_start:
        return IntentState.INACTIVE
    if current_clock < intent.c_end:
        return IntentState.ACTIVE
    return IntentState.EXPIRED


def check_keys(keys: Iterable[int], num_keys: int) -> FrozenSet[int]:
    ks = frozenset(int(k) for k in keys)
    for k in ks:
        if not 0 <= k < num_keys:
            raise ValidationError(f"key {k} outside [0, {num_keys})")
    return ks


def check_value(vec, value_len: int) -> np.ndarray:
    arr = np.asarray(vec, dtype=VALUE_DTYPE)
    if arr.shape != (value_len,):
        raise ValidationError(
            f"value has shape {arr.shape}, expected ({value_len},)")
    return arr


class WorkerClock:
    """Monotone per-worker logical clock.

    Single writer (the owning worker), many readers. Increments take a lock so
    readers in other threads never observe a lost update.
    """

    __slots__ = ("_value", "_lock")

    def __init__(self, start: int = 0):
        self._value = start
        self._lock = threading.Lock()

    @property
    def value(self) -> int:
        return self._value

    def advance(self) -> int:
        with self._lock:
            self._value += 1
            return self._value
