import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adapm.core import (Intent, IntentState, IntentType, ValidationError, WorkerClock, WorkerId,
                        check_keys, check_value, intent_state)

W = WorkerId(0, 0)


@pytest.mark.parametrize("clock, state", [
    (1, IntentState.INACTIVE),
    (2, IntentState.ACTIVE),
    (3, IntentState.EXPIRED),
])
def test_intent_state_boundaries(clock, state):
    assert intent_state(Intent(W, frozenset({1}), 2, 3), clock) is state


def test_empty_window_rejected():
    with pytest.raises(ValidationError):
        Intent(W, frozenset({1}), 5, 5)
    with pytest.raises(ValidationError):
        Intent(W, frozenset({1}), 6, 5)


def test_intent_type_defaults_to_read_write():
    assert Intent(W, frozenset(), 0, 1).intent_type is IntentType.READ_WRITE


@given(st.integers(0, 50), st.integers(1, 50), st.lists(st.integers(0, 200), min_size=2))
def test_state_moves_only_forward(c_start, length, clocks):
    intent = Intent(W, frozenset({0}), c_start, c_start + length)
    order = [IntentState.INACTIVE, IntentState.ACTIVE, IntentState.EXPIRED]
    states = [order.index(intent_state(intent, c)) for c in sorted(clocks)]
    assert states == sorted(states)


@given(st.lists(st.lists(st.integers(-1000, 1000), min_size=3, max_size=3), min_size=1,
                max_size=30), st.randoms())
def test_additive_merge_is_order_independent(deltas, rnd):
    arr = np.asarray(deltas, dtype=np.float32)
    a = np.zeros(3, np.float32)
    for d in arr:
        a += d
    shuffled = list(arr)
    rnd.shuffle(shuffled)
    b = np.zeros(3, np.float32)
    for d in shuffled:
        b += d
    assert np.array_equal(a, b)


def test_check_keys_and_values():
    assert check_keys([3, 1, 3], 4) == frozenset({1, 3})
    with pytest.raises(ValidationError):
        check_keys([4], 4)
    with pytest.raises(ValidationError):
        check_keys([-1], 4)
    assert check_value([1, 2], 2).dtype == np.float32
    with pytest.raises(ValidationError):
        check_value([1, 2, 3], 2)


def test_clock_no_lost_increments():
    clock = WorkerClock()
    seen = []

    def reader():
        for _ in range(2000):
            seen.append(clock.value)

    t = threading.Thread(target=reader)
    t.start()
    for _ in range(5000):
        clock.advance()
    t.join()
    assert clock.value == 5000
    assert seen == sorted(seen)
