import math

import pytest
from hypothesis import given, settings, strategies as st

from adapm.core import ValidationError
from adapm.registry import Announce, IntentRegistry

ACT_NOW = lambda w, c: math.inf       # noqa: E731
WAIT = lambda w, c: c + 1             # only intents that already started  # noqa: E731


def test_signal_records_without_messages():
    reg = IntentRegistry(0, 1, 100)
    reg.intent(0, range(50), 2, 3)
    assert reg.pending_count() == 1
    assert reg.status(7) is Announce.IDLE


def test_overlapping_intents_recorded_independently():
    reg = IntentRegistry(0, 1, 10)
    reg.intent(0, [1], 0, 5)
    reg.intent(0, [1], 3, 8)
    assert reg.pending_count() == 2


def test_empty_window_and_bad_keys_rejected():
    reg = IntentRegistry(0, 1, 10)
    with pytest.raises(ValidationError):
        reg.intent(0, [1], 5, 5)
    with pytest.raises(ValidationError):
        reg.intent(0, [10], 0, 1)


def test_advance_clock():
    reg = IntentRegistry(0, 2, 10)
    assert reg.advance_clock(0) == 1
    for _ in range(4):
        reg.advance_clock(1)
    assert reg.clock(1) == 4 and reg.clock(0) == 1


def test_many_workers_one_start():
    reg = IntentRegistry(0, 32, 10)
    for w in range(32):
        reg.intent(w, [3], 0, 2)
    starts, ends = reg.collect_round_signals(ACT_NOW)
    assert starts == [3] and ends == []


def test_end_after_expiry_once():
    reg = IntentRegistry(0, 1, 10)
    reg.intent(0, [4], 0, 1)
    assert reg.collect_round_signals(ACT_NOW) == ([4], [])
    reg.ack_start(4)
    reg.advance_clock(0)
    assert reg.collect_round_signals(ACT_NOW) == ([], [4])
    assert reg.collect_round_signals(ACT_NOW) == ([], [])
    reg.ack_end(4)
    assert reg.quiescent()


def test_far_future_intent_waits():
    reg = IntentRegistry(0, 1, 10)
    reg.intent(0, [5], 100, 101)
    assert reg.collect_round_signals(WAIT) == ([], [])
    assert reg.status(5) is Announce.IDLE


def test_new_intent_extends_instead_of_restarting():
    reg = IntentRegistry(0, 1, 10)
    reg.intent(0, [1], 0, 2)
    reg.collect_round_signals(ACT_NOW)
    reg.ack_start(1)
    reg.intent(0, [1], 1, 4)
    reg.advance_clock(0)
    reg.advance_clock(0)
    # first intent expired, second still live: no end, no new start
    assert reg.collect_round_signals(ACT_NOW) == ([], [])
    for _ in range(2):
        reg.advance_clock(0)
    assert reg.collect_round_signals(ACT_NOW) == ([], [1])


def test_intent_expired_before_acting_is_dropped():
    reg = IntentRegistry(0, 1, 10)
    reg.intent(0, [2], 0, 1)
    reg.advance_clock(0)
    assert reg.collect_round_signals(WAIT) == ([], [])
    assert reg.quiescent()


def test_decider_called_once_per_worker():
    reg = IntentRegistry(0, 3, 10)
    calls = []
    reg.collect_round_signals(lambda w, c: calls.append(w) or 0)
    assert calls == [0, 1, 2]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 4), st.integers(0, 12),
                          st.integers(1, 6)), max_size=25),
       st.lists(st.booleans(), min_size=30, max_size=30))
def test_announcements_alternate_and_ends_are_not_forgotten(intents, acts):
    reg = IntentRegistry(0, 3, 5)
    by_round = {}
    for w, k, start, length in intents:
        by_round.setdefault(start // 2, []).append((w, k, start, start + length))
    history = {k: [] for k in range(5)}
    for rnd, act in enumerate(acts):
        for w, k, a, b in by_round.get(rnd, []):
            reg.intent(w, [k], max(a, reg.clock(w)), max(b, reg.clock(w) + 1))
        starts, ends = reg.collect_round_signals(ACT_NOW if act else WAIT)
        for k in starts:
            history[k].append("start")
            reg.ack_start(k)
        for k in ends:
            history[k].append("end")
            reg.ack_end(k)
        for w in range(3):
            reg.advance_clock(w)
    for w in range(3):
        for _ in range(20):
            reg.advance_clock(w)
    for _ in range(2):
        for k in reg.collect_round_signals(ACT_NOW)[1]:
            history[k].append("end")
            reg.ack_end(k)
    for k, seq in history.items():
        assert all(a != b for a, b in zip(seq, seq[1:])), seq
        assert not seq or seq[0] == "start"
        assert not seq or seq[-1] == "end"
    assert reg.quiescent()
