import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adapm.core import ValidationError
from adapm.store import (NodeStore, ParameterRecord, ReplicaRecord, Served, owner_merge,
                         replica_refresh_response)

VL = 3


def vec(*xs):
    return np.asarray(xs, dtype=np.float32)


def test_pull_owned_replica_and_miss():
    s = NodeStore(0, 10, VL)
    s.init_owned([1])
    s.replicas[2] = ReplicaRecord(2, vec(1, 1, 1), 0, now=5.0)
    v, served, stale = s.local_read(1, 7.0)
    assert served is Served.OWNED_LOCAL and stale == 0.0
    v, served, stale = s.local_read(2, 7.0)
    assert served is Served.REPLICA and stale == 2.0 and np.array_equal(v, vec(1, 1, 1))
    assert s.local_read(3, 7.0) is None


def test_pull_returns_copies():
    s = NodeStore(0, 10, VL)
    s.init_owned([1])
    v, _, _ = s.local_read(1, 0.0)
    v += 5
    assert not s.owned[1].value.any()


def test_push_paths():
    s = NodeStore(0, 10, VL)
    s.init_owned([1])
    s.replicas[2] = ReplicaRecord(2, vec(0, 0, 0), 0, now=0.0)
    assert s.push(1, vec(1, 0, 0)) is Served.OWNED_LOCAL
    assert s.push(1, vec(1, 0, 0)) is Served.OWNED_LOCAL
    assert np.array_equal(s.owned[1].value, vec(2, 0, 0))
    assert s.push(2, vec(0, 1, 0)) is Served.REPLICA
    assert np.array_equal(s.replicas[2].value, vec(0, 1, 0))      # visible at once
    assert np.array_equal(s.replicas[2].pending, vec(0, 1, 0))    # shipped next round
    assert s.push(3, vec(0, 0, 1)) is Served.REMOTE_SYNC
    assert s.push(3, vec(0, 0, 1)) is Served.REMOTE_SYNC
    out = s.take_outgoing()
    assert list(out) == [3] and np.array_equal(out[3], vec(0, 0, 2))
    assert s.outgoing == {}


def test_push_length_mismatch():
    s = NodeStore(0, 10, VL)
    with pytest.raises(ValidationError):
        s.push(1, [1.0, 2.0])


def test_owner_merge_one_version_per_batch():
    rec = ParameterRecord(0, np.zeros(VL, np.float32))
    assert owner_merge(rec, [vec(1, 0, 0), vec(0, 2, 0), vec(0, 0, 3)]) == 1
    assert np.array_equal(rec.value, vec(1, 2, 3))
    assert owner_merge(rec, []) == 1


def test_merge_with_two_holders_logs_one_entry():
    rec = ParameterRecord(0, np.zeros(VL, np.float32))
    rec.add_holder(1)
    rec.add_holder(2)
    owner_merge(rec, [vec(1, 1, 1), vec(2, 2, 2)])
    assert len(rec.log) == 1
    for h in (1, 2):
        reply = replica_refresh_response(rec, h, 0)
        assert reply.version == 1 and len(reply.deltas) == 1
        assert np.array_equal(reply.deltas[0], vec(3, 3, 3))


def test_refresh_three_deltas():
    rec = ParameterRecord(0, np.zeros(VL, np.float32))
    for _ in range(5):
        owner_merge(rec, [vec(1, 0, 0)])
    rec.add_holder(1)
    assert rec.holders[1] == 5
    for i in range(3):
        owner_merge(rec, [vec(0, i + 1, 0)])
    reply = replica_refresh_response(rec, 1, 5)
    assert reply.version == 8
    assert [d[1] for d in reply.deltas] == [1, 2, 3]


def test_refresh_at_current_version_is_empty():
    rec = ParameterRecord(0, np.zeros(VL, np.float32))
    rec.add_holder(1)
    reply = replica_refresh_response(rec, 1, 0)
    assert reply.deltas == [] and reply.version == 0


def test_refresh_below_horizon_and_unknown_holder_get_full_value():
    rec = ParameterRecord(0, np.zeros(VL, np.float32))
    oracle = np.zeros(VL, np.float64)
    rec.add_holder(1)
    for i in range(4):
        d = vec(i, 1, 0)
        owner_merge(rec, [d])
        oracle += d
    replica_refresh_response(rec, 1, 0)     # prunes the log up to version 4
    owner_merge(rec, [vec(9, 9, 9)])
    oracle += vec(9, 9, 9)
    reply = replica_refresh_response(rec, 1, 2)   # holder claims an old version
    assert reply.deltas is None and np.array_equal(reply.full, oracle.astype(np.float32))
    reply = replica_refresh_response(rec, 7, 0)   # never registered
    assert reply.deltas is None and 7 in rec.holders


def test_log_empty_without_holders():
    rec = ParameterRecord(0, np.zeros(VL, np.float32))
    owner_merge(rec, [vec(1, 1, 1)])
    assert rec.log == []
    rec.add_holder(3)
    owner_merge(rec, [vec(1, 1, 1)])
    assert len(rec.log) == 1
    rec.remove_holder(3)
    assert rec.log == [] and rec.log_base == rec.version


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["owner", "h1", "h2", "ship1", "ship2",
                                           "refresh1", "refresh2"]),
                          st.integers(-3, 3)), max_size=60))
def test_replica_reconstruction(ops):
    """Holder value == owner value at the returned version + unshipped local updates."""
    rec = ParameterRecord(0, np.zeros(1, np.float32))
    history = {0: 0.0}               # no-pruning oracle: owner value per version
    reps = {}
    for h in (1, 2):
        v = rec.add_holder(h)
        reps[h] = ReplicaRecord(0, rec.value.copy(), v, now=0.0)
    shipped = {1: None, 2: None}
    for op, x in ops:
        d = np.asarray([x], np.float32)
        if op == "owner":
            rec.add(d)
        elif op in ("h1", "h2"):
            reps[int(op[1])].add(d)
        elif op.startswith("ship"):
            h = int(op[-1])
            if shipped[h] is None:
                shipped[h] = reps[h].ship()
        else:
            h = int(op[-1])
            if shipped[h] is not None:
                owner_merge(rec, [shipped[h]])
                shipped[h] = None
            rec.seal()
            history[rec.version] = float(rec.value[0])
            reply = replica_refresh_response(rec, h, reps[h].synced_version)
            history[reply.version] = float(rec.value[0])
            reps[h].apply_refresh(reply, now=1.0)
            pending = 0.0 if reps[h].pending is None else float(reps[h].pending[0])
            assert reps[h].base[0] == history[reply.version]
            assert reps[h].value[0] == history[reply.version] + pending
        assert len(rec.log) == 0 or rec.log[0][0] > rec.log_base
