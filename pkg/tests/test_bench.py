import csv
import io
import json

import numpy as np
import pytest

from adapm.bench import (CSV_FIELDS, MemoryBudgetExceeded, WorkloadKind, WorkloadSpec,
                         additive_delta, emit_parameter_trace, generate_accesses,
                         memory_needed, reports_csv, run_benchmark, sweep_signal_offset)
from adapm.core import ValidationError
from adapm.protocol import PolicyMode

SMALL = WorkloadSpec(num_keys=600, value_len=2, batches_per_epoch=40, batch_size=8, seed=3)


def static_remote_share(spec, nodes, workers):
    """Fraction of per-batch distinct keys not homed on the reading node."""
    remote = total = 0
    for (n, _w), batches in generate_accesses(spec, nodes, workers, 1).items():
        for b in batches:
            u = np.unique(b)
            total += len(u)
            remote += int(np.count_nonzero(u % nodes != n))
    return remote / total


def test_accesses_are_deterministic_and_in_range():
    a = generate_accesses(SMALL, 2, 2, 2)
    b = generate_accesses(SMALL, 2, 2, 2)
    assert a.keys() == b.keys()
    for gid in a:
        assert len(a[gid]) == 80
        for x, y in zip(a[gid], b[gid]):
            assert np.array_equal(x, y) and x.min() >= 0 and x.max() < 600


def test_mf_batches_pair_rows_with_columns():
    spec = WorkloadSpec(kind=WorkloadKind.ROW_LOCALITY_MF, num_keys=400, batches_per_epoch=5,
                        batch_size=4)
    acc = generate_accesses(spec, 2, 1, 1)
    for batches in acc.values():
        for b in batches:
            assert (b[0::2] < 200).all() and (b[1::2] >= 200).all()
    rows0 = {int(r) for b in acc[(0, 0)] for r in b[0::2]}
    rows1 = {int(r) for b in acc[(1, 0)] for r in b[0::2]}
    assert not rows0 & rows1


def test_additive_delta_is_small_integers():
    d = additive_delta(3, 7, np.arange(50), 4)
    assert d.shape == (50, 4)
    assert np.array_equal(d, np.round(d)) and d.min() >= -3 and d.max() <= 3
    assert np.array_equal(d, additive_delta(3, 7, np.arange(50), 4))


def test_spec_validation():
    with pytest.raises(ValidationError):
        WorkloadSpec(num_keys=0)
    with pytest.raises(ValidationError):
        WorkloadSpec(kernel="sgd")
    with pytest.raises(ValidationError):
        WorkloadSpec(signal_offset_batches=-1)


def test_benchmark_is_deterministic():
    a = run_benchmark(SMALL, nodes=2)
    b = run_benchmark(SMALL, nodes=2)
    assert a.summary() == b.summary()
    assert reports_csv([a]) == reports_csv([b])


def test_every_mode_gives_the_same_parameters():
    finals = {}
    for mode in PolicyMode:
        r = run_benchmark(SMALL, mode, nodes=3, check_invariants=True)
        assert r.protocol_warnings == 0 and r.invariant_violations == []
        assert np.array_equal(r.final_values, r.expected_values)
        finals[mode] = r.final_values
    ref = finals[PolicyMode.ADAPM]
    assert all(np.array_equal(ref, v) for v in finals.values())


def test_static_remote_share_matches_oracle():
    r = run_benchmark(SMALL, PolicyMode.STATIC_PARTITIONING, nodes=3)
    assert r.remote_access_share == pytest.approx(static_remote_share(SMALL, 3, 2), abs=1e-12)


def test_no_relocation_creates_at_least_as_many_replicas():
    a = run_benchmark(SMALL, PolicyMode.ADAPM, nodes=3)
    nr = run_benchmark(SMALL, PolicyMode.NO_RELOCATION, nodes=3)
    assert nr.relocation_count == 0
    assert nr.replica_creation_count >= a.replica_creation_count


def test_zero_offset_raises_remote_share():
    early = run_benchmark(SMALL, nodes=2)
    late = run_benchmark(WorkloadSpec(**{**SMALL.__dict__, "signal_offset_batches": 0}),
                         nodes=2)
    assert late.remote_access_share > early.remote_access_share


def test_memory_budget():
    need_fr = memory_needed(SMALL, PolicyMode.FULL_REPLICATION, 3)
    need = memory_needed(SMALL, PolicyMode.ADAPM, 3)
    assert need_fr == 600 * 2 * 4 and need == 200 * 2 * 4
    with pytest.raises(MemoryBudgetExceeded):
        run_benchmark(SMALL, PolicyMode.FULL_REPLICATION, nodes=3, memory_budget=need)
    run_benchmark(SMALL, PolicyMode.ADAPM, nodes=3, memory_budget=need)


def test_csv_and_json_schema():
    rep = run_benchmark(SMALL, nodes=2, epochs=2)
    rows = list(csv.DictReader(io.StringIO(reports_csv([rep]))))
    assert list(rows[0].keys()) == CSV_FIELDS
    assert len(rows) == 2 * 2 + 1
    assert rows[-1]["node"] == "all" and int(rows[-1]["bytes_sent"]) == rep.total_bytes
    assert sum(int(r["bytes_sent"]) for r in rows[:-1]) == rep.total_bytes
    assert sum(int(r["pulls"]) for r in rows[:-1]) == rep.pulls
    d = json.loads(rep.to_json())
    for k in ("total_bytes", "remote_access_share", "staleness_mean_ms", "relocation_count",
              "replica_creation_count", "rounds_executed", "per_node_epoch", "lambda_trace"):
        assert k in d
    assert len(d["epoch_times_ms"]) == 2


def test_parameter_trace():
    rep = run_benchmark(SMALL, nodes=2, trace_keys=[0, 5])
    lines = emit_parameter_trace(rep).splitlines()
    assert lines[0] == "round,key,owner,holders"
    assert len(lines) == 1 + 2 * rep.rounds_executed
    with pytest.raises(ValidationError):
        emit_parameter_trace(run_benchmark(SMALL, nodes=2))


def test_sweep_covers_every_combination():
    out = sweep_signal_offset(SMALL, [0, 4], nodes=2)
    assert set(out) == {(o, m) for o in (0, 4)
                        for m in (PolicyMode.ADAPM, PolicyMode.IMMEDIATE_ACTION)}
    assert out[(4, PolicyMode.ADAPM)].signal_offset == 4


def test_sgd_kernel_reports_loss():
    spec = WorkloadSpec(kind=WorkloadKind.ROW_LOCALITY_MF, num_keys=400, batches_per_epoch=20,
                        batch_size=8, kernel="sgd")
    rep = run_benchmark(spec, nodes=2, epochs=2)
    assert len(rep.loss) == 2 and all(np.isfinite(rep.loss))
    assert rep.expected_values is None
