import json
import signal
import socket
import subprocess
import sys
import threading
import time

import numpy as np
import pytest

from adapm.bench import WorkloadSpec
from adapm.protocol import PolicyMode
from adapm.realtime import NodeRunConfig, RealtimeError, expected_values, merge_owned, run_node
from adapm.transport import SocketTransport

SPEC = WorkloadSpec(num_keys=300, value_len=3, batches_per_epoch=30, batch_size=8,
                    signal_offset_batches=6, seed=5)


def free_ports(n):
    socks = [socket.socket() for _ in range(n)]
    for s in socks:
        s.bind(("127.0.0.1", 0))
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def run_threads(n, cfg):
    peers = {i: ("127.0.0.1", p) for i, p in enumerate(free_ports(n))}
    res = [None] * n
    errs = []

    def go(i):
        t = SocketTransport(i, peers)
        try:
            res[i] = run_node(i, n, t, cfg, timeout=120)
        except Exception as exc:
            errs.append(exc)
        finally:
            t.close()

    ths = [threading.Thread(target=go, args=(i,)) for i in range(n)]
    for t in ths:
        t.start()
    for t in ths:
        t.join(180)
    assert not errs, errs
    return res


@pytest.mark.parametrize("mode", [PolicyMode.ADAPM, PolicyMode.STATIC_PARTITIONING,
                                  PolicyMode.FULL_REPLICATION])
def test_socket_cluster_conserves_updates(mode):
    res = run_threads(2, NodeRunConfig(SPEC, mode, workers_per_node=2, rounds_per_sec=2000))
    final = merge_owned(res, SPEC.num_keys, SPEC.value_len)
    assert np.array_equal(final, expected_values(SPEC, 2, 2, 1))
    assert all(r["protocol_warnings"] == 0 and r["max_hops"] <= 3 for r in res)
    assert res[0]["rounds"] == res[1]["rounds"]   # lockstep


def test_rate_limit_caps_rounds():
    res = run_threads(2, NodeRunConfig(SPEC, PolicyMode.ADAPM, workers_per_node=1,
                                       rounds_per_sec=50, compute_ms_per_access=0.5))
    for r in res:
        assert r["rounds"] / r["wall_seconds"] <= 50 * 1.1


def test_merge_owned_rejects_gaps_and_duplicates():
    with pytest.raises(RealtimeError):
        merge_owned([{"owned": {0: [1.0]}}, {"owned": {0: [2.0]}}], 1, 1)
    with pytest.raises(RealtimeError):
        merge_owned([{"owned": {0: [1.0]}}], 2, 1)


# -- separate processes ---------------------------------------------------------------------

def write_manifest(tmp_path, n):
    path = tmp_path / "cluster.txt"
    path.write_text("".join(f"{i} 127.0.0.1:{p}\n" for i, p in enumerate(free_ports(n))))
    return path


def spawn(tmp_path, manifest, i, extra=()):
    out = tmp_path / f"node{i}.json"
    cmd = [sys.executable, "-m", "adapm.cli", "node", "--manifest", str(manifest),
           "--node-id", str(i), "--keys", "300", "--value-len", "3", "--batches", "30",
           "--batch-size", "8", "--signal-offset", "6", "--seed", "5", "--workers", "2",
           "--rounds-per-sec", "2000", "--out", str(out), *extra]
    return subprocess.Popen(cmd, stderr=subprocess.PIPE, text=True), out


def test_two_processes_conserve_updates(tmp_path):
    manifest = write_manifest(tmp_path, 2)
    procs = [spawn(tmp_path, manifest, i) for i in range(2)]
    for p, _ in procs:
        assert p.wait(180) == 0, p.stderr.read()
    res = [json.loads(out.read_text()) for _, out in procs]
    final = merge_owned(res, SPEC.num_keys, SPEC.value_len)
    assert np.array_equal(final, expected_values(SPEC, 2, 2, 1))
    assert not any(r["interrupted"] for r in res)


def test_missing_peer_exits_1(tmp_path):
    manifest = write_manifest(tmp_path, 2)
    p, _ = spawn(tmp_path, manifest, 0, ["--connect-attempts", "3"])
    assert p.wait(60) == 1


def test_sigterm_drains_and_conserves(tmp_path):
    manifest = write_manifest(tmp_path, 2)
    slow = ["--compute-ms", "2", "--batches", "400"]
    procs = [spawn(tmp_path, manifest, i, slow) for i in range(2)]
    time.sleep(2.0)
    for p, _ in procs:
        p.send_signal(signal.SIGTERM)
    for p, _ in procs:
        assert p.wait(120) == 0, p.stderr.read()
    res = [json.loads(out.read_text()) for _, out in procs]
    assert all(r["interrupted"] for r in res)
    done = {(r["node"], w): b for r in res for w, b in enumerate(r["batches_done"])}
    assert sum(done.values()) < 2 * 2 * 400
    spec = WorkloadSpec(**{**SPEC.__dict__, "batches_per_epoch": 400})
    final = merge_owned(res, spec.num_keys, spec.value_len)
    assert np.array_equal(final, expected_values(spec, 2, 2, 1, done))
