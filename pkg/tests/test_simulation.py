import numpy as np
import pytest

from adapm.protocol import PolicyMode
from adapm.simulation import (BUNDLED_SCENARIOS, ScriptError, SimCluster, bundled_scenario,
                              parse_script, run_random_stress, run_simulated_scenario,
                              timeline_csv)


def owners(events, key=0, first=0):
    """Sequence of nodes holding the main copy, from RelocateDone events."""
    seq = [first]
    seq += [n for _, ev, k, n in events if ev == "RelocateDone" and k == key]
    return seq


@pytest.mark.parametrize("name", BUNDLED_SCENARIOS)
def test_bundled_timeline_matches_expected(name):
    script, expected = bundled_scenario(name)
    assert timeline_csv(run_simulated_scenario(script)) == expected


@pytest.mark.parametrize("name", BUNDLED_SCENARIOS)
def test_replay_is_deterministic(name):
    script, _ = bundled_scenario(name)
    runs = {timeline_csv(run_simulated_scenario(script)) for _ in range(10)}
    assert len(runs) == 1


def test_separate_intents_owner_follows():
    events = run_simulated_scenario(bundled_scenario("separate")[0])
    assert owners(events) == [0, 2, 3]
    assert not any(ev.startswith("Replica") for _, ev, _, _ in events)


def test_overlap_relocate_replicate_relocate():
    events = run_simulated_scenario(bundled_scenario("overlap")[0])
    kinds = [(ev, n) for _, ev, _, n in events]
    assert owners(events) == [0, 2, 3]
    assert kinds.index(("ReplicaCreate", 3)) < kinds.index(("RelocateStart", 2))


def test_hotspot_replicas_for_every_concurrent_node():
    events = run_simulated_scenario(bundled_scenario("hotspot")[0])
    created = {n for _, ev, _, n in events if ev == "ReplicaCreate"}
    assert created == {0, 1, 2, 3}
    # relocations happen only when a single non-owner remains
    assert any(ev == "RelocateDone" for _, ev, _, _ in events)


def test_exactly_one_waits_for_single_active_node():
    events = run_simulated_scenario(bundled_scenario("exactly_one")[0])
    relocs = [r for r, ev, _, _ in events if ev == "RelocateStart"]
    # node 0 (the owner) expires at clock 3 but 1, 2, 3 stay active until clock 8
    assert relocs == [8]
    assert owners(events) == [0, 2]


def test_empty_script_empty_timeline():
    assert run_simulated_scenario("") == []
    assert run_simulated_scenario("# only a comment\n\n") == []
    assert timeline_csv([]) == "round,event,key,node\n"


@pytest.mark.parametrize("text, line", [
    ("round\nfoo 1\n", 2),
    ("intent 0 0 1 2\n", 1),
    ("round\nround\nintent 0 0 x 1 2\n", 3),
    ("advance 0 -1\n", 1),
    ("intent 0 0 1 5 5\n", 1),
])
def test_malformed_script_reports_line(text, line):
    with pytest.raises(ScriptError) as err:
        parse_script(text)
    assert err.value.lineno == line
    assert f"line {line}" in str(err.value)


def test_parse_comments_and_directives():
    ds = parse_script("advance 1 0  # tick\nintent 1 0 7 2 4\nround\n")
    assert [(d.op, d.args) for d in ds] == [("advance", (1, 0)), ("intent", (1, 0, 7, 2, 4)),
                                            ("round", ())]


def test_scenario_under_no_relocation_only_replicates():
    events = run_simulated_scenario(bundled_scenario("overlap")[0],
                                    policy=PolicyMode.NO_RELOCATION)
    assert {ev for _, ev, _, _ in events} <= {"ReplicaCreate", "ReplicaDestroy"}


@pytest.mark.parametrize("mode", list(PolicyMode))
def test_small_stress_conserves_in_every_mode(mode):
    r = run_random_stress(3, num_keys=300, total_pushes=3000, policy=mode, hot_keys=20)
    assert np.array_equal(r.final, r.expected)
    assert r.protocol_warnings == 0 and not r.violations.all()
    assert r.max_hops <= 3


def test_cache_off_changes_no_value():
    a = run_random_stress(5, num_keys=300, total_pushes=3000, hot_keys=20)
    b = run_random_stress(5, num_keys=300, total_pushes=3000, hot_keys=20, use_cache=False)
    assert np.array_equal(a.final, b.final) and np.array_equal(a.final, a.expected)


def test_stress_is_deterministic():
    a = run_random_stress(9, num_keys=200, total_pushes=2000, hot_keys=10)
    b = run_random_stress(9, num_keys=200, total_pushes=2000, hot_keys=10)
    assert a.rounds == b.rounds and np.array_equal(a.final, b.final)


def test_trace_rows():
    c = SimCluster(2, 1, 4, 1, trace_keys=[1])
    c.run_round()
    c.nodes[0].registry.intent(0, [1], 1, 3)
    for _ in range(3):
        c.run_round()
    rows = c.trace_csv().splitlines()
    assert rows[0] == "round,key,owner,holders"
    # key 1 starts at its home node 1; a start and a grant fit in one round
    assert rows[1:] == ["0,1,1,", "1,1,0,", "2,1,0,", "3,1,0,"]


def test_drain_reports_stuck_cluster():
    c = SimCluster(2, 1, 4, 1)
    c.nodes[0].registry.intent(0, [1], 0, 1000)
    with pytest.raises(RuntimeError):
        c.drain(max_rounds=5)


def test_home_directory_consistent_at_quiescence():
    r_cluster = SimCluster(4, 2, 200, 1, check_invariants=True)
    rng = np.random.default_rng(1)
    for step in range(30):
        for n in range(4):
            for w in range(2):
                r_cluster.nodes[n].registry.intent(w, rng.integers(0, 200, 5).tolist(),
                                                   step, step + 3)
                r_cluster.nodes[n].registry.advance_clock(w)
        r_cluster.run_round()
    for n in range(4):
        for w in range(2):
            for _ in range(10):
                r_cluster.nodes[n].registry.advance_clock(w)
    r_cluster.drain()
    for k in range(200):
        home = r_cluster.nodes[k % 4]
        assert home.router.directory_owner(k) == r_cluster.owner_of(k)
