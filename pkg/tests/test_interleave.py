"""Transactional concurrency: lockstep-interleaved executions must land in
serial-execution states, single-resource conflicts admit one winner, and
genuinely concurrent callers leave the monitor consistent."""

import pytest

from conftest import make_monitor
from secmon.harness import (
    ActorCall,
    all_schedules,
    run_concurrent,
    run_interleaving,
    serial_outcomes,
)
from secmon.invariants import registered_invariants
from secmon.machine import UNTRUSTED_OS
from secmon.resources import region_resource

R1 = region_resource(1)
R2 = region_resource(2)


def blocked_monitor(regions=(1,)):
    mon = make_monitor()
    for region in regions:
        mon.block_resource(UNTRUSTED_OS, region_resource(region))
    return mon


def racing_clean_scripts(mon):
    return {
        "a": [ActorCall("clean r1", lambda: mon.clean_resource(UNTRUSTED_OS, R1))],
        "b": [ActorCall("clean r1", lambda: mon.clean_resource(UNTRUSTED_OS, R1))],
    }


def disjoint_scripts(mon):
    return {
        "a": [ActorCall("clean r1", lambda: mon.clean_resource(UNTRUSTED_OS, R1))],
        "b": [ActorCall("clean r2", lambda: mon.clean_resource(UNTRUSTED_OS, R2))],
    }


def three_call_scripts(mon):
    return {
        "a": [ActorCall("clean r1", lambda: mon.clean_resource(UNTRUSTED_OS, R1)),
              ActorCall("block r2", lambda: mon.block_resource(UNTRUSTED_OS, R2))],
        "b": [ActorCall("clean r1", lambda: mon.clean_resource(UNTRUSTED_OS, R1))],
    }


def test_conflicting_cleans_have_exactly_one_winner():
    saw_concurrent = False
    for schedule in all_schedules(racing_clean_scripts(blocked_monitor())):
        mon = blocked_monitor()
        outcome = run_interleaving(mon, racing_clean_scripts(mon), schedule)
        results = [r for calls in outcome.results.values() for _, r in calls]
        assert results.count("ok") == 1, schedule
        assert set(results) <= {"ok", "ConcurrentCall", "WrongState"}
        saw_concurrent |= "ConcurrentCall" in results
        assert mon.guards.quiescent()
    assert saw_concurrent  # overlapping schedules really overlapped


def test_every_interleaving_matches_a_serial_execution():
    serial = serial_outcomes(blocked_monitor, racing_clean_scripts)
    for schedule in all_schedules(racing_clean_scripts(blocked_monitor())):
        mon = blocked_monitor()
        # run_interleaving raises AtomicityViolation on a non-serial state
        run_interleaving(mon, racing_clean_scripts(mon), schedule,
                         serial_hashes=serial)


def test_atomicity_violation_detected():
    from secmon.harness import AtomicityViolation
    serial = serial_outcomes(blocked_monitor, racing_clean_scripts)
    mon = blocked_monitor()
    with pytest.raises(AtomicityViolation):
        run_interleaving(mon, racing_clean_scripts(mon), ("a", "a", "b", "b"),
                         serial_hashes={"not-a-real-hash"})


def test_disjoint_resources_always_both_succeed():
    make = lambda: blocked_monitor(regions=(1, 2))
    for schedule in all_schedules(disjoint_scripts(make())):
        mon = make()
        outcome = run_interleaving(mon, disjoint_scripts(mon), schedule)
        results = [r for calls in outcome.results.values() for _, r in calls]
        assert results == ["ok", "ok"], schedule


def test_three_call_race_is_serializable():
    make = lambda: blocked_monitor(regions=(1,))
    serial = serial_outcomes(make, three_call_scripts)
    schedules = list(all_schedules(three_call_scripts(make())))
    assert len(schedules) == 15  # C(6,2): full enumeration of phase orders
    for schedule in schedules:
        mon = make()
        outcome = run_interleaving(mon, three_call_scripts(mon), schedule)
        assert outcome.state_hash in serial, schedule


def test_concurrent_stress_preserves_invariants():
    mon = make_monitor()
    ops = []
    for region in (1, 2, 3, 4):
        rid = region_resource(region)
        ops.append(("block", rid))
        ops.append(("clean", rid))
        ops.append(("clean", rid))
    scripts = {}
    for worker in range(4):
        calls = []
        for op, rid in ops[worker::2]:
            if op == "block":
                calls.append(ActorCall(f"block {rid}",
                                       lambda r=rid: mon.block_resource(UNTRUSTED_OS, r)))
            else:
                calls.append(ActorCall(f"clean {rid}",
                                       lambda r=rid: mon.clean_resource(UNTRUSTED_OS, r)))
        scripts[f"w{worker}"] = calls
    run_concurrent(mon, scripts)
    assert mon.guards.quiescent()
    for invariant in registered_invariants():
        assert not invariant.check_state(mon)
