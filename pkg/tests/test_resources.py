import pytest

from conftest import make_monitor
from secmon.errors import (
    ConcurrentCall,
    NoSuchDomain,
    NoSuchResource,
    NotOffered,
    NotOS,
    NotOwner,
    WrongState,
)
from secmon.machine import SECURITY_MONITOR, UNTRUSTED_OS, enclave_domain
from secmon.resources import (
    ResourceState,
    core_resource,
    region_resource,
    thread_resource,
)

R1 = region_resource(1)
R2 = region_resource(2)


def with_enclave(mon, eid=None, init=False):
    eid = eid if eid is not None else mon.free_metadata_slot("enclave")
    mon.create_enclave(UNTRUSTED_OS, eid, 0x400000, 0x4000, 1)
    tid = mon.free_metadata_slot("thread")
    mon.create_thread(UNTRUSTED_OS, eid, tid, 0x400000, {})
    if init:
        mon.init_enclave(UNTRUSTED_OS, eid)
    return eid, tid


class TestBootDefaults:
    def test_fresh_region_owned_by_os(self, monitor):
        assert monitor.owner_of(R1) == (UNTRUSTED_OS, "Owned")

    def test_monitor_region_reserved(self, monitor):
        assert monitor.owner_of(region_resource(0)) == (SECURITY_MONITOR, "Owned")

    def test_cores_owned_by_os(self, monitor):
        assert monitor.owner_of(core_resource(0)) == (UNTRUSTED_OS, "Owned")

    def test_missing_resource(self, monitor):
        with pytest.raises(NoSuchResource):
            monitor.owner_of(region_resource(99))


class TestTransitionDiagram:
    """Exhaustive enumeration of the per-resource transition diagram: from
    each state, exactly the documented edges succeed."""

    def _to_state(self, mon, state, eid):
        if state is ResourceState.OWNED:
            return
        mon.block_resource(UNTRUSTED_OS, R1)
        if state is ResourceState.BLOCKED:
            return
        mon.clean_resource(UNTRUSTED_OS, R1)
        if state is ResourceState.CLEAN:
            return
        mon.grant_resource(UNTRUSTED_OS, R1, enclave_domain(eid))

    @pytest.mark.parametrize("state", list(ResourceState))
    def test_edges_from_every_state(self, state):
        edges = {
            ResourceState.OWNED: {"block"},
            ResourceState.BLOCKED: {"clean"},
            ResourceState.CLEAN: {"grant"},
            ResourceState.OFFERED: {"accept"},
        }[state]
        for op in ("block", "clean", "grant", "accept"):
            mon = make_monitor()
            eid, _ = with_enclave(mon)
            self._to_state(mon, state, eid)
            call = {
                "block": lambda: mon.block_resource(UNTRUSTED_OS, R1),
                "clean": lambda: mon.clean_resource(UNTRUSTED_OS, R1),
                "grant": lambda: mon.grant_resource(UNTRUSTED_OS, R1,
                                                    enclave_domain(eid)),
                "accept": lambda: mon.accept_resource(enclave_domain(eid), R1),
            }[op]
            if op in edges:
                call()
            else:
                with pytest.raises((WrongState, NotOffered)):
                    call()

    def test_full_cycle_keeps_backend_consistent(self):
        mon = make_monitor()
        e1, _ = with_enclave(mon)
        e2, _ = with_enclave(mon)
        checkpoints = []

        def check():
            record = mon.resources.get(R1)
            checkpoints.append((record.state, record.owner))
            assert mon.machine.backend_owner_of(0x10000) == record.owner

        mon.block_resource(UNTRUSTED_OS, R1)
        check()
        mon.clean_resource(UNTRUSTED_OS, R1)
        check()
        mon.grant_resource(UNTRUSTED_OS, R1, enclave_domain(e1))
        check()
        mon.accept_resource(enclave_domain(e1), R1)
        check()
        mon.block_resource(enclave_domain(e1), R1)
        check()
        mon.clean_resource(UNTRUSTED_OS, R1)
        check()
        mon.grant_resource(UNTRUSTED_OS, R1, enclave_domain(e2))
        check()
        mon.accept_resource(enclave_domain(e2), R1)
        check()
        assert checkpoints[-1] == (ResourceState.OWNED, enclave_domain(e2))


class TestCallerAuthority:
    def test_block_requires_ownership(self, monitor):
        eid, _ = with_enclave(monitor)
        with pytest.raises(NotOwner):
            monitor.block_resource(enclave_domain(eid), R1)

    def test_clean_is_os_only(self, monitor):
        eid, _ = with_enclave(monitor)
        monitor.block_resource(UNTRUSTED_OS, R1)
        with pytest.raises(NotOS):
            monitor.clean_resource(enclave_domain(eid), R1)

    def test_grant_to_dead_enclave(self, monitor):
        eid, _ = with_enclave(monitor, init=True)
        monitor.delete_enclave(UNTRUSTED_OS, eid)
        monitor.block_resource(UNTRUSTED_OS, R1)
        monitor.clean_resource(UNTRUSTED_OS, R1)
        with pytest.raises(NoSuchDomain):
            monitor.grant_resource(UNTRUSTED_OS, R1, enclave_domain(eid))

    def test_accept_by_wrong_enclave(self, monitor):
        e1, _ = with_enclave(monitor)
        e2, _ = with_enclave(monitor)
        monitor.block_resource(UNTRUSTED_OS, R1)
        monitor.clean_resource(UNTRUSTED_OS, R1)
        monitor.grant_resource(UNTRUSTED_OS, R1, enclave_domain(e1))
        with pytest.raises(NotOffered):
            monitor.accept_resource(enclave_domain(e2), R1)

    def test_running_core_cannot_be_blocked(self, monitor):
        eid, tid = with_enclave(monitor, init=True)
        monitor.enter_enclave(UNTRUSTED_OS, eid, tid, 0)
        with pytest.raises(WrongState):
            monitor.block_resource(UNTRUSTED_OS, core_resource(0))
        monitor.exit_enclave(enclave_domain(eid), 0)
        monitor.block_resource(UNTRUSTED_OS, core_resource(0))

    def test_scheduled_thread_cannot_be_blocked(self, monitor):
        eid, tid = with_enclave(monitor, init=True)
        monitor.enter_enclave(UNTRUSTED_OS, eid, tid, 0)
        with pytest.raises(WrongState):
            monitor.block_resource(enclave_domain(eid), thread_resource(tid))


class TestPostInitAccept:
    def test_enabled_by_default(self, monitor):
        eid, _ = with_enclave(monitor, init=True)
        monitor.block_resource(UNTRUSTED_OS, R1)
        monitor.clean_resource(UNTRUSTED_OS, R1)
        monitor.grant_resource(UNTRUSTED_OS, R1, enclave_domain(eid))
        monitor.accept_resource(enclave_domain(eid), R1)
        assert monitor.owner_of(R1) == (enclave_domain(eid), "Owned")

    def test_disabled_blocks_post_init_grants(self):
        mon = make_monitor(allow_post_init_accept=False)
        eid, _ = with_enclave(mon, init=True)
        mon.block_resource(UNTRUSTED_OS, R1)
        mon.clean_resource(UNTRUSTED_OS, R1)
        with pytest.raises(WrongState):
            mon.grant_resource(UNTRUSTED_OS, R1, enclave_domain(eid))

    def test_disabled_still_allows_loading_grants(self):
        mon = make_monitor(allow_post_init_accept=False)
        eid, _ = with_enclave(mon)  # still Loading
        mon.block_resource(UNTRUSTED_OS, R1)
        mon.clean_resource(UNTRUSTED_OS, R1)
        mon.grant_resource(UNTRUSTED_OS, R1, enclave_domain(eid))
        mon.accept_resource(enclave_domain(eid), R1)


class TestTransactions:
    def test_concurrent_call_leaves_state_identical(self, monitor):
        before = monitor.state_hash()
        key = monitor._g_res(R1)
        monitor.guards.acquire([key])
        with pytest.raises(ConcurrentCall):
            monitor.block_resource(UNTRUSTED_OS, R1)
        monitor.guards.release([key])
        assert monitor.state_hash() == before
        assert monitor.guards.quiescent()

    def test_failed_calls_never_mutate(self, monitor):
        before = monitor.state_hash()
        for exc, call in [
            (NotOwner, lambda: monitor.block_resource(enclave_domain(0x9000), R1)),
            (WrongState, lambda: monitor.clean_resource(UNTRUSTED_OS, R1)),
            (NoSuchResource, lambda: monitor.owner_of(region_resource(77))),
        ]:
            with pytest.raises(exc):
                call()
            assert monitor.state_hash() == before


class TestIntervalResources:
    def test_define_then_cycle(self):
        from secmon.machine import MachineConfig
        mon = make_monitor(config=MachineConfig.interval())
        eid, _ = with_enclave(mon)
        rid = mon.define_interval(UNTRUSTED_OS, 0x20000, 0x3000)
        assert mon.owner_of(rid) == (UNTRUSTED_OS, "Owned")
        mon.block_resource(UNTRUSTED_OS, rid)
        mon.clean_resource(UNTRUSTED_OS, rid)
        mon.grant_resource(UNTRUSTED_OS, rid, enclave_domain(eid))
        mon.accept_resource(enclave_domain(eid), rid)
        assert mon.machine.backend_owner_of(0x21000) == enclave_domain(eid)

    def test_define_rejected_on_region_backend(self, monitor):
        from secmon.errors import BadArgument
        with pytest.raises(BadArgument):
            monitor.define_interval(UNTRUSTED_OS, 0x20000, 0x3000)
