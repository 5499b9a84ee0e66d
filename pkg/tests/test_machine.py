import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from secmon.errors import AccessDenied, AddressOutOfRange, BadArgument, PageFault
from secmon.machine import (
    Machine,
    MachineConfig,
    PERM_R,
    PERM_W,
    PERM_X,
    SECURITY_MONITOR,
    UNTRUSTED_OS,
    enclave_domain,
    parse_perms,
    perms_text,
)

PAGE = 0x1000


def desk_machine(**kwargs) -> Machine:
    return Machine(MachineConfig.desk(**kwargs))


class TestConfig:
    def test_region_size_mismatch_rejected(self):
        with pytest.raises(ValueError):
            MachineConfig(core_count=1, phys_memory_bytes=0x30000, page_size=PAGE,
                          isolation_backend="region", region_size=0x10000,
                          region_count=2)

    def test_page_must_divide_region(self):
        with pytest.raises(ValueError):
            MachineConfig(core_count=1, phys_memory_bytes=0x9000, page_size=0x2000,
                          isolation_backend="region", region_size=0x9000,
                          region_count=1)

    def test_production_region_constants(self):
        cfg = MachineConfig.production_region()
        assert cfg.region_count == 64
        assert cfg.region_size == 32 * 1024 * 1024
        assert cfg.phys_memory_bytes == 64 * 32 * 1024 * 1024
        machine = Machine(cfg)  # sparse memory: no 2 GiB allocation
        assert len(machine.backend.owners) == 64
        assert machine.backend_owner_of(0) == SECURITY_MONITOR
        assert machine.backend_owner_of(cfg.phys_memory_bytes - 1) == UNTRUSTED_OS

    def test_interval_backend_arbitrary_sizes(self):
        machine = Machine(MachineConfig.interval())
        machine.backend.define(0x20000, 0x7000, enclave_domain(0x1000))
        machine.backend.define(0x30000, PAGE, UNTRUSTED_OS)
        assert machine.backend_owner_of(0x26000) == enclave_domain(0x1000)
        with pytest.raises(BadArgument):
            machine.backend.define(0x20000, 0x1000, UNTRUSTED_OS)  # overlap
        with pytest.raises(BadArgument):
            machine.backend.define(0x40000, 0x800, UNTRUSTED_OS)  # unaligned


class TestCheckAccess:
    def test_monitor_unrestricted(self):
        machine = desk_machine()
        assert machine.check_access(SECURITY_MONITOR, 0x0, "write") == "Allowed"
        assert machine.check_access(SECURITY_MONITOR, 0x70000, "execute") == "Allowed"

    def test_os_denied_on_enclave_memory(self):
        machine = desk_machine()
        machine.backend.set_region_owner(1, enclave_domain(0x1000))
        assert machine.check_access(UNTRUSTED_OS, 0x10000, "read") == "Denied"
        assert machine.check_access(enclave_domain(0x1000), 0x10000, "read") == "Allowed"

    def test_dma_denied_on_monitor_and_enclave_memory(self):
        machine = desk_machine()
        machine.backend.set_region_owner(1, enclave_domain(0x1000))
        assert machine.check_access(UNTRUSTED_OS, 0x0, "dma") == "Denied"
        assert machine.check_access(UNTRUSTED_OS, 0x10000, "dma") == "Denied"
        assert machine.check_access(UNTRUSTED_OS, 0x20000, "dma") == "Allowed"
        with pytest.raises(AccessDenied):
            machine.dma_access(0x10000, 4)

    def test_out_of_range(self):
        machine = desk_machine()
        with pytest.raises(AddressOutOfRange):
            machine.check_access(UNTRUSTED_OS, 0x80000, "read")

    def test_shared_page_reachable_by_enclave(self):
        machine = desk_machine()
        domain = enclave_domain(0x1000)
        machine.shared_with[0x1000] = {0x20}
        assert machine.check_access(domain, 0x20000, "write") == "Allowed"
        assert machine.check_access(domain, 0x21000, "write") == "Denied"


class TestTranslate:
    def _with_enclave(self):
        machine = desk_machine()
        eid = 0x1000
        machine.backend.set_region_owner(1, enclave_domain(eid))
        from secmon.machine import PageTable
        table = PageTable(enclave_domain(eid))
        table.map(0x400, 0x10, PERM_R | PERM_W)  # vaddr 0x400000 -> ppn 0x10
        machine.enclave_tables[eid] = table
        machine.enclave_vranges[eid] = (0x400000, 4 * PAGE)
        machine.cores[0].current_domain = enclave_domain(eid)
        machine.cores[0].current_thread = 0x3000
        return machine, eid

    def test_private_walk_inside_vrange(self):
        machine, _ = self._with_enclave()
        assert machine.translate(0, 0x400008, "read") == 0x10008

    def test_outside_vrange_walks_os_table_into_shared_buffer(self):
        machine, eid = self._with_enclave()
        machine.os_table.map(0x30, 0x30, PERM_R | PERM_W)
        machine.shared_with[eid] = {0x30}
        assert machine.translate(0, 0x30004, "read") == 0x30004

    def test_unmapped_faults(self):
        machine, _ = self._with_enclave()
        with pytest.raises(PageFault):
            machine.translate(0, 0x402000, "read")

    def test_permission_mismatch_faults(self):
        machine, _ = self._with_enclave()
        with pytest.raises(PageFault):
            machine.translate(0, 0x400000, "execute")

    def test_walk_checks_ownership(self):
        machine, eid = self._with_enclave()
        machine.backend.set_region_owner(1, UNTRUSTED_OS)  # behind the table's back
        with pytest.raises(AccessDenied):
            machine.translate(0, 0x400000, "read")

    def test_tlb_hit_bypasses_recheck_until_shootdown(self):
        machine, _ = self._with_enclave()
        assert machine.translate(0, 0x400000, "read") == 0x10000
        machine.backend.set_region_owner(1, UNTRUSTED_OS)
        # cached: still translates without an ownership re-check
        assert machine.translate(0, 0x400000, "read") == 0x10000
        machine.tlb_shootdown(0x10000, 0x10000)
        with pytest.raises(AccessDenied):
            machine.translate(0, 0x400000, "read")


class TestCoreHygiene:
    def test_clean_core_zeroes_and_is_idempotent(self):
        machine = desk_machine()
        core = machine.cores[0]
        core.registers[0] = 5
        core.registers[9] = 9
        core.current_domain = enclave_domain(0x1000)
        core.current_thread = 0x3000
        core.microarch_dirty = True
        machine.clean_core(0)
        assert core.is_factory_fresh()
        snapshot = core.snapshot_token()
        machine.clean_core(0)
        assert core.snapshot_token() == snapshot

    def test_clean_core_evicts_departing_domain_only(self):
        machine = desk_machine()
        dom = enclave_domain(0x1000)
        machine.tlbs[0] = {(1, 1, dom), (2, 2, dom), (3, 3, dom), (9, 9, UNTRUSTED_OS)}
        machine.cores[0].current_domain = dom
        machine.cores[0].current_thread = 0x3000
        machine.clean_core(0)
        assert machine.tlbs[0] == {(9, 9, UNTRUSTED_OS)}

    def test_shootdown_covers_all_cores(self):
        machine = desk_machine()
        dom = UNTRUSTED_OS
        machine.tlbs[0] = {(0x10, 0x10, dom)}
        machine.tlbs[1] = {(0x11, 0x11, dom), (0x30, 0x30, dom)}
        machine.tlb_shootdown(0x10000, 0x10000)
        assert machine.tlbs[0] == set()
        assert machine.tlbs[1] == {(0x30, 0x30, dom)}

    def test_shootdown_empty_range_is_noop(self):
        machine = desk_machine()
        machine.tlbs[0] = {(1, 1, UNTRUSTED_OS)}
        machine.tlb_shootdown(0x10000, 0)
        assert machine.tlbs[0] == {(1, 1, UNTRUSTED_OS)}


class TestMemory:
    def test_sparse_reads_zero(self):
        machine = desk_machine()
        assert machine.memory.read(0x20000, 16) == bytes(16)

    def test_write_read_roundtrip_across_pages(self):
        machine = desk_machine()
        data = bytes(range(64))
        machine.memory.write(0x20FF0, data)
        assert machine.memory.read(0x20FF0, 64) == data

    def test_zero_range_drops_pages(self):
        machine = desk_machine()
        machine.memory.write(0x20000, b"\xff" * PAGE)
        machine.memory.zero_range(0x20000, PAGE)
        assert machine.memory.page_is_zero(0x20)
        assert list(machine.memory.nonzero_pages()) == []

    def test_phys_access_respects_ownership(self):
        machine = desk_machine()
        with pytest.raises(AccessDenied):
            machine.phys_write(UNTRUSTED_OS, 0x0, b"x")
        machine.phys_write(UNTRUSTED_OS, 0x20000, b"x")
        assert machine.phys_read(UNTRUSTED_OS, 0x20000, 1) == b"x"


def test_perms_text_roundtrip():
    for mask in range(8):
        assert parse_perms(perms_text(mask)) == mask
    assert parse_perms("rwx") == PERM_R | PERM_W | PERM_X
    with pytest.raises(BadArgument):
        parse_perms("rq")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=7), min_size=8, max_size=8))
def test_region_ownership_partitions_memory(owner_codes):
    machine = desk_machine()
    domains = [SECURITY_MONITOR, UNTRUSTED_OS] + [
        enclave_domain(0x1000 + i * 0x1000) for i in range(6)]
    for region, code in enumerate(owner_codes):
        if region == 0:
            continue
        machine.backend.set_region_owner(region, domains[code])
    for page_number in range(machine.config.page_count):
        owner = machine.backend_owner_of(page_number * PAGE)
        assert owner in domains
