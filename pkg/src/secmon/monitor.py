"""The security monitor: enclave/thread lifecycles, resource transitions,
event dispatch, measurement, and mailbox APIs over one abstract machine.

The monitor verifies the untrusted OS's resource-management decisions; it
makes none of its own. Every API call is a transaction: guards for all
touched records are acquired up front in canonical order (all-or-nothing,
failing with ConcurrentCall), validation happens before any mutation, and a
failed call leaves state bit-identical.

`disabled_checks` is a fault-injection hook for mutation-testing the
exhaustive checker: each name disables one internal enforcement point so the
corresponding invariant violation becomes reachable. It is test-only and
documented in the README.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

from . import crypto
from .attestation import (
    MAILBOX_MESSAGE_BYTES,
    Mailbox,
    MailboxState,
    SM_MAIL_SENDER,
    SM_SENDER_MEASUREMENT,
)
from .codec import canon, digest
from .errors import (
    AliasViolation,
    BadAddress,
    BadArgument,
    CoreBusy,
    Empty,
    MessageTooLarge,
    NoSuchEnclave,
    NoSuchField,
    NoSuchMailbox,
    NoSuchDomain,
    NotAccepting,
    NotEnclave,
    NotInEnclave,
    NotOffered,
    NotOS,
    NotOwner,
    NotSigningEnclave,
    NoThreads,
    OrderViolation,
    OutOfEnclaveMemory,
    SmError,
    ThreadBusy,
    ThreadsScheduled,
    WrongState,
)
from .machine import (
    Machine,
    MachineConfig,
    PERM_R,
    PERM_W,
    PageTable,
    ProtectionDomain,
    SECURITY_MONITOR,
    UNTRUSTED_OS,
    enclave_domain,
)
from .resources import (
    GuardTable,
    ResourceId,
    ResourceKind,
    ResourceRecord,
    ResourceState,
    ResourceTable,
    core_resource,
    interval_resource,
    mailbox_resource,
    region_resource,
    thread_resource,
)

ENCLAVE_SLOT_BYTES = 0x1000
THREAD_SLOT_BYTES = 0x400
SLOT_ALIGN = 0x400
MAX_MAILBOXES = 4

REGISTER_FILE_BYTES = 32 * 8
ZERO_REGISTER_FILE = bytes(REGISTER_FILE_BYTES)

DEFAULT_SM_IMAGE = b"security monitor reference build 1"

# fault-handler table keys (subset of machine events an enclave may service)
FAULT_PAGE = 1
FAULT_GENERIC = 2
HANDLER_KINDS = {"pagefault": FAULT_PAGE, "fault": FAULT_GENERIC}

KNOWN_CHECKS = frozenset({
    "clean_skips_zero",
    "skips_tlb_shootdown",
    "clean_skips_state_check",
    "block_skips_owner_check",
    "init_skips_seal",
    "enter_skips_thread_busy",
    "aex_skips_register_clean",
    "aex_skips_state_save",
    "send_skips_accept_check",
    "send_forges_measurement",
    "key_skips_measurement_check",
})


class EnclaveState(Enum):
    LOADING = "Loading"
    INITIALIZED = "Initialized"
    DELETED = "Deleted"


class ThreadState(Enum):
    CREATED = "Created"
    ASSIGNED = "Assigned"
    SCHEDULED = "Scheduled"
    BLOCKED = "Blocked"


class EventKind(Enum):
    SM_API_CALL = "SmApiCall"
    INTERRUPT = "Interrupt"
    PAGE_FAULT = "PageFault"
    ENCLAVE_FAULT = "EnclaveFault"
    EXIT = "Exit"


@dataclass(frozen=True)
class MachineEvent:
    kind: EventKind
    payload: tuple = ()


@dataclass(frozen=True)
class Disposition:
    """Outcome of handle_event: dispatched API result, delegation to the OS
    (with or without a forced async exit), or an in-enclave fault handler."""

    kind: str  # "api" | "delegated" | "handler"
    aex: bool = False
    handler_vaddr: Optional[int] = None
    api: Optional[str] = None
    result: Any = None
    error: Optional[str] = None


@dataclass(frozen=True)
class EntryContext:
    """What the entering thread observes: where it starts and whether a prior
    async exit left saved state behind."""

    entry_point: int
    aex_present: bool


@dataclass
class EnclaveMetadata:
    """Per-enclave monitor metadata; the eid is this structure's physical
    address inside monitor-owned memory."""

    eid: int
    state: EnclaveState
    virt_base: int
    virt_length: int
    measurement: crypto.MeasurementState
    final_measurement: Optional[bytes] = None
    owned: set[ResourceId] = field(default_factory=set)
    threads: set[int] = field(default_factory=set)
    mailboxes: list[Mailbox] = field(default_factory=list)
    load_cursor: int = -1          # highest consumed physical page number
    data_loaded: bool = False
    consumed_pages: list[int] = field(default_factory=list)
    page_table_pages: list[int] = field(default_factory=list)
    shared_pages: set[int] = field(default_factory=set)
    dead_pending: set[ResourceId] = field(default_factory=set)

    def contains_vaddr(self, vaddr: int) -> bool:
        return self.virt_base <= vaddr < self.virt_base + self.virt_length

    def snapshot_token(self):
        return (
            self.eid, self.state.value, self.virt_base, self.virt_length,
            self.measurement.current_digest(), self.measurement.finalized,
            self.final_measurement,
            tuple(sorted(r.token() for r in self.owned)),
            tuple(sorted(self.threads)),
            tuple(m.snapshot_token() for m in self.mailboxes),
            self.load_cursor, self.data_loaded,
            tuple(self.consumed_pages), tuple(self.page_table_pages),
            tuple(sorted(self.shared_pages)),
            tuple(sorted(r.token() for r in self.dead_pending)),
        )

    def clone(self) -> "EnclaveMetadata":
        return EnclaveMetadata(
            self.eid, self.state, self.virt_base, self.virt_length,
            self.measurement.copy(), self.final_measurement,
            set(self.owned), set(self.threads),
            [m.clone() for m in self.mailboxes],
            self.load_cursor, self.data_loaded,
            list(self.consumed_pages), list(self.page_table_pages),
            set(self.shared_pages), set(self.dead_pending),
        )


@dataclass
class ThreadMetadata:
    """Per-thread monitor metadata; tid is the structure's physical address.
    aex_state/fault_state are register-file images saved by the monitor."""

    tid: int
    owner: Optional[int]
    state: ThreadState
    core: Optional[int] = None
    entry_point: int = 0
    fault_handlers: dict[int, int] = field(default_factory=dict)
    aex_present: bool = False
    aex_state: bytes = ZERO_REGISTER_FILE
    fault_state: bytes = ZERO_REGISTER_FILE
    in_fault_handler: bool = False
    # checker ghost: register file actually present at the last async exit
    aex_shadow: bytes = ZERO_REGISTER_FILE

    def snapshot_token(self):
        return (
            self.tid, self.owner, self.state.value, self.core,
            self.entry_point,
            tuple(sorted(self.fault_handlers.items())),
            self.aex_present, self.aex_state, self.fault_state,
            self.in_fault_handler, self.aex_shadow,
        )

    def clone(self) -> "ThreadMetadata":
        return ThreadMetadata(
            self.tid, self.owner, self.state, self.core, self.entry_point,
            dict(self.fault_handlers), self.aex_present, self.aex_state,
            self.fault_state, self.in_fault_handler, self.aex_shadow,
        )


class SecurityMonitor:
    """Reference monitor over one machine instance.

    The constructor boots the machine: the lowest region (or the reserved
    interval) belongs to the monitor, everything else to the untrusted OS,
    and one resource record exists per core and per region/interval.
    """

    def __init__(self, config: MachineConfig,
                 device: Optional[crypto.DeviceIdentity] = None,
                 sm_image: bytes = DEFAULT_SM_IMAGE,
                 signing_measurement: Optional[bytes] = None,
                 entropy: Optional[crypto.EntropySource] = None,
                 allow_post_init_accept: bool = True,
                 disabled_checks: frozenset[str] | set[str] = frozenset()):
        unknown = set(disabled_checks) - KNOWN_CHECKS
        if unknown:
            raise ValueError(f"unknown disabled checks: {sorted(unknown)}")
        self.config = config
        self.machine = Machine(config)
        self.entropy = entropy or crypto.EntropySource()
        self.device = device or crypto.DeviceIdentity.generate(self.entropy)
        self.identity = crypto.derive_sm_identity(self.device, sm_image)
        self.signing_measurement = signing_measurement or crypto.sha3(b"signing-enclave-unset")
        self.allow_post_init_accept = allow_post_init_accept
        self.disabled = frozenset(disabled_checks)

        self.resources = ResourceTable()
        self.guards = GuardTable()
        self.enclaves: dict[int, EnclaveMetadata] = {}
        self.threads: dict[int, ThreadMetadata] = {}
        # live metadata extents inside monitor memory: base -> (size, kind)
        self._extents: dict[int, tuple[int, str]] = {}
        self.step_hook: Optional[Callable[[str], None]] = None

        for core_id in range(config.core_count):
            self.resources.add(ResourceRecord(core_resource(core_id), UNTRUSTED_OS))
        if config.isolation_backend == "region":
            self.resources.add(ResourceRecord(region_resource(0), SECURITY_MONITOR))
            for region in range(1, config.region_count):
                self.resources.add(ResourceRecord(region_resource(region), UNTRUSTED_OS))
        else:
            self.resources.add(ResourceRecord(
                interval_resource(0, config.monitor_reserve), SECURITY_MONITOR))

    # ------------------------------------------------------------ plumbing

    def _check_disabled(self, name: str) -> bool:
        return name in self.disabled

    @contextmanager
    def _transaction(self, name: str, guards):
        held = self.guards.acquire(guards)
        try:
            if self.step_hook is not None:
                self.step_hook(name)
            yield
        finally:
            self.guards.release(held)

    @staticmethod
    def _g_res(rid: ResourceId) -> tuple:
        return ("res",) + rid.token()

    @staticmethod
    def _g_enclave(eid: int) -> tuple:
        return ("enclave", eid)

    @staticmethod
    def _g_thread(tid: int) -> tuple:
        return ("thread", tid)

    _G_ARENA = ("arena",)

    def _live_enclave(self, eid: int) -> EnclaveMetadata:
        enc = self.enclaves.get(eid)
        if enc is None or enc.state is EnclaveState.DELETED:
            raise NoSuchEnclave(f"no live enclave 0x{eid:x}")
        return enc

    def _require_os(self, caller: ProtectionDomain) -> None:
        if caller != UNTRUSTED_OS:
            raise NotOS(f"{caller} is not the untrusted OS")

    def _require_running_enclave(self, caller: ProtectionDomain) -> EnclaveMetadata:
        if not caller.is_enclave:
            raise NotEnclave(f"{caller} is not an enclave")
        enc = self._live_enclave(caller.eid)
        if enc.state is not EnclaveState.INITIALIZED:
            raise WrongState("enclave is not initialized")
        return enc

    # -------------------------------------------------- metadata memory

    @property
    def metadata_base(self) -> int:
        # first monitor page is reserved for monitor globals
        return self.config.page_size

    @property
    def metadata_limit(self) -> int:
        return self.config.monitor_reserve

    def _slot_bytes(self, kind: str) -> int:
        return ENCLAVE_SLOT_BYTES if kind == "enclave" else THREAD_SLOT_BYTES

    def _validate_slot(self, base: int, kind: str) -> None:
        size = self._slot_bytes(kind)
        if base % SLOT_ALIGN:
            raise BadAddress(f"metadata slot 0x{base:x} misaligned")
        if base < self.metadata_base or base + size > self.metadata_limit:
            raise BadAddress(f"metadata slot 0x{base:x} outside monitor memory")
        if self.machine.backend_owner_of(base) != SECURITY_MONITOR:
            raise BadAddress("metadata slot not in monitor-owned memory")
        for ext_base, (ext_size, _) in self._extents.items():
            if base < ext_base + ext_size and ext_base < base + size:
                raise BadAddress(f"metadata slot 0x{base:x} overlaps a live structure")

    def free_metadata_slot(self, kind: str = "enclave") -> int:
        """First free slot address for the harness's `auto` eid/tid choice."""
        size = self._slot_bytes(kind)
        base = self.metadata_base
        while base + size <= self.metadata_limit:
            try:
                self._validate_slot(base, kind)
                return base
            except BadAddress:
                base += SLOT_ALIGN
        raise OutOfEnclaveMemory("monitor metadata memory exhausted")

    # ------------------------------------------------------ resource API

    def owner_of(self, rid: ResourceId) -> tuple[ProtectionDomain, str]:
        record = self.resources.get(rid)
        return record.owner, record.state.value

    def block_resource(self, caller: ProtectionDomain, rid: ResourceId) -> None:
        with self._transaction("block_resource", [self._g_res(rid)]):
            record = self.resources.get(rid)
            if rid.kind is ResourceKind.MAILBOX:
                raise WrongState("mailbox slots are managed with their enclave")
            if record.owner != caller and not self._check_disabled("block_skips_owner_check"):
                raise NotOwner(f"{caller} does not own {rid}")
            if record.state is not ResourceState.OWNED:
                raise WrongState(f"{rid} is {record.state.value}, not Owned")
            if rid.kind is ResourceKind.CORE:
                if self.machine.cores[rid.rid].current_thread is not None:
                    raise WrongState("core is in active use; force an exit first")
            if rid.kind is ResourceKind.THREAD:
                thread = self.threads[rid.rid]
                if thread.state is ThreadState.SCHEDULED:
                    raise WrongState("thread is scheduled")
                thread.state = ThreadState.BLOCKED
            record.state = ResourceState.BLOCKED

    def clean_resource(self, caller: ProtectionDomain, rid: ResourceId) -> None:
        guards = [self._g_res(rid)]
        record_peek = self.resources.maybe(rid)
        if record_peek is not None and record_peek.owner.is_enclave:
            guards.append(self._g_enclave(record_peek.owner.eid))
        if rid.kind is ResourceKind.THREAD:
            guards.append(self._g_thread(rid.rid))
        with self._transaction("clean_resource", guards):
            self._require_os(caller)
            record = self.resources.get(rid)
            if (record.state is not ResourceState.BLOCKED
                    and not self._check_disabled("clean_skips_state_check")):
                raise WrongState(f"{rid} is {record.state.value}, not Blocked")
            prior_owner = record.owner
            self._scrub(rid)
            record.state = ResourceState.CLEAN
            record.owner = UNTRUSTED_OS
            record.offered_to = None
            if prior_owner.is_enclave:
                enc = self.enclaves.get(prior_owner.eid)
                if enc is not None:
                    enc.owned.discard(rid)
                    self._maybe_reclaim(enc)

    def _scrub(self, rid: ResourceId) -> None:
        if rid.kind in (ResourceKind.REGION, ResourceKind.INTERVAL):
            if rid.kind is ResourceKind.REGION:
                base, length = self.machine.backend.region_span(rid.rid)
                self.machine.backend.set_region_owner(rid.rid, UNTRUSTED_OS)
            else:
                base, length = rid.rid
                self.machine.backend.set_interval_owner(base, length, UNTRUSTED_OS)
            if not self._check_disabled("clean_skips_zero"):
                self.machine.memory.zero_range(base, length)
            if not self._check_disabled("skips_tlb_shootdown"):
                self.machine.tlb_shootdown(base, length)
        elif rid.kind is ResourceKind.CORE:
            self.machine.clean_core(rid.rid)
        elif rid.kind is ResourceKind.THREAD:
            thread = self.threads[rid.rid]
            prior = self.enclaves.get(thread.owner) if thread.owner is not None else None
            if prior is not None:
                prior.threads.discard(rid.rid)
            thread.owner = None
            thread.state = ThreadState.CREATED
            thread.core = None
            thread.entry_point = 0
            thread.fault_handlers = {}
            thread.in_fault_handler = False
            thread.aex_present = False
            if not self._check_disabled("clean_skips_zero"):
                thread.aex_state = ZERO_REGISTER_FILE
                thread.fault_state = ZERO_REGISTER_FILE
                thread.aex_shadow = ZERO_REGISTER_FILE
        elif rid.kind is ResourceKind.MAILBOX:
            eid, index = rid.rid
            enc = self.enclaves.get(eid)
            if enc is not None and index < len(enc.mailboxes):
                enc.mailboxes[index] = Mailbox()

    def grant_resource(self, caller: ProtectionDomain, rid: ResourceId,
                       to: ProtectionDomain) -> None:
        guards = [self._g_res(rid)]
        if to.is_enclave:
            guards.append(self._g_enclave(to.eid))
        with self._transaction("grant_resource", guards):
            self._require_os(caller)
            record = self.resources.get(rid)
            if rid.kind is ResourceKind.MAILBOX:
                raise WrongState("mailbox slots are managed with their enclave")
            if record.state is not ResourceState.CLEAN:
                raise WrongState(f"{rid} is {record.state.value}, not Clean")
            if not to.is_enclave:
                raise NoSuchDomain(f"cannot offer {rid} to {to}")
            enc = self.enclaves.get(to.eid)
            if enc is None or enc.state is EnclaveState.DELETED:
                raise NoSuchDomain(f"no live enclave 0x{to.eid:x}")
            if enc.state is EnclaveState.INITIALIZED and not self.allow_post_init_accept:
                raise WrongState("post-init grants are disabled")
            record.state = ResourceState.OFFERED
            record.offered_to = to

    def accept_resource(self, caller: ProtectionDomain, rid: ResourceId) -> None:
        guards = [self._g_res(rid)]
        if caller.is_enclave:
            guards.append(self._g_enclave(caller.eid))
        if rid.kind is ResourceKind.THREAD:
            guards.append(self._g_thread(rid.rid))
        with self._transaction("accept_resource", guards):
            record = self.resources.get(rid)
            if record.state is not ResourceState.OFFERED or record.offered_to != caller:
                raise NotOffered(f"{rid} is not offered to {caller}")
            if not caller.is_enclave:
                raise NotOffered(f"{rid} is not offered to {caller}")
            enc = self.enclaves.get(caller.eid)
            if enc is None or enc.state is EnclaveState.DELETED:
                raise NoSuchDomain(f"no live enclave 0x{caller.eid:x}")
            if enc.state is EnclaveState.INITIALIZED and not self.allow_post_init_accept:
                raise WrongState("post-init accepts are disabled")
            if rid.kind is ResourceKind.REGION:
                base, length = self.machine.backend.region_span(rid.rid)
                self.machine.backend.set_region_owner(rid.rid, caller)
                # re-allocation to a new domain: cached translations the OS
                # made while it owned the memory must not survive
                if not self._check_disabled("skips_tlb_shootdown"):
                    self.machine.tlb_shootdown(base, length)
            elif rid.kind is ResourceKind.INTERVAL:
                base, length = rid.rid
                self.machine.backend.set_interval_owner(base, length, caller)
                if not self._check_disabled("skips_tlb_shootdown"):
                    self.machine.tlb_shootdown(base, length)
            elif rid.kind is ResourceKind.THREAD:
                thread = self.threads[rid.rid]
                thread.owner = caller.eid
                thread.state = ThreadState.ASSIGNED
                enc.threads.add(rid.rid)
            record.owner = caller
            record.state = ResourceState.OWNED
            record.offered_to = None
            enc.owned.add(rid)

    def define_interval(self, caller: ProtectionDomain, base: int, length: int) -> ResourceId:
        """Carve a page-aligned OS-owned interval into a managed resource
        (interval backend only); dynamic-resource plumbing."""
        rid = interval_resource(base, length)
        with self._transaction("define_interval", [self._g_res(rid)]):
            self._require_os(caller)
            if self.config.isolation_backend != "interval":
                raise BadArgument("define_interval requires the interval backend")
            if rid in self.resources:
                raise BadArgument("interval already defined")
            self.machine.backend.define(base, length, UNTRUSTED_OS)
            self.resources.add(ResourceRecord(rid, UNTRUSTED_OS))
        return rid

    # ------------------------------------------------------- enclave API

    def create_enclave(self, caller: ProtectionDomain, eid: int,
                       virt_base: int, virt_length: int,
                       mailbox_count: int = 1) -> None:
        with self._transaction("create_enclave",
                               [self._G_ARENA, self._g_enclave(eid)]):
            self._require_os(caller)
            page = self.config.page_size
            if virt_base % page or virt_length <= 0 or virt_length % page:
                raise BadArgument("virtual range must be page-aligned and non-empty")
            if not 0 <= mailbox_count <= MAX_MAILBOXES:
                raise BadArgument(f"mailbox count must be 0..{MAX_MAILBOXES}")
            if eid in self.enclaves:
                raise BadAddress(f"eid 0x{eid:x} already in use")
            self._validate_slot(eid, "enclave")

            measurement = crypto.MeasurementState()
            measurement.extend(crypto.create_record(
                self.identity.image_hash, self.config.platform_caps(),
                virt_base, virt_length, mailbox_count))
            enc = EnclaveMetadata(eid=eid, state=EnclaveState.LOADING,
                                  virt_base=virt_base, virt_length=virt_length,
                                  measurement=measurement,
                                  mailboxes=[Mailbox() for _ in range(mailbox_count)])
            self._extents[eid] = (ENCLAVE_SLOT_BYTES, "enclave")
            self.enclaves[eid] = enc
            domain = enclave_domain(eid)
            for index in range(mailbox_count):
                rid = mailbox_resource(eid, index)
                self.resources.add(ResourceRecord(rid, domain))
                enc.owned.add(rid)
            self.machine.enclave_tables[eid] = PageTable(domain)
            self.machine.enclave_vranges[eid] = (virt_base, virt_length)
            self.machine.shared_with[eid] = enc.shared_pages

    def _owned_memory_pages(self, enc: EnclaveMetadata) -> list[int]:
        """Physical page numbers of the enclave's memory, ascending."""
        pages: list[int] = []
        page = self.config.page_size
        for rid in enc.owned:
            if rid.kind is ResourceKind.REGION:
                base, length = self.machine.backend.region_span(rid.rid)
            elif rid.kind is ResourceKind.INTERVAL:
                base, length = rid.rid
            else:
                continue
            pages.extend(range(base // page, (base + length) // page))
        return sorted(pages)

    def _next_enclave_page(self, enc: EnclaveMetadata) -> int:
        consumed = set(enc.consumed_pages)
        for ppn in self._owned_memory_pages(enc):
            if ppn not in consumed:
                return ppn
        raise OutOfEnclaveMemory(f"enclave 0x{enc.eid:x} has no unconsumed memory",
                                 rule="memory")

    def _require_loading(self, enc: EnclaveMetadata) -> None:
        # "init_skips_seal" is the fault injection that leaves loading APIs
        # usable after the enclave was sealed
        if enc.state is not EnclaveState.LOADING:
            if self._check_disabled("init_skips_seal"):
                return
            raise WrongState("enclave is sealed")

    def allocate_page_table(self, caller: ProtectionDomain, eid: int, vaddr: int) -> None:
        with self._transaction("allocate_page_table", [self._g_enclave(eid)]):
            self._require_os(caller)
            enc = self._live_enclave(eid)
            self._require_loading(enc)
            if enc.data_loaded:
                raise OrderViolation("page tables must precede data",
                                     rule="data-before-tables")
            ppn = self._next_enclave_page(enc)
            if ppn <= enc.load_cursor:
                raise OrderViolation(
                    f"page {ppn} not above load cursor {enc.load_cursor}", rule="order")
            enc.consumed_pages.append(ppn)
            enc.page_table_pages.append(ppn)
            enc.load_cursor = ppn
            if not enc.measurement.finalized:
                enc.measurement.extend(crypto.page_table_record(vaddr))

    def load_page(self, caller: ProtectionDomain, eid: int, vaddr: int,
                  source: int, perms: int) -> None:
        with self._transaction("load_page", [self._g_enclave(eid)]):
            self._require_os(caller)
            enc = self._live_enclave(eid)
            self._require_loading(enc)
            page = self.config.page_size
            if vaddr % page or not enc.contains_vaddr(vaddr):
                raise BadArgument(f"vaddr 0x{vaddr:x} not a page inside the virtual range")
            if not 0 <= perms <= 7 or not perms:
                raise BadArgument("perms must be a non-empty rwx mask")
            if source % page:
                raise BadArgument("source must be page-aligned")
            self.machine.memory.check_range(source, page)
            if not self.machine.access_allowed(UNTRUSTED_OS, source, "read"):
                raise BadArgument("source page is not OS-readable")
            vpn = vaddr // page
            if self.machine.enclave_tables[eid].lookup(vpn) is not None:
                raise AliasViolation(f"vaddr 0x{vaddr:x} already mapped", rule="alias")
            ppn = self._next_enclave_page(enc)
            if ppn <= enc.load_cursor:
                raise OrderViolation(
                    f"page {ppn} not above load cursor {enc.load_cursor}", rule="order")

            content = self.machine.memory.read(source, page)
            self.machine.memory.write(ppn * page, content)
            self.machine.enclave_tables[eid].map(vpn, ppn, perms)
            enc.consumed_pages.append(ppn)
            enc.load_cursor = ppn
            enc.data_loaded = True
            if not enc.measurement.finalized:
                enc.measurement.extend(crypto.load_page_record(vaddr, perms, content))

    def register_shared_page(self, caller: ProtectionDomain, eid: int,
                             vpn: int, ppn: int) -> None:
        """Register an OS-owned buffer page as shared with a loading enclave
        and map it in the OS table (accesses outside the enclave's virtual
        range walk that table)."""
        with self._transaction("register_shared_page", [self._g_enclave(eid)]):
            self._require_os(caller)
            enc = self._live_enclave(eid)
            self._require_loading(enc)
            page = self.config.page_size
            paddr = ppn * page
            self.machine.memory.check_range(paddr, page)
            if self.machine.backend_owner_of(paddr) != UNTRUSTED_OS:
                raise BadArgument("shared pages must be OS-owned buffers")
            if enc.contains_vaddr(vpn * page):
                raise BadArgument("shared pages live outside the enclave virtual range")
            enc.shared_pages.add(ppn)
            self.machine.shared_with[eid] = enc.shared_pages
            self.machine.os_table.map(vpn, ppn, PERM_R | PERM_W)

    def create_thread(self, caller: ProtectionDomain, eid: int, tid: int,
                      entry_point: int,
                      fault_handlers: Optional[dict[int, int]] = None) -> None:
        fault_handlers = dict(fault_handlers or {})
        with self._transaction("create_thread",
                               [self._G_ARENA, self._g_enclave(eid), self._g_thread(tid)]):
            self._require_os(caller)
            enc = self._live_enclave(eid)
            self._require_loading(enc)
            if tid in self.threads:
                raise BadAddress(f"tid 0x{tid:x} already in use")
            self._validate_slot(tid, "thread")
            if not enc.contains_vaddr(entry_point):
                raise BadArgument("entry point outside the enclave virtual range")
            for kind, handler in fault_handlers.items():
                if kind not in (FAULT_PAGE, FAULT_GENERIC):
                    raise BadArgument(f"unknown fault kind {kind}")
                if not enc.contains_vaddr(handler):
                    raise BadArgument("fault handler outside the enclave virtual range")

            self._extents[tid] = (THREAD_SLOT_BYTES, "thread")
            self.threads[tid] = ThreadMetadata(
                tid=tid, owner=eid, state=ThreadState.ASSIGNED,
                entry_point=entry_point, fault_handlers=fault_handlers)
            rid = thread_resource(tid)
            self.resources.add(ResourceRecord(rid, enclave_domain(eid)))
            enc.owned.add(rid)
            enc.threads.add(tid)
            if not enc.measurement.finalized:
                enc.measurement.extend(
                    crypto.create_thread_record(entry_point, fault_handlers))

    def init_enclave(self, caller: ProtectionDomain, eid: int) -> bytes:
        with self._transaction("init_enclave", [self._g_enclave(eid)]):
            self._require_os(caller)
            enc = self._live_enclave(eid)
            if enc.state is not EnclaveState.LOADING:
                raise WrongState("enclave is not loading")
            if not enc.threads:
                raise NoThreads("an enclave needs at least one thread to seal")
            enc.final_measurement = enc.measurement.finalize()
            enc.state = EnclaveState.INITIALIZED
            return enc.final_measurement

    def enter_enclave(self, caller: ProtectionDomain, eid: int, tid: int,
                      core_id: int) -> EntryContext:
        with self._transaction("enter_enclave",
                               [self._g_enclave(eid), self._g_thread(tid),
                                self._g_res(core_resource(core_id))]):
            self._require_os(caller)
            enc = self._live_enclave(eid)
            if enc.state is not EnclaveState.INITIALIZED:
                raise WrongState("enclave is not initialized")
            thread = self.threads.get(tid)
            if thread is None or thread.owner != eid:
                raise BadArgument(f"thread 0x{tid:x} is not assigned to enclave 0x{eid:x}")
            if thread.state is ThreadState.SCHEDULED:
                if not self._check_disabled("enter_skips_thread_busy"):
                    raise ThreadBusy(f"thread 0x{tid:x} already scheduled")
            elif thread.state is not ThreadState.ASSIGNED:
                raise WrongState(f"thread is {thread.state.value}")
            if not 0 <= core_id < self.config.core_count:
                raise BadArgument(f"no core {core_id}")
            core = self.machine.cores[core_id]
            if core.current_domain != UNTRUSTED_OS or core.current_thread is not None:
                raise CoreBusy(f"core {core_id} is not idle in OS context")
            core_rec = self.resources.get(core_resource(core_id))
            if core_rec.state is not ResourceState.OWNED or core_rec.owner not in (
                    UNTRUSTED_OS, enclave_domain(eid)):
                raise CoreBusy(f"core {core_id} is not available for scheduling")

            self.machine.clean_core(core_id)
            core.current_domain = enclave_domain(eid)
            core.current_thread = tid
            core.microarch_dirty = True
            thread.state = ThreadState.SCHEDULED
            thread.core = core_id
            thread.in_fault_handler = False
            return EntryContext(thread.entry_point, thread.aex_present)

    def _running_thread(self, core_id: int) -> ThreadMetadata:
        core = self.machine.cores[core_id]
        if not core.current_domain.is_enclave or core.current_thread is None:
            raise NotInEnclave(f"core {core_id} is not running an enclave thread")
        return self.threads[core.current_thread]

    def exit_enclave(self, caller: ProtectionDomain, core_id: int) -> None:
        if not 0 <= core_id < self.config.core_count:
            raise BadArgument(f"no core {core_id}")
        peek = self.machine.cores[core_id].current_thread
        guards = [self._g_res(core_resource(core_id))]
        if peek is not None:
            guards.append(self._g_thread(peek))
        with self._transaction("exit_enclave", guards):
            thread = self._running_thread(core_id)
            core = self.machine.cores[core_id]
            if caller != core.current_domain:
                raise NotInEnclave(f"{caller} is not running on core {core_id}")
            thread.state = ThreadState.ASSIGNED
            thread.core = None
            thread.aex_present = False
            thread.aex_state = ZERO_REGISTER_FILE
            thread.aex_shadow = ZERO_REGISTER_FILE
            thread.in_fault_handler = False
            self.machine.clean_core(core_id)

    def aex(self, core_id: int, cause: str = "interrupt") -> None:
        """Asynchronous enclave exit: save the register file into the thread's
        reserved slot, flag it, detach the thread, and clean the core."""
        if not 0 <= core_id < self.config.core_count:
            raise BadArgument(f"no core {core_id}")
        peek = self.machine.cores[core_id].current_thread
        guards = [self._g_res(core_resource(core_id))]
        if peek is not None:
            guards.append(self._g_thread(peek))
        with self._transaction("aex", guards):
            thread = self._running_thread(core_id)
            core = self.machine.cores[core_id]
            registers = core.register_bytes()
            thread.aex_shadow = registers
            if not self._check_disabled("aex_skips_state_save"):
                thread.aex_state = registers
            thread.aex_present = True
            thread.state = ThreadState.ASSIGNED
            thread.core = None
            thread.in_fault_handler = False
            if self._check_disabled("aex_skips_register_clean"):
                saved = list(core.registers)
                self.machine.clean_core(core_id)
                core.registers = saved
                core.microarch_dirty = True
            else:
                self.machine.clean_core(core_id)

    def handle_event(self, core_id: int, event: MachineEvent) -> Disposition:
        """Event dispatch: API calls trap into the monitor; interrupts force
        an async exit before OS delegation; faults go to a registered enclave
        handler when one exists, else exit-and-delegate."""
        if not 0 <= core_id < self.config.core_count:
            raise BadArgument(f"no core {core_id}")
        core = self.machine.cores[core_id]

        if event.kind is EventKind.SM_API_CALL:
            api, kwargs = event.payload
            return self._dispatch_api(core_id, api, dict(kwargs))

        if event.kind is EventKind.EXIT:
            return self._dispatch_api(core_id, "exit_enclave", {})

        if event.kind is EventKind.INTERRUPT:
            if core.current_domain.is_enclave:
                self.aex(core_id, "interrupt")
                return Disposition(kind="delegated", aex=True)
            return Disposition(kind="delegated", aex=False)

        if event.kind in (EventKind.PAGE_FAULT, EventKind.ENCLAVE_FAULT):
            fault_kind = FAULT_PAGE if event.kind is EventKind.PAGE_FAULT else FAULT_GENERIC
            if not core.current_domain.is_enclave:
                return Disposition(kind="delegated", aex=False)
            dispatched = None
            with self._transaction("handle_fault",
                                   [self._g_res(core_resource(core_id)),
                                    self._g_thread(core.current_thread)]):
                thread = self.threads[core.current_thread]
                handler = thread.fault_handlers.get(fault_kind)
                if handler is not None and not thread.in_fault_handler:
                    thread.fault_state = core.register_bytes()
                    thread.in_fault_handler = True
                    dispatched = handler
            if dispatched is not None:
                return Disposition(kind="handler", handler_vaddr=dispatched)
            self.aex(core_id, "fault")
            return Disposition(kind="delegated", aex=True)

        raise BadArgument(f"unknown event kind {event.kind}")

    _API_FROM_EVENT = frozenset({
        "block_resource", "clean_resource", "grant_resource", "accept_resource",
        "create_enclave", "allocate_page_table", "load_page", "create_thread",
        "init_enclave", "enter_enclave", "exit_enclave", "delete_enclave",
        "accept_thread", "accept_mail", "send_mail", "get_mail",
        "get_attestation_key", "get_field", "register_shared_page",
        "define_interval", "owner_of",
    })

    def _dispatch_api(self, core_id: int, api: str, kwargs: dict) -> Disposition:
        if api not in self._API_FROM_EVENT:
            return Disposition(kind="api", api=api, error=BadArgument.code)
        caller = self.machine.cores[core_id].current_domain
        method = getattr(self, api)
        if api == "exit_enclave":
            kwargs["core_id"] = core_id
        if api not in ("get_field", "owner_of"):
            kwargs["caller"] = caller
        try:
            result = method(**kwargs)
        except SmError as err:
            return Disposition(kind="api", api=api, error=err.code)
        return Disposition(kind="api", api=api, result=result)

    def delete_enclave(self, caller: ProtectionDomain, eid: int) -> None:
        enc_peek = self.enclaves.get(eid)
        guards = [self._g_enclave(eid)]
        if enc_peek is not None:
            guards += [self._g_res(r) for r in enc_peek.owned]
            guards += [self._g_thread(t) for t in enc_peek.threads]
        with self._transaction("delete_enclave", guards):
            self._require_os(caller)
            enc = self._live_enclave(eid)
            for tid in enc.threads:
                if self.threads[tid].state is ThreadState.SCHEDULED:
                    raise ThreadsScheduled(f"thread 0x{tid:x} is scheduled")
            for rid in sorted(enc.owned, key=lambda r: r.sort_key()):
                record = self.resources.get(rid)
                record.state = ResourceState.BLOCKED
                if rid.kind is ResourceKind.THREAD:
                    self.threads[rid.rid].state = ThreadState.BLOCKED
            enc.dead_pending = set(enc.owned)
            enc.state = EnclaveState.DELETED
            self._maybe_reclaim(enc)

    def _maybe_reclaim(self, enc: EnclaveMetadata) -> None:
        """Free a deleted enclave's metadata slot once every formerly-owned
        resource has been cleaned; embedded mailbox records go with it."""
        if enc.state is not EnclaveState.DELETED:
            return
        if enc.owned:
            return
        for rid in enc.dead_pending:
            if rid.kind is ResourceKind.MAILBOX:
                self.resources.remove(rid)
        self.enclaves.pop(enc.eid, None)
        self._extents.pop(enc.eid, None)
        self.machine.enclave_tables.pop(enc.eid, None)
        self.machine.enclave_vranges.pop(enc.eid, None)
        self.machine.shared_with.pop(enc.eid, None)

    def accept_thread(self, caller: ProtectionDomain, tid: int) -> None:
        self.accept_resource(caller, thread_resource(tid))

    # ------------------------------------------------------- mailbox API

    def accept_mail(self, caller: ProtectionDomain, mailbox_index: int,
                    sender_id: int) -> None:
        guards = [self._g_enclave(caller.eid)] if caller.is_enclave else []
        if caller.is_enclave:
            guards.append(self._g_res(mailbox_resource(caller.eid, mailbox_index)))
        with self._transaction("accept_mail", guards):
            enc = self._require_running_enclave(caller)
            if not 0 <= mailbox_index < len(enc.mailboxes):
                raise NoSuchMailbox(f"enclave has no mailbox {mailbox_index}")
            box = enc.mailboxes[mailbox_index]
            if box.state is MailboxState.ACCEPTING:
                raise WrongState(f"mailbox {mailbox_index} is already armed")
            # re-arming a Full mailbox discards the stale message
            enc.mailboxes[mailbox_index] = Mailbox(
                state=MailboxState.ACCEPTING, expected_sender=sender_id)

    def send_mail(self, caller: ProtectionDomain, recipient_id: int,
                  message: bytes) -> None:
        guards = []
        if caller.is_enclave:
            guards.append(self._g_enclave(caller.eid))
        guards.append(self._g_enclave(recipient_id))
        with self._transaction("send_mail", guards):
            sender = self._require_running_enclave(caller)
            recipient = self.enclaves.get(recipient_id)
            if recipient is None or recipient.state is EnclaveState.DELETED:
                raise NoSuchEnclave(f"no live enclave 0x{recipient_id:x}")
            if len(message) > MAILBOX_MESSAGE_BYTES:
                raise MessageTooLarge(f"message exceeds {MAILBOX_MESSAGE_BYTES} bytes")
            box = None
            for candidate in recipient.mailboxes:
                if candidate.state is not MailboxState.ACCEPTING:
                    continue
                if (candidate.expected_sender == caller.eid
                        or self._check_disabled("send_skips_accept_check")):
                    box = candidate
                    break
            if box is None:
                raise NotAccepting(f"enclave 0x{recipient_id:x} is not accepting from {caller}")
            box.message = bytes(message)
            if self._check_disabled("send_forges_measurement"):
                box.sender_measurement = bytes(32)
            else:
                box.sender_measurement = sender.final_measurement
            box.state = MailboxState.FULL

    def get_mail(self, caller: ProtectionDomain,
                 mailbox_index: int) -> tuple[bytes, bytes]:
        guards = [self._g_enclave(caller.eid)] if caller.is_enclave else []
        if caller.is_enclave:
            guards.append(self._g_res(mailbox_resource(caller.eid, mailbox_index)))
        with self._transaction("get_mail", guards):
            enc = self._require_running_enclave(caller)
            if not 0 <= mailbox_index < len(enc.mailboxes):
                raise NoSuchMailbox(f"enclave has no mailbox {mailbox_index}")
            box = enc.mailboxes[mailbox_index]
            if box.state is not MailboxState.FULL:
                raise Empty(f"mailbox {mailbox_index} has no mail")
            message, measurement = box.message, box.sender_measurement
            enc.mailboxes[mailbox_index] = Mailbox()
            return message, measurement

    def get_attestation_key(self, caller: ProtectionDomain) -> None:
        """Deliver the monitor's attestation key into the caller's mailbox,
        provided the caller's measurement equals the hard-coded signing-enclave
        measurement. Delivery is a monitor-sent message with an all-zero
        sender tag."""
        guards = [self._g_enclave(caller.eid)] if caller.is_enclave else []
        with self._transaction("get_attestation_key", guards):
            enc = self._require_running_enclave(caller)
            if (enc.final_measurement != self.signing_measurement
                    and not self._check_disabled("key_skips_measurement_check")):
                raise NotSigningEnclave("caller measurement does not match the signing enclave")
            box = None
            for candidate in enc.mailboxes:
                if (candidate.state is MailboxState.ACCEPTING
                        and candidate.expected_sender == SM_MAIL_SENDER):
                    box = candidate
                    break
            if box is None:
                raise NotAccepting("arm a mailbox for the monitor sender first")
            box.message = self.identity.secret_seed
            box.sender_measurement = SM_SENDER_MEASUREMENT
            box.state = MailboxState.FULL

    _FIELDS = ("PublicKey", "SmCertificate", "DeviceCertificate", "SmMeasurement")

    def get_field(self, field_id: str) -> bytes:
        if field_id == "PublicKey":
            return self.identity.public_key
        if field_id == "SmCertificate":
            return self.identity.certificate.to_bytes()
        if field_id == "DeviceCertificate":
            return self.device.certificate.to_bytes()
        if field_id == "SmMeasurement":
            return self.identity.image_hash
        raise NoSuchField(f"unknown field {field_id!r}")

    # ------------------------------------------------------ state capture

    def snapshot_token(self):
        return (
            self.machine.snapshot_token(),
            self.resources.snapshot_token(),
            tuple(self.enclaves[eid].snapshot_token() for eid in sorted(self.enclaves)),
            tuple(self.threads[tid].snapshot_token() for tid in sorted(self.threads)),
            tuple((base,) + self._extents[base] for base in sorted(self._extents)),
            self.identity.image_hash,
            self.signing_measurement,
            self.allow_post_init_accept,
            tuple(sorted(self.disabled)),
            self.entropy.snapshot_token(),
        )

    def state_bytes(self) -> bytes:
        return canon(self.snapshot_token())

    def state_hash(self) -> str:
        return digest(self.snapshot_token()).hex()

    def clone(self) -> "SecurityMonitor":
        dup = SecurityMonitor.__new__(SecurityMonitor)
        dup.config = self.config
        dup.machine = self.machine.clone()
        dup.entropy = self.entropy.clone()
        dup.device = self.device
        dup.identity = self.identity
        dup.signing_measurement = self.signing_measurement
        dup.allow_post_init_accept = self.allow_post_init_accept
        dup.disabled = self.disabled
        dup.resources = self.resources.clone()
        dup.guards = self.guards.clone()
        dup.enclaves = {eid: enc.clone() for eid, enc in self.enclaves.items()}
        dup.threads = {tid: t.clone() for tid, t in self.threads.items()}
        dup._extents = dict(self._extents)
        dup.step_hook = None
        # cloned enclaves must share their shared-page sets with the machine
        for eid, enc in dup.enclaves.items():
            if eid in dup.machine.shared_with:
                dup.machine.shared_with[eid] = enc.shared_pages
        return dup
