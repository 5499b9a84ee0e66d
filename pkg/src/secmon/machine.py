"""Abstract multiprocessor machine: cores, physical memory, translation, TLB,
and the isolation backend that decides which protection domain owns each page.

The machine is a passive state store driven by the monitor and the harness
event loop; it performs no internal locking. Memory contents are stored
sparsely (absent page == all zero bytes) so production-scale configs are
constructible without allocating gigabytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Literal, Optional

from .codec import u64
from .errors import AccessDenied, AddressOutOfRange, BadArgument, PageFault

REGISTER_COUNT = 32

PERM_R = 1
PERM_W = 2
PERM_X = 4

AccessKind = Literal["read", "write", "execute", "dma"]

_KIND_PERM = {"read": PERM_R, "write": PERM_W, "execute": PERM_X, "dma": PERM_R | PERM_W}


class DomainKind(Enum):
    MONITOR = 0
    OS = 1
    ENCLAVE = 2


@dataclass(frozen=True, order=True)
class ProtectionDomain:
    """Resource-owner identity: the monitor, the untrusted OS, or an enclave."""

    kind: DomainKind
    eid: int = 0

    def __post_init__(self):
        if self.kind is not DomainKind.ENCLAVE and self.eid != 0:
            raise ValueError("only enclave domains carry an eid")

    @property
    def is_enclave(self) -> bool:
        return self.kind is DomainKind.ENCLAVE

    def token(self):
        return (self.kind.value, self.eid)

    def __str__(self) -> str:
        if self.kind is DomainKind.MONITOR:
            return "sm"
        if self.kind is DomainKind.OS:
            return "os"
        return f"enclave:0x{self.eid:x}"


SECURITY_MONITOR = ProtectionDomain(DomainKind.MONITOR)
UNTRUSTED_OS = ProtectionDomain(DomainKind.OS)


def enclave_domain(eid: int) -> ProtectionDomain:
    return ProtectionDomain(DomainKind.ENCLAVE, eid)


# -------------------------------------------------------------------- config


@dataclass(frozen=True)
class MachineConfig:
    """Platform shape. RegionBased isolates fixed-size regions; IntervalBased
    white-lists page-aligned intervals of arbitrary size."""

    core_count: int
    phys_memory_bytes: int
    page_size: int
    isolation_backend: Literal["region", "interval"]
    region_size: int = 0
    region_count: int = 0
    sm_reserved_bytes: int = 0

    def __post_init__(self):
        if self.core_count < 1:
            raise ValueError("need at least one core")
        if self.page_size < 1 or self.phys_memory_bytes % self.page_size:
            raise ValueError("physical memory must be page-aligned")
        if self.isolation_backend == "region":
            if self.region_size < 1 or self.region_count < 1:
                raise ValueError("region backend needs region_size and region_count")
            if self.phys_memory_bytes != self.region_count * self.region_size:
                raise ValueError("phys_memory_bytes must equal region_count * region_size")
            if self.region_size % self.page_size:
                raise ValueError("page size must divide region size")
            reserve = self.sm_reserved_bytes or self.region_size
            if reserve != self.region_size:
                raise ValueError("region backend reserves exactly one region for the monitor")
        elif self.isolation_backend == "interval":
            reserve = self.sm_reserved_bytes
            if reserve < self.page_size or reserve % self.page_size:
                raise ValueError("interval backend needs page-aligned sm_reserved_bytes")
            if reserve >= self.phys_memory_bytes:
                raise ValueError("monitor reservation exceeds physical memory")
        else:
            raise ValueError(f"unknown isolation backend {self.isolation_backend!r}")

    @property
    def monitor_reserve(self) -> int:
        if self.isolation_backend == "region":
            return self.sm_reserved_bytes or self.region_size
        return self.sm_reserved_bytes

    @property
    def page_count(self) -> int:
        return self.phys_memory_bytes // self.page_size

    def platform_caps(self) -> int:
        """Capability mask covered by enclave measurement (backend + shape)."""
        backend_bit = 1 if self.isolation_backend == "region" else 2
        return backend_bit | (self.core_count << 8) | (self.page_size.bit_length() << 16)

    @classmethod
    def desk(cls, core_count: int = 2, region_count: int = 8,
             region_size: int = 0x10000, page_size: int = 0x1000) -> "MachineConfig":
        """Small config for tests and exhaustive exploration."""
        return cls(core_count=core_count,
                   phys_memory_bytes=region_count * region_size,
                   page_size=page_size,
                   isolation_backend="region",
                   region_size=region_size,
                   region_count=region_count)

    @classmethod
    def production_region(cls, core_count: int = 4) -> "MachineConfig":
        """Full-scale region backend: 64 regions of 32 MiB."""
        region_size = 32 * 1024 * 1024
        return cls(core_count=core_count,
                   phys_memory_bytes=64 * region_size,
                   page_size=0x1000,
                   isolation_backend="region",
                   region_size=region_size,
                   region_count=64)

    @classmethod
    def interval(cls, core_count: int = 2, phys_memory_bytes: int = 0x80000,
                 page_size: int = 0x1000, sm_reserved_bytes: int = 0x10000) -> "MachineConfig":
        return cls(core_count=core_count,
                   phys_memory_bytes=phys_memory_bytes,
                   page_size=page_size,
                   isolation_backend="interval",
                   sm_reserved_bytes=sm_reserved_bytes)


# ------------------------------------------------------------------- backends


class RegionBackend:
    """Fixed-size isolated regions; the owner table is one entry per region."""

    def __init__(self, config: MachineConfig):
        self.region_size = config.region_size
        self.owners: list[ProtectionDomain] = [UNTRUSTED_OS] * config.region_count
        self.owners[0] = SECURITY_MONITOR

    def region_of(self, paddr: int) -> int:
        return paddr // self.region_size

    def owner_of(self, paddr: int) -> ProtectionDomain:
        return self.owners[self.region_of(paddr)]

    def set_region_owner(self, region: int, owner: ProtectionDomain) -> None:
        self.owners[region] = owner

    def region_span(self, region: int) -> tuple[int, int]:
        return region * self.region_size, self.region_size

    def cache_partition_of(self, paddr: int) -> int:
        # partition id == region id: one domain per partition by construction
        return self.region_of(paddr)

    def snapshot_token(self):
        return tuple(o.token() for o in self.owners)

    def clone(self) -> "RegionBackend":
        dup = RegionBackend.__new__(RegionBackend)
        dup.region_size = self.region_size
        dup.owners = list(self.owners)
        return dup


class IntervalBackend:
    """White-listed page-aligned intervals; unassigned memory belongs to the OS."""

    def __init__(self, config: MachineConfig):
        self.page_size = config.page_size
        self.limit = config.phys_memory_bytes
        # non-overlapping (base, length, owner), sorted by base
        self.intervals: list[tuple[int, int, ProtectionDomain]] = [
            (0, config.monitor_reserve, SECURITY_MONITOR)
        ]

    def owner_of(self, paddr: int) -> ProtectionDomain:
        for base, length, owner in self.intervals:
            if base <= paddr < base + length:
                return owner
        return UNTRUSTED_OS

    def define(self, base: int, length: int, owner: ProtectionDomain) -> None:
        if base % self.page_size or length % self.page_size or length <= 0:
            raise BadArgument("interval must be page-aligned and non-empty")
        if base < 0 or base + length > self.limit:
            raise AddressOutOfRange(f"interval [{base:#x},+{length:#x}) outside memory")
        for ibase, ilen, _ in self.intervals:
            if base < ibase + ilen and ibase < base + length:
                raise BadArgument("interval overlaps an existing interval")
        self.intervals.append((base, length, owner))
        self.intervals.sort()

    def set_interval_owner(self, base: int, length: int, owner: ProtectionDomain) -> None:
        for i, (ibase, ilen, _) in enumerate(self.intervals):
            if (ibase, ilen) == (base, length):
                self.intervals[i] = (base, length, owner)
                return
        raise KeyError(f"no interval [{base:#x},+{length:#x})")

    def drop_interval(self, base: int, length: int) -> None:
        self.intervals = [iv for iv in self.intervals if (iv[0], iv[1]) != (base, length)]

    def cache_partition_of(self, paddr: int) -> int:
        for i, (base, length, _) in enumerate(self.intervals):
            if base <= paddr < base + length:
                return i
        return -1

    def snapshot_token(self):
        return tuple((b, l, o.token()) for b, l, o in self.intervals)

    def clone(self) -> "IntervalBackend":
        dup = IntervalBackend.__new__(IntervalBackend)
        dup.page_size = self.page_size
        dup.limit = self.limit
        dup.intervals = list(self.intervals)
        return dup


# ------------------------------------------------------------- memory & cores


class PhysicalMemory:
    """Sparse byte store; pages not present read as zeros."""

    def __init__(self, size: int, page_size: int):
        self.size = size
        self.page_size = page_size
        self._pages: dict[int, bytearray] = {}

    def check_range(self, paddr: int, length: int = 1) -> None:
        if paddr < 0 or length < 0 or paddr + length > self.size:
            raise AddressOutOfRange(f"0x{paddr:x}+{length} beyond physical memory")

    def read(self, paddr: int, length: int) -> bytes:
        self.check_range(paddr, length)
        out = bytearray()
        while length:
            pn, off = divmod(paddr, self.page_size)
            take = min(length, self.page_size - off)
            page = self._pages.get(pn)
            out += bytes(take) if page is None else bytes(page[off:off + take])
            paddr += take
            length -= take
        return bytes(out)

    def write(self, paddr: int, data: bytes) -> None:
        self.check_range(paddr, len(data))
        pos = 0
        while pos < len(data):
            pn, off = divmod(paddr + pos, self.page_size)
            take = min(len(data) - pos, self.page_size - off)
            page = self._pages.get(pn)
            if page is None:
                page = self._pages.setdefault(pn, bytearray(self.page_size))
            page[off:off + take] = data[pos:pos + take]
            pos += take
        self._gc(paddr, len(data))

    def zero_range(self, paddr: int, length: int) -> None:
        self.check_range(paddr, length)
        first = paddr // self.page_size
        last = (paddr + length - 1) // self.page_size if length else first - 1
        for pn in range(first, last + 1):
            base = pn * self.page_size
            lo = max(paddr, base) - base
            hi = min(paddr + length, base + self.page_size) - base
            if lo == 0 and hi == self.page_size:
                self._pages.pop(pn, None)
            elif pn in self._pages:
                self._pages[pn][lo:hi] = bytes(hi - lo)
                if not any(self._pages[pn]):
                    del self._pages[pn]

    def page_is_zero(self, page_number: int) -> bool:
        page = self._pages.get(page_number)
        return page is None or not any(page)

    def nonzero_pages(self) -> Iterator[tuple[int, bytes]]:
        for pn in sorted(self._pages):
            if any(self._pages[pn]):
                yield pn, bytes(self._pages[pn])

    def _gc(self, paddr: int, length: int) -> None:
        for pn in range(paddr // self.page_size, (paddr + max(length, 1) - 1) // self.page_size + 1):
            page = self._pages.get(pn)
            if page is not None and not any(page):
                del self._pages[pn]

    def snapshot_token(self):
        return tuple((pn, content) for pn, content in self.nonzero_pages())

    def clone(self) -> "PhysicalMemory":
        dup = PhysicalMemory.__new__(PhysicalMemory)
        dup.size = self.size
        dup.page_size = self.page_size
        dup._pages = {pn: bytearray(pg) for pn, pg in self._pages.items()}
        return dup


@dataclass
class CoreState:
    """One in-order core: register file, active domain, scheduled thread, and
    a one-bit stand-in for private microarchitectural residue."""

    core_id: int
    registers: list[int] = field(default_factory=lambda: [0] * REGISTER_COUNT)
    current_domain: ProtectionDomain = UNTRUSTED_OS
    current_thread: Optional[int] = None
    microarch_dirty: bool = False

    def register_bytes(self) -> bytes:
        return b"".join(u64(r) for r in self.registers)

    def is_factory_fresh(self) -> bool:
        return (not any(self.registers) and self.current_domain == UNTRUSTED_OS
                and self.current_thread is None and not self.microarch_dirty)

    def snapshot_token(self):
        return (self.core_id, tuple(self.registers), self.current_domain.token(),
                self.current_thread, self.microarch_dirty)

    def clone(self) -> "CoreState":
        return CoreState(self.core_id, list(self.registers), self.current_domain,
                         self.current_thread, self.microarch_dirty)


@dataclass
class PageTable:
    """Flat vpn -> (ppn, perms) map standing in for a radix table; the table's
    storage cost is accounted separately by the enclave loader."""

    owner: ProtectionDomain
    mapping: dict[int, tuple[int, int]] = field(default_factory=dict)

    def lookup(self, vpn: int) -> Optional[tuple[int, int]]:
        return self.mapping.get(vpn)

    def map(self, vpn: int, ppn: int, perms: int) -> None:
        self.mapping[vpn] = (ppn, perms)

    def snapshot_token(self):
        return (self.owner.token(),
                tuple((vpn,) + self.mapping[vpn] for vpn in sorted(self.mapping)))

    def clone(self) -> "PageTable":
        return PageTable(self.owner, dict(self.mapping))


# -------------------------------------------------------------------- machine


class Machine:
    """Cores + memory + translation glued to one isolation backend."""

    def __init__(self, config: MachineConfig):
        self.config = config
        self.memory = PhysicalMemory(config.phys_memory_bytes, config.page_size)
        self.cores = [CoreState(i) for i in range(config.core_count)]
        if config.isolation_backend == "region":
            self.backend: RegionBackend | IntervalBackend = RegionBackend(config)
        else:
            self.backend = IntervalBackend(config)
        self.os_table = PageTable(UNTRUSTED_OS)
        # enclave-private tables and virtual ranges, registered by the monitor
        self.enclave_tables: dict[int, PageTable] = {}
        self.enclave_vranges: dict[int, tuple[int, int]] = {}
        # ppn sets explicitly shared with an enclave (OS-owned buffer pages)
        self.shared_with: dict[int, set[int]] = {}
        # per-core TLB: set of (vpn, ppn, domain)
        self.tlbs: list[set[tuple[int, int, ProtectionDomain]]] = [
            set() for _ in range(config.core_count)
        ]

    # -- ownership and access -------------------------------------------

    def backend_owner_of(self, paddr: int) -> ProtectionDomain:
        self.memory.check_range(paddr)
        return self.backend.owner_of(paddr)

    def page_shared_with(self, domain: ProtectionDomain, ppn: int) -> bool:
        return domain.is_enclave and ppn in self.shared_with.get(domain.eid, ())

    def access_allowed(self, domain: ProtectionDomain, paddr: int, kind: AccessKind) -> bool:
        """check_access: monitor is unrestricted; DMA carries OS rights; other
        domains reach only pages they own or are explicitly shared."""
        self.memory.check_range(paddr)
        if kind == "dma":
            return self.backend.owner_of(paddr) == UNTRUSTED_OS
        if domain == SECURITY_MONITOR:
            return True
        owner = self.backend.owner_of(paddr)
        if owner == domain:
            return True
        return self.page_shared_with(domain, paddr // self.config.page_size)

    def check_access(self, domain: ProtectionDomain, paddr: int, kind: AccessKind) -> str:
        return "Allowed" if self.access_allowed(domain, paddr, kind) else "Denied"

    def phys_read(self, domain: ProtectionDomain, paddr: int, length: int) -> bytes:
        for pn in _pages_touched(paddr, length, self.config.page_size):
            if not self.access_allowed(domain, pn * self.config.page_size, "read"):
                raise AccessDenied(f"{domain} cannot read 0x{paddr:x}")
        return self.memory.read(paddr, length)

    def phys_write(self, domain: ProtectionDomain, paddr: int, data: bytes) -> None:
        for pn in _pages_touched(paddr, len(data), self.config.page_size):
            if not self.access_allowed(domain, pn * self.config.page_size, "write"):
                raise AccessDenied(f"{domain} cannot write 0x{paddr:x}")
        self.memory.write(paddr, data)

    def dma_access(self, paddr: int, length: int, kind: AccessKind = "read") -> bytes:
        """Synthetic DMA device: OS-equivalent rights, checked per page."""
        for pn in _pages_touched(paddr, length, self.config.page_size):
            if not self.access_allowed(UNTRUSTED_OS, pn * self.config.page_size, "dma"):
                raise AccessDenied(f"dma blocked at 0x{paddr:x}")
        return self.memory.read(paddr, length)

    # -- translation ------------------------------------------------------

    def table_for(self, domain: ProtectionDomain, vaddr: int) -> PageTable:
        if domain.is_enclave:
            vrange = self.enclave_vranges.get(domain.eid)
            if vrange and vrange[0] <= vaddr < vrange[0] + vrange[1]:
                return self.enclave_tables[domain.eid]
        return self.os_table

    def translate(self, core_id: int, vaddr: int, kind: AccessKind = "read") -> int:
        """Walk the active domain's table (TLB-assisted) and return a physical
        address. A TLB hit bypasses the ownership re-check by design; walks are
        always checked and only allowed results are cached."""
        core = self.cores[core_id]
        domain = core.current_domain
        vpn, offset = divmod(vaddr, self.config.page_size)
        for tvpn, tppn, tdomain in self.tlbs[core_id]:
            if tvpn == vpn and tdomain == domain:
                return tppn * self.config.page_size + offset
        entry = self.table_for(domain, vaddr).lookup(vpn)
        if entry is None:
            raise PageFault(vaddr, kind)
        ppn, perms = entry
        if not perms & _KIND_PERM[kind]:
            raise PageFault(vaddr, kind)
        paddr = ppn * self.config.page_size + offset
        if not self.access_allowed(domain, paddr, kind):
            raise AccessDenied(f"{domain} cannot {kind} 0x{vaddr:x} -> 0x{paddr:x}")
        self.tlbs[core_id].add((vpn, ppn, domain))
        return paddr

    def virtual_read(self, core_id: int, vaddr: int, length: int) -> bytes:
        return self.memory.read(self.translate(core_id, vaddr, "read"), length)

    def virtual_write(self, core_id: int, vaddr: int, data: bytes) -> None:
        self.memory.write(self.translate(core_id, vaddr, "write"), data)

    # -- core and TLB hygiene ----------------------------------------------

    def clean_core(self, core_id: int) -> None:
        """Zero architected state and evict the departing domain's TLB entries;
        idempotent."""
        core = self.cores[core_id]
        departing = core.current_domain
        core.registers = [0] * REGISTER_COUNT
        core.microarch_dirty = False
        core.current_thread = None
        core.current_domain = UNTRUSTED_OS
        self.tlbs[core_id] = {e for e in self.tlbs[core_id] if e[2] != departing}

    def tlb_shootdown(self, paddr: int, length: int) -> None:
        if length <= 0:
            return
        first = paddr // self.config.page_size
        last = (paddr + length - 1) // self.config.page_size
        for i in range(len(self.tlbs)):
            self.tlbs[i] = {e for e in self.tlbs[i] if not first <= e[1] <= last}

    def tlb_entries(self, core_id: int | None = None):
        cores = range(len(self.tlbs)) if core_id is None else [core_id]
        for i in cores:
            for vpn, ppn, domain in sorted(self.tlbs[i], key=lambda e: (e[0], e[1], e[2].token())):
                yield i, vpn, ppn, domain

    # -- snapshot / clone --------------------------------------------------

    def snapshot_token(self):
        return (
            self.memory.snapshot_token(),
            tuple(core.snapshot_token() for core in self.cores),
            self.backend.snapshot_token(),
            self.os_table.snapshot_token(),
            tuple((eid, self.enclave_tables[eid].snapshot_token())
                  for eid in sorted(self.enclave_tables)),
            tuple((eid,) + self.enclave_vranges[eid]
                  for eid in sorted(self.enclave_vranges)),
            tuple((eid, tuple(sorted(self.shared_with[eid])))
                  for eid in sorted(self.shared_with)),
            tuple(tuple((v, p, d.token()) for v, p, d in
                        sorted(tlb, key=lambda e: (e[0], e[1], e[2].token())))
                  for tlb in self.tlbs),
        )

    def clone(self) -> "Machine":
        dup = Machine.__new__(Machine)
        dup.config = self.config
        dup.memory = self.memory.clone()
        dup.cores = [c.clone() for c in self.cores]
        dup.backend = self.backend.clone()
        dup.os_table = self.os_table.clone()
        dup.enclave_tables = {eid: t.clone() for eid, t in self.enclave_tables.items()}
        dup.enclave_vranges = dict(self.enclave_vranges)
        dup.shared_with = {eid: set(s) for eid, s in self.shared_with.items()}
        dup.tlbs = [set(t) for t in self.tlbs]
        return dup


def _pages_touched(paddr: int, length: int, page_size: int) -> range:
    if length <= 0:
        return range(paddr // page_size, paddr // page_size + 1)
    return range(paddr // page_size, (paddr + length - 1) // page_size + 1)


def parse_perms(text: str) -> int:
    """'rwx' / 'rw-' style permission strings to a bitmask."""
    perms = 0
    for ch in text:
        if ch == "r":
            perms |= PERM_R
        elif ch == "w":
            perms |= PERM_W
        elif ch == "x":
            perms |= PERM_X
        elif ch != "-":
            raise BadArgument(f"bad permission string {text!r}")
    return perms


def perms_text(perms: int) -> str:
    return (("r" if perms & PERM_R else "-")
            + ("w" if perms & PERM_W else "-")
            + ("x" if perms & PERM_X else "-"))
