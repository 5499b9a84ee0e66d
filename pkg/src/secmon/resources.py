"""Resource ownership records and the transactional guard table.

Every isolatable resource (core, memory region or interval, thread metadata
slot, mailbox slot) has exactly one record tracking its owner and lifecycle
state: Owned -> Blocked -> Clean -> Offered -> Owned. State transitions are
driven only by the monitor API; this module holds the data and the guard
machinery, the monitor holds the policy.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional

from .errors import ConcurrentCall, NoSuchResource
from .machine import ProtectionDomain


class ResourceKind(Enum):
    CORE = 0
    REGION = 1
    INTERVAL = 2
    THREAD = 3
    MAILBOX = 4


@dataclass(frozen=True)
class ResourceId:
    """(kind, rid) addressing; rid is an int except for intervals
    ((base, length)) and mailbox slots ((eid, index))."""

    kind: ResourceKind
    rid: int | tuple[int, int]

    def sort_key(self):
        rid = self.rid if isinstance(self.rid, tuple) else (self.rid, 0)
        return (self.kind.value, rid)

    def token(self):
        return (self.kind.value, self.rid if isinstance(self.rid, tuple) else (self.rid,))

    def __str__(self) -> str:
        name = self.kind.name.lower()
        if isinstance(self.rid, tuple):
            return f"{name}:{':'.join(hex(x) for x in self.rid)}"
        return f"{name}:{self.rid:#x}" if self.kind is ResourceKind.THREAD else f"{name}:{self.rid}"


def core_resource(core_id: int) -> ResourceId:
    return ResourceId(ResourceKind.CORE, core_id)


def region_resource(region: int) -> ResourceId:
    return ResourceId(ResourceKind.REGION, region)


def interval_resource(base: int, length: int) -> ResourceId:
    return ResourceId(ResourceKind.INTERVAL, (base, length))


def thread_resource(tid: int) -> ResourceId:
    return ResourceId(ResourceKind.THREAD, tid)


def mailbox_resource(eid: int, index: int) -> ResourceId:
    return ResourceId(ResourceKind.MAILBOX, (eid, index))


class ResourceState(Enum):
    OWNED = "Owned"
    BLOCKED = "Blocked"
    CLEAN = "Clean"
    OFFERED = "Offered"


@dataclass
class ResourceRecord:
    id: ResourceId
    owner: ProtectionDomain
    state: ResourceState = ResourceState.OWNED
    offered_to: Optional[ProtectionDomain] = None

    def snapshot_token(self):
        return (self.id.token(), self.owner.token(), self.state.value,
                self.offered_to.token() if self.offered_to else None)

    def clone(self) -> "ResourceRecord":
        return ResourceRecord(self.id, self.owner, self.state, self.offered_to)


class ResourceTable:
    """All records, keyed by ResourceId."""

    def __init__(self):
        self._records: dict[ResourceId, ResourceRecord] = {}

    def add(self, record: ResourceRecord) -> None:
        if record.id in self._records:
            raise ValueError(f"duplicate resource {record.id}")
        self._records[record.id] = record

    def remove(self, rid: ResourceId) -> None:
        self._records.pop(rid, None)

    def get(self, rid: ResourceId) -> ResourceRecord:
        try:
            return self._records[rid]
        except KeyError:
            raise NoSuchResource(f"no resource {rid}") from None

    def maybe(self, rid: ResourceId) -> Optional[ResourceRecord]:
        return self._records.get(rid)

    def __contains__(self, rid: ResourceId) -> bool:
        return rid in self._records

    def __iter__(self):
        return iter(sorted(self._records.values(), key=lambda r: r.id.sort_key()))

    def owned_by(self, owner: ProtectionDomain) -> list[ResourceRecord]:
        return [r for r in self if r.owner == owner]

    def snapshot_token(self):
        return tuple(r.snapshot_token() for r in self)

    def clone(self) -> "ResourceTable":
        dup = ResourceTable()
        dup._records = {rid: rec.clone() for rid, rec in self._records.items()}
        return dup


class GuardTable:
    """Per-record transaction guards.

    Acquisition is all-or-nothing under one mutex in canonical (kind, rid)
    order; any conflict aborts the whole call with ConcurrentCall before it
    has touched state. Guards are held across the call body so genuinely
    concurrent callers conflict, and a scheduling hook between acquire and
    commit lets the harness park a call mid-flight deterministically.
    """

    def __init__(self):
        self._mutex = threading.Lock()
        self._held: set[tuple] = set()

    def acquire(self, guards: Iterable[tuple]) -> list[tuple]:
        ordered = sorted(set(guards))
        with self._mutex:
            for key in ordered:
                if key in self._held:
                    raise ConcurrentCall(f"guard {key} held")
            self._held.update(ordered)
        return ordered

    def release(self, guards: Iterable[tuple]) -> None:
        with self._mutex:
            self._held.difference_update(guards)

    def quiescent(self) -> bool:
        with self._mutex:
            return not self._held

    def clone(self) -> "GuardTable":
        # guards are never held at clone points (quiescent state only)
        return GuardTable()
