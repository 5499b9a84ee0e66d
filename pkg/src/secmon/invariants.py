"""The registered invariant set evaluated over explored states and transitions.

Checkers re-derive legality from first principles (resource transition
diagram, scrub-on-clean, register hygiene at enclave exits, mailbox tagging,
key confinement) instead of calling back into monitor policy, so a monitor
with a disabled enforcement point produces a detectable violation rather
than an agreeing answer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .machine import ProtectionDomain, SECURITY_MONITOR, UNTRUSTED_OS, enclave_domain
from .monitor import EnclaveState, SecurityMonitor, ThreadState, ZERO_REGISTER_FILE
from .resources import ResourceId, ResourceKind, ResourceState


@dataclass(frozen=True)
class AppliedAction:
    """One successful step: who did what with which arguments."""

    actor: ProtectionDomain
    api: str
    kwargs: tuple  # sorted (key, value) pairs; values hashable

    def arg(self, key, default=None):
        for k, v in self.kwargs:
            if k == key:
                return v
        return default


class Invariant:
    name = "invariant"

    def check_state(self, mon: SecurityMonitor) -> list[str]:
        return []

    def check_transition(self, prev: SecurityMonitor, action: AppliedAction,
                         result, new: SecurityMonitor) -> list[str]:
        return []

    def _flag(self, detail: str) -> str:
        return f"{self.name}: {detail}"


def _record_map(mon: SecurityMonitor) -> dict[ResourceId, tuple]:
    return {rec.id: (rec.owner, rec.state, rec.offered_to)
            for rec in mon.resources}


def _memory_span(mon: SecurityMonitor, rid: ResourceId) -> Optional[tuple[int, int]]:
    if rid.kind is ResourceKind.REGION:
        return mon.machine.backend.region_span(rid.rid)
    if rid.kind is ResourceKind.INTERVAL:
        return rid.rid
    return None


class OwnershipPartition(Invariant):
    """Each physical page has exactly one owner; records, the backend owner
    map, cached translations, and metadata placement all agree."""

    name = "ownership-partition"

    def check_state(self, mon: SecurityMonitor) -> list[str]:
        out = []
        machine = mon.machine
        cfg = mon.config
        if cfg.isolation_backend == "region":
            owners = machine.backend.owners
            if len(owners) != cfg.region_count:
                out.append(self._flag("region owner table has the wrong size"))
            if owners and owners[0] != SECURITY_MONITOR:
                out.append(self._flag("monitor lost its metadata region"))
        else:
            intervals = sorted(machine.backend.intervals)
            for (b1, l1, _), (b2, _, _) in zip(intervals, intervals[1:]):
                if b2 < b1 + l1:
                    out.append(self._flag("intervals overlap"))
        for rec in mon.resources:
            span = _memory_span(mon, rec.id)
            if span is None:
                continue
            backend_owner = machine.backend.owner_of(span[0])
            expected = rec.owner
            if backend_owner != expected:
                out.append(self._flag(
                    f"{rec.id}: record owner {expected} but backend says {backend_owner}"))
        page = cfg.page_size
        for core_id, vpn, ppn, domain in machine.tlb_entries():
            if not machine.access_allowed(domain, ppn * page, "read"):
                out.append(self._flag(
                    f"stale TLB entry on core {core_id}: {domain} -> page {ppn}"))
        for base in mon._extents:
            if machine.backend.owner_of(base) != SECURITY_MONITOR:
                out.append(self._flag(
                    f"metadata structure 0x{base:x} outside monitor memory"))
        return out


_RESOURCE_APIS = {"block_resource", "clean_resource", "grant_resource",
                  "accept_resource", "accept_thread", "delete_enclave",
                  "create_enclave", "create_thread", "define_interval"}


class CleanBeforeReuse(Invariant):
    """Ownership may only move through block -> clean -> offer -> accept, only
    the right party may drive each edge, and a cleaned resource holds no prior
    owner's state (zero memory, purged translations, zeroed slots)."""

    name = "clean-before-reuse"

    def check_transition(self, prev, action, result, new) -> list[str]:
        out = []
        before = _record_map(prev)
        after = _record_map(new)
        changed = {rid for rid in before.keys() & after.keys()
                   if before[rid] != after[rid]}
        added = after.keys() - before.keys()
        removed = before.keys() - after.keys()

        api = action.api
        if api not in _RESOURCE_APIS:
            for rid in changed | added | removed:
                out.append(self._flag(f"{api} changed record {rid}"))
            return out

        target = action.arg("rid")
        if api == "accept_thread":
            from .resources import thread_resource
            target = thread_resource(action.arg("tid"))

        for rid in removed:
            # embedded mailbox records vanish when a deleted enclave's slot is
            # reclaimed; anything else must not disappear
            owner, state, _ = before[rid]
            ok_gc = rid.kind is ResourceKind.MAILBOX and (
                state is ResourceState.CLEAN
                or (rid == target and state is ResourceState.BLOCKED))
            if not ok_gc:
                out.append(self._flag(f"record {rid} disappeared during {api}"))

        for rid in added:
            owner, state, offered = after[rid]
            if api == "create_enclave" and rid.kind is ResourceKind.MAILBOX:
                expected = enclave_domain(action.arg("eid"))
            elif api == "create_thread" and rid.kind is ResourceKind.THREAD:
                expected = enclave_domain(action.arg("eid"))
            elif api == "define_interval" and rid.kind is ResourceKind.INTERVAL:
                expected = UNTRUSTED_OS
            else:
                out.append(self._flag(f"{api} created unexpected record {rid}"))
                continue
            if owner != expected or state is not ResourceState.OWNED:
                out.append(self._flag(f"new record {rid} born {state.value}/{owner}"))

        for rid in changed:
            owner0, state0, offered0 = before[rid]
            owner1, state1, offered1 = after[rid]
            edge = (api, state0, state1)
            if api == "block_resource" and rid == target:
                if (state0, state1) != (ResourceState.OWNED, ResourceState.BLOCKED):
                    out.append(self._flag(f"illegal block edge on {rid}"))
                if owner0 != owner1:
                    out.append(self._flag(f"block changed the owner of {rid}"))
                if action.actor != owner0:
                    out.append(self._flag(
                        f"{action.actor} blocked {rid} owned by {owner0}"))
            elif api == "clean_resource" and rid == target:
                if state0 is not ResourceState.BLOCKED:
                    out.append(self._flag(f"clean of {rid} from {state0.value}"))
                if state1 is not ResourceState.CLEAN or owner1 != UNTRUSTED_OS:
                    out.append(self._flag(f"clean left {rid} {state1.value}/{owner1}"))
                if action.actor != UNTRUSTED_OS:
                    out.append(self._flag(f"{action.actor} ran clean"))
                out.extend(self._scrubbed(new, rid))
            elif api == "grant_resource" and rid == target:
                if (state0, state1) != (ResourceState.CLEAN, ResourceState.OFFERED):
                    out.append(self._flag(f"illegal grant edge on {rid}"))
                if action.actor != UNTRUSTED_OS or owner1 != UNTRUSTED_OS:
                    out.append(self._flag(f"grant of {rid} by {action.actor}"))
            elif api in ("accept_resource", "accept_thread") and rid == target:
                if (state0, state1) != (ResourceState.OFFERED, ResourceState.OWNED):
                    out.append(self._flag(f"illegal accept edge on {rid}"))
                if offered0 != action.actor or owner1 != action.actor:
                    out.append(self._flag(
                        f"{action.actor} accepted {rid} offered to {offered0}"))
            elif api == "delete_enclave":
                victim = enclave_domain(action.arg("eid"))
                if owner0 != victim or owner1 != victim:
                    out.append(self._flag(f"delete touched foreign record {rid}"))
                if (state0, state1) != (ResourceState.OWNED, ResourceState.BLOCKED):
                    out.append(self._flag(f"delete made illegal edge on {rid}"))
                if action.actor != UNTRUSTED_OS:
                    out.append(self._flag(f"{action.actor} ran delete"))
            else:
                out.append(self._flag(f"{api} changed unrelated record {rid}"))

        # a cleaned target may have been garbage-collected with its enclave
        if api == "clean_resource" and target in removed:
            out.extend(self._scrubbed(new, target, gone=True))
        return out

    def _scrubbed(self, new: SecurityMonitor, rid: ResourceId,
                  gone: bool = False) -> list[str]:
        out = []
        span = _memory_span(new, rid)
        if span is not None:
            base, length = span
            page = new.config.page_size
            for ppn in range(base // page, (base + length) // page):
                if not new.machine.memory.page_is_zero(ppn):
                    out.append(self._flag(
                        f"cleaned {rid} still holds data in page {ppn}"))
                    break
            first, last = base // page, (base + length - 1) // page
            for core_id, vpn, ppn, domain in new.machine.tlb_entries():
                if first <= ppn <= last:
                    out.append(self._flag(
                        f"cleaned {rid} still cached in core {core_id}'s TLB"))
                    break
        elif rid.kind is ResourceKind.CORE:
            if not new.machine.cores[rid.rid].is_factory_fresh():
                out.append(self._flag(f"cleaned core {rid.rid} is not factory-fresh"))
        elif rid.kind is ResourceKind.THREAD and not gone:
            thread = new.threads.get(rid.rid)
            if thread is not None and (thread.aex_state != ZERO_REGISTER_FILE
                                       or thread.fault_state != ZERO_REGISTER_FILE
                                       or thread.owner is not None):
                out.append(self._flag(f"cleaned thread 0x{rid.rid:x} holds residue"))
        elif rid.kind is ResourceKind.MAILBOX and not gone:
            eid, index = rid.rid
            enc = new.enclaves.get(eid)
            if enc is not None and index < len(enc.mailboxes):
                box = enc.mailboxes[index]
                if box.message or box.sender_measurement:
                    out.append(self._flag(f"cleaned mailbox {rid} holds residue"))
        return out


_LOADING_APIS = {"allocate_page_table", "load_page", "create_thread",
                 "register_shared_page"}


class SealMonotonicity(Invariant):
    """After init seals an enclave, no loading-phase API may succeed on it."""

    name = "seal-monotonicity"

    def check_state(self, mon: SecurityMonitor) -> list[str]:
        out = []
        for enc in mon.enclaves.values():
            if enc.state is EnclaveState.LOADING and enc.final_measurement is not None:
                out.append(self._flag(f"loading enclave 0x{enc.eid:x} has a digest"))
            if enc.state is EnclaveState.INITIALIZED and (
                    enc.final_measurement is None
                    or len(enc.final_measurement) != 32):
                out.append(self._flag(f"sealed enclave 0x{enc.eid:x} has no digest"))
        return out

    def check_transition(self, prev, action, result, new) -> list[str]:
        if action.api not in _LOADING_APIS:
            return []
        eid = action.arg("eid")
        before = prev.enclaves.get(eid)
        if before is not None and before.state is EnclaveState.INITIALIZED:
            return [self._flag(
                f"{action.api} succeeded on sealed enclave 0x{eid:x}")]
        return []


class AexProtection(Invariant):
    """Register files never cross an enclave -> OS transition, and saved async
    exit state is byte-identical to the registers at suspension."""

    name = "aex-protection"

    def check_state(self, mon: SecurityMonitor) -> list[str]:
        out = []
        for thread in mon.threads.values():
            if thread.aex_present and thread.aex_state != thread.aex_shadow:
                out.append(self._flag(
                    f"thread 0x{thread.tid:x} saved state differs from the "
                    "registers at suspension"))
        return out

    def check_transition(self, prev, action, result, new) -> list[str]:
        out = []
        for core_id in range(prev.config.core_count):
            was = prev.machine.cores[core_id]
            now = new.machine.cores[core_id]
            if was.current_domain.is_enclave and not now.current_domain.is_enclave:
                if any(now.registers):
                    out.append(self._flag(
                        f"registers visible to the OS after core {core_id} "
                        f"left {was.current_domain} ({action.api})"))
                if now.current_thread is not None or now.microarch_dirty:
                    out.append(self._flag(
                        f"core {core_id} left {was.current_domain} uncleaned"))
        for tid, thread in new.threads.items():
            before = prev.threads.get(tid)
            if thread.aex_present and (before is None or not before.aex_present):
                if before is None or before.core is None:
                    out.append(self._flag(
                        f"thread 0x{tid:x} gained async-exit state while idle"))
                    continue
                expected = prev.machine.cores[before.core].register_bytes()
                if thread.aex_state != expected:
                    out.append(self._flag(
                        f"thread 0x{tid:x} saved state differs from the "
                        "suspended register file"))
        if action.api == "enter_enclave" and result is not None:
            tid = action.arg("tid")
            before = prev.threads.get(tid)
            now = new.threads.get(tid)
            if before is not None and now is not None and before.aex_present:
                if now.aex_state != before.aex_state:
                    out.append(self._flag(
                        f"re-entry of thread 0x{tid:x} altered saved state"))
        return out


class ThreadExclusivity(Invariant):
    """A thread runs on at most one core; a core runs at most one thread; the
    scheduling bookkeeping is a bijection."""

    name = "thread-exclusivity"

    def check_state(self, mon: SecurityMonitor) -> list[str]:
        out = []
        by_core: dict[int, int] = {}
        for tid, thread in mon.threads.items():
            if thread.state is ThreadState.SCHEDULED:
                if thread.core is None:
                    out.append(self._flag(f"scheduled thread 0x{tid:x} has no core"))
                    continue
                if thread.core in by_core:
                    out.append(self._flag(
                        f"threads 0x{by_core[thread.core]:x} and 0x{tid:x} share "
                        f"core {thread.core}"))
                by_core[thread.core] = tid
            elif thread.core is not None:
                out.append(self._flag(
                    f"{thread.state.value} thread 0x{tid:x} still references a core"))
        for core in mon.machine.cores:
            tid = core.current_thread
            if core.current_domain.is_enclave:
                if tid is None:
                    out.append(self._flag(f"enclave core {core.core_id} has no thread"))
                    continue
                thread = mon.threads.get(tid)
                if thread is None or thread.core != core.core_id \
                        or thread.owner != core.current_domain.eid \
                        or thread.state is not ThreadState.SCHEDULED:
                    out.append(self._flag(
                        f"core {core.core_id} scheduling books are inconsistent"))
            elif tid is not None:
                out.append(self._flag(
                    f"non-enclave core {core.core_id} holds thread 0x{tid:x}"))
        return out


class MailboxSenderAuth(Invariant):
    """A filled mailbox carries exactly the sender's measurement, only for a
    sender the recipient armed for; monitor key delivery uses the reserved
    all-zero tag."""

    name = "mailbox-sender-auth"

    def check_transition(self, prev, action, result, new) -> list[str]:
        from .attestation import MailboxState

        out = []
        newly_full = []
        for eid, enc in new.enclaves.items():
            old = prev.enclaves.get(eid)
            for index, box in enumerate(enc.mailboxes):
                if box.state is not MailboxState.FULL:
                    continue
                old_box = None
                if old is not None and index < len(old.mailboxes):
                    old_box = old.mailboxes[index]
                if old_box is None or old_box.state is not MailboxState.FULL:
                    newly_full.append((eid, index, box, old_box))
                elif (box.message != old_box.message
                      or box.sender_measurement != old_box.sender_measurement):
                    out.append(self._flag(
                        f"undelivered mail in mailbox {index} of 0x{eid:x} "
                        f"was overwritten by {action.api}"))
        for eid, index, box, old_box in newly_full:
            if action.api == "send_mail":
                sender = action.actor
                expected = prev.enclaves.get(sender.eid) if sender.is_enclave else None
                if expected is None or box.sender_measurement != expected.final_measurement:
                    out.append(self._flag(
                        f"mailbox {index} of 0x{eid:x} mis-tagged a message from {sender}"))
                if (old_box is None or old_box.expected_sender != sender.eid):
                    out.append(self._flag(
                        f"mailbox {index} of 0x{eid:x} accepted an unexpected sender"))
            elif action.api == "get_attestation_key":
                if box.sender_measurement != bytes(32):
                    out.append(self._flag(
                        "monitor key delivery carries a forged sender tag"))
            else:
                out.append(self._flag(
                    f"{action.api} filled mailbox {index} of 0x{eid:x}"))
        return out


class KeyConfinement(Invariant):
    """The monitor's attestation secret appears nowhere outside monitor state
    and the signing enclave's own storage."""

    name = "key-confinement"

    def check_state(self, mon: SecurityMonitor) -> list[str]:
        out = []
        secret = mon.identity.secret_seed
        signing_eids = {eid for eid, enc in mon.enclaves.items()
                        if enc.final_measurement == mon.signing_measurement}
        for eid, enc in mon.enclaves.items():
            if eid in signing_eids:
                continue
            for index, box in enumerate(enc.mailboxes):
                if secret in box.message:
                    out.append(self._flag(
                        f"monitor secret in mailbox {index} of non-signing "
                        f"enclave 0x{eid:x}"))
        page = mon.config.page_size
        for ppn, content in mon.machine.memory.nonzero_pages():
            owner = mon.machine.backend.owner_of(ppn * page)
            if owner == SECURITY_MONITOR:
                continue
            if owner.is_enclave and owner.eid in signing_eids:
                continue
            if secret in content:
                out.append(self._flag(
                    f"monitor secret in page {ppn} owned by {owner}"))
        for core in mon.machine.cores:
            domain = core.current_domain
            if domain.is_enclave and domain.eid in signing_eids:
                continue
            if secret in core.register_bytes():
                out.append(self._flag(
                    f"monitor secret in core {core.core_id} registers"))
        for tid, thread in mon.threads.items():
            if thread.owner in signing_eids:
                continue
            if secret in thread.aex_state or secret in thread.fault_state:
                out.append(self._flag(
                    f"monitor secret in thread 0x{tid:x} state slots"))
        return out


def registered_invariants() -> list[Invariant]:
    """The seven checkers the explorer evaluates at every state/transition."""
    return [
        OwnershipPartition(),
        CleanBeforeReuse(),
        SealMonotonicity(),
        AexProtection(),
        ThreadExclusivity(),
        MailboxSenderAuth(),
        KeyConfinement(),
    ]
