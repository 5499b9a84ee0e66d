"""Exhaustive small-state exploration of the monitor API.

Breadth-first enumeration of every action by every actor from the boot
state, deduplicating by canonical state hash and evaluating the registered
invariant set at every state and transition. Failed calls are guaranteed
side-effect free, so the search applies candidate actions to one scratch
clone and only pays for a fresh clone after a success.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

from . import crypto
from .errors import NotInEnclave, SmError
from .invariants import AppliedAction, Invariant, registered_invariants
from .machine import (
    MachineConfig,
    PERM_R,
    PERM_W,
    ProtectionDomain,
    UNTRUSTED_OS,
    enclave_domain,
    parse_perms,
    perms_text,
)
from .monitor import (
    ENCLAVE_SLOT_BYTES,
    EventKind,
    MachineEvent,
    SecurityMonitor,
    THREAD_SLOT_BYTES,
)
from .resources import (
    ResourceId,
    ResourceKind,
    region_resource,
    thread_resource,
)

EXPLORE_SEED = 2718
_REGISTER_PATTERN = (0x5A5A5A5A, 0x1234)
_STAGING_PATTERN = bytes(range(0x41, 0x51))
_SCRATCH_BYTE = b"\xa5"

_MONITOR_APIS = {
    "create_enclave", "allocate_page_table", "load_page", "create_thread",
    "init_enclave", "enter_enclave", "delete_enclave", "accept_thread",
    "block_resource", "clean_resource", "grant_resource", "accept_resource",
    "accept_mail", "send_mail", "get_mail", "get_attestation_key",
    "register_shared_page", "define_interval",
}


@dataclass(frozen=True)
class Action:
    """One candidate step: a monitor API call, a machine event, or a scripted
    actor behavior (register writes, raw memory probes)."""

    actor: str
    api: str
    kwargs: tuple[tuple[str, Any], ...] = ()
    domain: Optional[ProtectionDomain] = None

    def kw(self) -> dict:
        return dict(self.kwargs)

    def resolve_actor(self, mon: SecurityMonitor) -> ProtectionDomain:
        if self.api in ("exit_enclave", "set_registers"):
            return mon.machine.cores[self.kw()["core_id"]].current_domain
        return self.domain if self.domain is not None else UNTRUSTED_OS

    def apply(self, mon: SecurityMonitor, actor: ProtectionDomain):
        kwargs = self.kw()
        if self.api == "create_enclave":
            return mon.create_enclave(
                actor, kwargs["eid"], kwargs["virt_base"],
                kwargs["virt_pages"] * mon.config.page_size,
                kwargs["mailbox_count"])
        if self.api in _MONITOR_APIS:
            return getattr(mon, self.api)(caller=actor, **kwargs)
        if self.api == "exit_enclave":
            return mon.exit_enclave(actor, kwargs["core_id"])
        if self.api == "interrupt":
            core_id = kwargs["core_id"]
            if not mon.machine.cores[core_id].current_domain.is_enclave:
                raise NotInEnclave("interrupt in OS context is a no-op here")
            return mon.handle_event(core_id, MachineEvent(EventKind.INTERRUPT))
        if self.api == "set_registers":
            core_id = kwargs["core_id"]
            core = mon.machine.cores[core_id]
            if not core.current_domain.is_enclave:
                raise NotInEnclave("no enclave program is running")
            core.registers[0], core.registers[1] = _REGISTER_PATTERN
            return None
        if self.api == "phys_write":
            mon.machine.phys_write(actor, kwargs["paddr"], kwargs["data"])
            return None
        if self.api == "virt_read":
            return mon.machine.translate(kwargs["core_id"], kwargs["vaddr"], "read")
        raise ValueError(f"unknown action api {self.api}")

    # -- scenario-file rendering (counterexample replay) -------------------

    def dsl(self) -> str:
        kwargs = self.kw()
        if self.api == "interrupt":
            # interrupts only appear in paths when they suspended an enclave
            return f"hw: interrupt core={kwargs['core_id']} -> aex"
        if self.api == "set_registers":
            return (f"{self.actor}: regs core={kwargs['core_id']} "
                    f"r0=0x{_REGISTER_PATTERN[0]:x} r1=0x{_REGISTER_PATTERN[1]:x}")
        if self.api == "phys_write":
            return (f"{self.actor}: write paddr=0x{kwargs['paddr']:x} "
                    f"value=hex:{kwargs['data'].hex()}")
        if self.api == "virt_read":
            return (f"{self.actor}: vread core={kwargs['core_id']} "
                    f"vaddr=0x{kwargs['vaddr']:x}")
        if self.api == "exit_enclave":
            return f"{self.actor}: call exit_enclave core={kwargs['core_id']}"
        if self.api == "create_enclave":
            return (f"os: call create_enclave eid=0x{kwargs['eid']:x} "
                    f"evrange=0x{kwargs['virt_base']:x}:{kwargs['virt_pages']} "
                    f"mailboxes={kwargs['mailbox_count']} "
                    f"bind=enc{kwargs['eid']:x}")
        parts = [f"{self.actor}: call {self.api}"]
        for key, value in self.kwargs:
            rendered = _dsl_arg(key, value)
            if rendered:
                parts.append(rendered)
        return " ".join(parts)


def _dsl_arg(key: str, value) -> str:
    if isinstance(value, ResourceId):
        rid = value.rid
        rid_text = ":".join(hex(x) for x in rid) if isinstance(rid, tuple) else str(rid)
        return f"kind={value.kind.name.lower()} rid={rid_text}"
    if isinstance(value, ProtectionDomain):
        return f"to=0x{value.eid:x}" if value.is_enclave else "to=os"
    if isinstance(value, bytes):
        name = "msg" if key == "message" else key
        return f"{name}=hex:{value.hex()}"
    if isinstance(value, dict):
        return ""  # fault handler tables are empty in the default alphabet
    renames = {"mailbox_index": "mailbox", "sender_id": "sender",
               "recipient_id": "to", "core_id": "core", "source": "src",
               "entry_point": "entry"}
    name = renames.get(key, key)
    if key == "perms":
        return f"perms={perms_text(value)}"
    if key == "virt_length":
        return ""  # folded into evrange= by create rendering below
    if isinstance(value, int):
        return f"{name}=0x{value:x}"
    return f"{name}={value}"


def _create_kwargs(eid: int, base: int, pages: int, mailboxes: int):
    # rendered as eid/evrange/mailboxes by the scenario grammar
    return (("eid", eid), ("virt_base", base), ("virt_pages", pages),
            ("mailbox_count", mailboxes))


# --------------------------------------------------------------------- setup


def default_explore_config() -> MachineConfig:
    """Minimal machine for exhaustive runs: 2 cores, 4 regions of 64 KiB."""
    return MachineConfig.desk(core_count=2, region_count=4)


def build_explore_monitor(config: Optional[MachineConfig] = None,
                          disabled_checks=frozenset(),
                          allow_post_init_accept: bool = True) -> SecurityMonitor:
    """Deterministic boot state: fixed device identity, identity-mapped OS
    pages for the grantable regions, and a staged source page the load
    actions copy from."""
    config = config or default_explore_config()
    entropy = crypto.EntropySource(EXPLORE_SEED)
    device = crypto.DeviceIdentity.from_secrets(b"\x11" * 32, b"\x22" * 32)
    mon = SecurityMonitor(config, device=device, entropy=entropy,
                          allow_post_init_accept=allow_post_init_accept,
                          disabled_checks=frozenset(disabled_checks))
    apply_explore_boot(mon)
    return mon


def apply_explore_boot(mon: SecurityMonitor) -> None:
    """Boot-time OS setup shared with scenario replay (`explore-boot`)."""
    config = mon.config
    if config.isolation_backend != "region":
        return
    page = config.page_size
    per_region = config.region_size // page
    for region in range(1, config.region_count):
        vpn = region * per_region
        mon.machine.os_table.map(vpn, vpn, PERM_R | PERM_W)
    staging = (config.region_count - 1) * config.region_size + page
    mon.machine.phys_write(UNTRUSTED_OS, staging, _STAGING_PATTERN)


def default_alphabet(mon: SecurityMonitor) -> list[Action]:
    cfg = mon.config
    page = cfg.page_size
    e1 = mon.metadata_base
    e2 = e1 + ENCLAVE_SLOT_BYTES
    t1 = e2 + ENCLAVE_SLOT_BYTES
    t2 = t1 + THREAD_SLOT_BYTES
    ev_base = 0x400000
    scratch_region = cfg.region_count - 1
    scratch = scratch_region * cfg.region_size
    staging = scratch + page
    probe_vaddr = 2 * cfg.region_size  # identity-mapped page of region 2
    enclaves = [("e1", e1, t1), ("e2", e2, t2)]
    grantable = [1, 2]

    acts: list[Action] = []
    for name, eid, tid in enclaves:
        dom = enclave_domain(eid)
        acts.append(Action("os", "create_enclave",
                           _create_kwargs(eid, ev_base, 2, 1)))
        acts.append(Action("os", "create_thread",
                           (("eid", eid), ("tid", tid), ("entry_point", ev_base))))
        acts.append(Action("os", "allocate_page_table",
                           (("eid", eid), ("vaddr", ev_base))))
        acts.append(Action("os", "load_page",
                           (("eid", eid), ("vaddr", ev_base + page),
                            ("source", staging), ("perms", PERM_R | PERM_W))))
        acts.append(Action("os", "init_enclave", (("eid", eid),)))
        acts.append(Action("os", "delete_enclave", (("eid", eid),)))
        acts.append(Action("os", "register_shared_page",
                           (("eid", eid), ("vpn", scratch // page),
                            ("ppn", scratch // page))))
        for region in grantable:
            acts.append(Action("os", "grant_resource",
                               (("rid", region_resource(region)), ("to", dom))))
            acts.append(Action(name, "accept_resource",
                               (("rid", region_resource(region)),), domain=dom))
    for region in range(1, cfg.region_count):
        acts.append(Action("os", "block_resource",
                           (("rid", region_resource(region)),)))
        acts.append(Action("os", "clean_resource",
                           (("rid", region_resource(region)),)))
    # scheduling: e1 may occupy either core (exclusivity coverage), e2 one
    acts.append(Action("os", "enter_enclave",
                       (("eid", e1), ("tid", t1), ("core_id", 0))))
    acts.append(Action("os", "enter_enclave",
                       (("eid", e1), ("tid", t1), ("core_id", 1))))
    acts.append(Action("os", "enter_enclave",
                       (("eid", e2), ("tid", t2), ("core_id", 1))))
    for core in range(cfg.core_count):
        acts.append(Action("prog", "set_registers", (("core_id", core),)))
        acts.append(Action("prog", "exit_enclave", (("core_id", core),)))
        acts.append(Action("hw", "interrupt", (("core_id", core),)))
    # thread re-allocation cycle: e1's thread can end up owned by e2
    acts.append(Action("e1", "block_resource",
                       (("rid", thread_resource(t1)),), domain=enclave_domain(e1)))
    acts.append(Action("os", "clean_resource", (("rid", thread_resource(t1)),)))
    acts.append(Action("os", "grant_resource",
                       (("rid", thread_resource(t1)), ("to", enclave_domain(e2)))))
    acts.append(Action("e2", "accept_thread", (("tid", t1),), domain=enclave_domain(e2)))
    # mailboxes and the attestation key
    acts.append(Action("e1", "accept_mail",
                       (("mailbox_index", 0), ("sender_id", e2)),
                       domain=enclave_domain(e1)))
    acts.append(Action("e2", "accept_mail",
                       (("mailbox_index", 0), ("sender_id", e1)),
                       domain=enclave_domain(e2)))
    acts.append(Action("e1", "accept_mail",
                       (("mailbox_index", 0), ("sender_id", 0)),
                       domain=enclave_domain(e1)))
    acts.append(Action("e1", "send_mail",
                       (("recipient_id", e2), ("message", b"\x01")),
                       domain=enclave_domain(e1)))
    acts.append(Action("e2", "send_mail",
                       (("recipient_id", e1), ("message", b"\x02")),
                       domain=enclave_domain(e2)))
    acts.append(Action("e1", "get_mail", (("mailbox_index", 0),),
                       domain=enclave_domain(e1)))
    acts.append(Action("e2", "get_mail", (("mailbox_index", 0),),
                       domain=enclave_domain(e2)))
    acts.append(Action("e1", "get_attestation_key", (), domain=enclave_domain(e1)))
    # adversarial probes: raw writes and a translation that caches a mapping
    acts.append(Action("os", "phys_write",
                       (("paddr", scratch), ("data", _SCRATCH_BYTE))))
    acts.append(Action("os", "virt_read",
                       (("core_id", 0), ("vaddr", probe_vaddr))))
    return acts


# ---------------------------------------------------------------- exploration


@dataclass(frozen=True)
class Violation:
    invariant: str
    detail: str
    depth: int
    path: tuple[Action, ...]
    kind: str  # "state" | "transition"


@dataclass
class ExplorationReport:
    depth: int
    states: int
    transitions: int
    elapsed: float
    violations: list[Violation] = field(default_factory=list)
    budget_exceeded: bool = False

    @property
    def ok(self) -> bool:
        return not self.violations and not self.budget_exceeded

    def summary(self) -> str:
        lines = [f"explored {self.states} states / {self.transitions} transitions "
                 f"to depth {self.depth} in {self.elapsed:.1f}s"]
        if self.budget_exceeded:
            lines.append("state-space budget exceeded before the depth bound")
        if not self.violations:
            lines.append("no invariant violations")
        for v in self.violations:
            lines.append(f"VIOLATION [{v.invariant}] at depth {v.depth}: {v.detail}")
            for step, action in enumerate(v.path, 1):
                lines.append(f"  {step}. {action.dsl()}")
        return "\n".join(lines)


def exhaustive_explore(monitor: Optional[SecurityMonitor] = None,
                       machine_config: Optional[MachineConfig] = None,
                       max_depth: int = 6,
                       node_budget: int = 300_000,
                       disabled_checks=frozenset(),
                       alphabet: Optional[Sequence[Action]] = None,
                       invariants: Optional[list[Invariant]] = None,
                       stop_at_first: bool = True,
                       progress: Optional[Callable[[int, int], None]] = None,
                       ) -> ExplorationReport:
    """Enumerate reachable states up to max_depth and check every registered
    invariant; returns the report (with minimal-depth counterexample paths,
    since the search is breadth-first)."""
    start = time.monotonic()
    root = monitor if monitor is not None else build_explore_monitor(
        machine_config, disabled_checks=disabled_checks)
    actions = list(alphabet) if alphabet is not None else default_alphabet(root)
    invs = invariants if invariants is not None else registered_invariants()

    report = ExplorationReport(depth=0, states=1, transitions=0, elapsed=0.0)
    for inv in invs:
        for detail in inv.check_state(root):
            report.violations.append(Violation(inv.name, detail, 0, (), "state"))
    if report.violations and stop_at_first:
        report.elapsed = time.monotonic() - start
        return report

    seen = {root.state_hash()}
    frontier: list[tuple[SecurityMonitor, tuple[Action, ...]]] = [(root, ())]

    for depth in range(1, max_depth + 1):
        next_frontier: list[tuple[SecurityMonitor, tuple[Action, ...]]] = []
        for parent, path in frontier:
            scratch = parent.clone()
            for action in actions:
                try:
                    actor = action.resolve_actor(scratch)
                    result = action.apply(scratch, actor)
                except SmError:
                    continue  # failed calls are side-effect free
                report.transitions += 1
                child, child_path = scratch, path + (action,)
                scratch = parent.clone()

                applied = AppliedAction(actor, action.api, action.kwargs)
                for inv in invs:
                    for detail in inv.check_transition(parent, applied, result, child):
                        report.violations.append(
                            Violation(inv.name, detail, depth, child_path, "transition"))
                state_hash = child.state_hash()
                if state_hash not in seen:
                    seen.add(state_hash)
                    report.states += 1
                    for inv in invs:
                        for detail in inv.check_state(child):
                            report.violations.append(
                                Violation(inv.name, detail, depth, child_path, "state"))
                    next_frontier.append((child, child_path))
                if report.violations and stop_at_first:
                    report.depth = depth
                    report.elapsed = time.monotonic() - start
                    return report
                if report.states >= node_budget:
                    report.budget_exceeded = True
                    report.depth = depth
                    report.elapsed = time.monotonic() - start
                    return report
        frontier = next_frontier
        report.depth = depth
        if progress is not None:
            progress(depth, report.states)
        if not frontier:
            break
    report.elapsed = time.monotonic() - start
    return report


# ------------------------------------------------------- counterexample files


def counterexample_scenario(violation: Violation, config: MachineConfig,
                            disabled_checks=frozenset()) -> str:
    """Render a violation path as a replayable scenario file."""
    lines = [f"# counterexample for invariant '{violation.invariant}'",
             f"# {violation.detail}"]
    if config.isolation_backend == "region":
        lines.append(f"machine cores={config.core_count} regions={config.region_count} "
                     f"region-size=0x{config.region_size:x} "
                     f"page-size=0x{config.page_size:x} backend=region")
    else:
        lines.append(f"machine cores={config.core_count} "
                     f"memory=0x{config.phys_memory_bytes:x} "
                     f"page-size=0x{config.page_size:x} backend=interval "
                     f"sm-reserve=0x{config.sm_reserved_bytes:x}")
    lines.append(f"seed {EXPLORE_SEED}")
    lines.append("explore-boot")
    for check in sorted(disabled_checks):
        lines.append(f"disable-check {check}")
    bindings: dict[int, str] = {}
    for action in violation.path:
        if action.api == "create_enclave":
            bindings[action.kw()["eid"]] = f"enc{action.kw()['eid']:x}"
        lines.append(_bind_actor(action, bindings))
    if violation.kind == "state":
        lines.append(f"os: check invariants -> violation:{violation.invariant}")
    else:
        lines.append("# transition violation raised at the last step above")
    return "\n".join(lines) + "\n"


def _bind_actor(action: Action, bindings: dict[int, str]) -> str:
    line = action.dsl()
    if action.domain is not None and action.domain.is_enclave:
        name = bindings.get(action.domain.eid)
        if name is not None:
            _, rest = line.split(":", 1)
            return f"{name}:{rest}"
    return line
