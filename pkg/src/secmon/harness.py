"""Simulated-OS machinery: the enclave loader, the remote-attestation
protocol driver, deterministic lockstep interleaving, and a concurrent
stress driver.

Actors here only move bytes the way real software could: enclave images are
staged in OS memory and copied in by the monitor, attestation requests and
replies travel through monitor mailboxes, and the "remote" verifier is a
plain actor exchanging byte strings with the target enclave.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from . import crypto
from .attestation import (
    AttestationBundle,
    SM_MAIL_SENDER,
    VerifyResult,
    build_attestation_request,
    parse_attestation_reply,
    sign_attestation_request,
    verify_attestation,
)
from .errors import OutOfEnclaveMemory, SmError
from .machine import UNTRUSTED_OS, enclave_domain
from .manifest import EnclaveManifest, LoadOp, PageTableOp, ThreadOp
from .monitor import SecurityMonitor
from .resources import ResourceState, region_resource


# -------------------------------------------------------------------- loader


@dataclass
class InstalledEnclave:
    eid: int
    tids: list[int]
    measurement: bytes

    @property
    def domain(self):
        return enclave_domain(self.eid)


def _grant_region(mon: SecurityMonitor, region: int, eid: int) -> None:
    rid = region_resource(region)
    record = mon.resources.get(rid)
    if record.state is ResourceState.OWNED and record.owner == UNTRUSTED_OS:
        mon.block_resource(UNTRUSTED_OS, rid)
        mon.clean_resource(UNTRUSTED_OS, rid)
    mon.grant_resource(UNTRUSTED_OS, rid, enclave_domain(eid))
    mon.accept_resource(enclave_domain(eid), rid)


def _find_staging_page(mon: SecurityMonitor, forbidden: set[int]) -> int:
    """An OS-owned physical page the loader can stage image pages in."""
    cfg = mon.config
    if cfg.isolation_backend == "region":
        for region in range(cfg.region_count - 1, 0, -1):
            if region in forbidden:
                continue
            record = mon.resources.get(region_resource(region))
            if record.owner == UNTRUSTED_OS and record.state is ResourceState.OWNED:
                return region * cfg.region_size
        raise OutOfEnclaveMemory("no OS-owned region left for staging")
    base = cfg.monitor_reserve
    while base + cfg.page_size <= cfg.phys_memory_bytes:
        if mon.machine.backend_owner_of(base) == UNTRUSTED_OS:
            return base
        base += cfg.page_size
    raise OutOfEnclaveMemory("no OS-owned page left for staging")


def install_manifest(mon: SecurityMonitor, manifest: EnclaveManifest,
                     regions: Sequence[int] = (),
                     eid: Optional[int] = None,
                     staging: Optional[int] = None) -> InstalledEnclave:
    """Drive the full load sequence for a manifest: create, grant memory
    (honoring the manifest's placement schedule when present), reserve
    tables, copy pages via OS staging memory, create threads, seal.

    `regions` is the placement when the manifest carries none: all listed
    regions are granted, in order, before the first operation.
    """
    page = mon.config.page_size
    if manifest.placements:
        schedule: dict[int, list[int]] = {}
        for grant in manifest.placements:
            schedule.setdefault(grant.before_op, []).append(grant.region)
        all_regions = [g.region for g in manifest.placements]
    else:
        schedule = {0: list(regions)}
        all_regions = list(regions)

    if eid is None:
        eid = mon.free_metadata_slot("enclave")
    if staging is None:
        staging = _find_staging_page(mon, set(all_regions))

    mon.create_enclave(UNTRUSTED_OS, eid, manifest.virt_base,
                       manifest.virt_length(page), manifest.mailbox_count)
    tids: list[int] = []
    for index, op in enumerate(manifest.ops):
        for region in schedule.get(index, ()):
            _grant_region(mon, region, eid)
        if isinstance(op, PageTableOp):
            mon.allocate_page_table(UNTRUSTED_OS, eid, op.vaddr)
        elif isinstance(op, LoadOp):
            content = op.content.ljust(page, b"\x00")
            mon.machine.phys_write(UNTRUSTED_OS, staging, content)
            mon.load_page(UNTRUSTED_OS, eid, op.vaddr, staging, op.perms)
        elif isinstance(op, ThreadOp):
            tid = mon.free_metadata_slot("thread")
            mon.create_thread(UNTRUSTED_OS, eid, tid, op.entry_point,
                              dict(op.fault_handlers))
            tids.append(tid)
        else:
            raise TypeError(f"unknown manifest op {op!r}")
    measurement = mon.init_enclave(UNTRUSTED_OS, eid)
    return InstalledEnclave(eid, tids, measurement)


# -------------------------------------------------- remote attestation driver


@dataclass
class RemoteAttestationRun:
    """Everything the remote-attestation flow produced, for assertions and
    tampering."""

    result: VerifyResult
    bundle: AttestationBundle
    nonce: bytes
    expected_measurement: bytes
    channel_ok: bool
    trace: list[str] = field(default_factory=list)


def run_remote_attestation(mon: SecurityMonitor, target_eid: int,
                           signer_eid: int, expected_measurement: bytes,
                           entropy: Optional[crypto.EntropySource] = None,
                           tamper: Optional[Callable[[AttestationBundle], AttestationBundle]] = None,
                           ) -> RemoteAttestationRun:
    """Remote attestation of `target_eid` via the signing enclave: key
    agreement, verifier nonce, mailbox round trips, bundle assembly from the
    monitor's public fields, offline verification, then a round trip over the
    agreed authenticated channel."""
    rng = entropy or mon.entropy
    trace: list[str] = []
    target = enclave_domain(target_eid)
    signer = enclave_domain(signer_eid)

    verifier_secret = rng.read(32)
    verifier_public = crypto.agreement_public_key(verifier_secret)
    target_secret = rng.read(32)
    target_public = crypto.agreement_public_key(target_secret)
    nonce = rng.read(32)
    binding = crypto.channel_binding(verifier_public, target_public)
    trace.append("key-agreement publics exchanged; nonce issued")

    # target asks the signing enclave for an attestation over its own identity
    mon.accept_mail(signer, 0, target_eid)
    mon.send_mail(target, signer_eid, build_attestation_request(nonce, binding))
    request, requester_measurement = mon.get_mail(signer, 0)
    trace.append("request delivered to the signing enclave")

    # signing enclave fetches the monitor key through its armed mailbox
    mon.accept_mail(signer, 0, SM_MAIL_SENDER)
    mon.get_attestation_key(signer)
    key_seed, key_tag = mon.get_mail(signer, 0)
    if key_tag != bytes(32):
        raise AssertionError("monitor key delivery carried a non-reserved tag")
    trace.append("monitor attestation key fetched")

    reply = sign_attestation_request(key_seed, request, requester_measurement)
    mon.accept_mail(target, 0, signer_eid)
    if reply is None:
        trace.append("malformed request: signing enclave stays silent")
        empty = AttestationBundle(bytes(32), bytes(32), bytes(32), b"",
                                  crypto.Certificate(b"", b""),
                                  crypto.Certificate(b"", b""))
        return RemoteAttestationRun(VerifyResult(False, "timeout"), empty,
                                    nonce, expected_measurement, False, trace)
    mon.send_mail(signer, target_eid, reply)
    signed_measurement, signature = parse_attestation_reply(
        mon.get_mail(target, 0)[0])
    trace.append("attestation signature returned to the target")

    sm_cert, rest = crypto.Certificate.from_bytes(mon.get_field("SmCertificate"))
    assert not rest
    device_cert, rest = crypto.Certificate.from_bytes(mon.get_field("DeviceCertificate"))
    assert not rest
    bundle = AttestationBundle(signed_measurement, nonce, binding, signature,
                               sm_cert, device_cert)
    if tamper is not None:
        bundle = tamper(bundle)
    result = verify_attestation(bundle, nonce, expected_measurement,
                                mon.device.root_public_key)
    trace.append(f"verifier decision: {result.ok} ({result.reason})")

    channel_ok = False
    if result.ok:
        key_v = crypto.key_agreement(verifier_secret, target_public)
        key_t = crypto.key_agreement(target_secret, verifier_public)
        channel = crypto.SecureChannel(key_v)
        sealed = channel.seal(b"attested channel probe")
        channel_ok = (key_v == key_t and
                      crypto.SecureChannel(key_t).open(sealed) == b"attested channel probe")
        trace.append(f"authenticated channel round trip: {channel_ok}")
    return RemoteAttestationRun(result, bundle, nonce, expected_measurement,
                                channel_ok, trace)


def run_local_attestation(mon: SecurityMonitor, prover_eid: int,
                          verifier_eid: int, message: bytes,
                          expected_measurement: bytes) -> bool:
    """Local attestation: the verifier enclave arms a mailbox for the prover,
    the prover sends, and the verifier compares the monitor's sender tag
    against the expected constant."""
    verifier = enclave_domain(verifier_eid)
    prover = enclave_domain(prover_eid)
    mon.accept_mail(verifier, 0, prover_eid)
    mon.send_mail(prover, verifier_eid, message)
    received, sender_tag = mon.get_mail(verifier, 0)
    return received == message and sender_tag == expected_measurement


# ------------------------------------------------------ lockstep interleaving


class LockstepController:
    """Deterministic scheduler for actor threads.

    Each actor parks at two points per call: before issuing it, and (via the
    monitor's step hook) between guard acquisition and the call body. One
    `advance(actor)` token releases one parked step, so a schedule is simply
    a sequence of actor names; calls that abort at guard acquisition consume
    one token instead of two.
    """

    def __init__(self):
        self._cv = threading.Condition()
        self._parked: set[str] = set()
        self._granted: Optional[str] = None
        self._done: set[str] = set()
        self._local = threading.local()

    def bind(self, actor: str) -> None:
        self._local.actor = actor

    def hook(self, _call_name: str) -> None:
        if getattr(self._local, "actor", None) is not None:
            self.checkpoint()

    def checkpoint(self) -> None:
        actor = self._local.actor
        with self._cv:
            self._parked.add(actor)
            self._cv.notify_all()
            while self._granted != actor:
                self._cv.wait()
            self._granted = None
            self._parked.discard(actor)
            self._cv.notify_all()

    def finish(self) -> None:
        actor = self._local.actor
        with self._cv:
            self._done.add(actor)
            self._parked.discard(actor)
            self._local.actor = None
            self._cv.notify_all()

    def advance(self, actor: str) -> bool:
        """Release one step of `actor`; False once the actor has finished."""
        with self._cv:
            while actor not in self._parked and actor not in self._done:
                self._cv.wait()
            if actor in self._done:
                return False
            self._granted = actor
            self._cv.notify_all()
            while self._granted is not None or (
                    actor not in self._parked and actor not in self._done):
                self._cv.wait()
            return True


@dataclass
class ActorCall:
    label: str
    fn: Callable[[], object]


class AtomicityViolation(AssertionError):
    """An interleaved execution ended in a state no serial order produces."""


@dataclass
class InterleaveOutcome:
    results: dict[str, list[tuple[str, str]]]  # actor -> [(label, "ok"/err code)]
    state_hash: str

    def flat(self) -> tuple:
        return tuple(sorted((a, tuple(r)) for a, r in self.results.items()))


def run_interleaving(mon: SecurityMonitor, scripts: dict[str, list[ActorCall]],
                     schedule: Sequence[str],
                     serial_hashes: Optional[set[str]] = None) -> InterleaveOutcome:
    """Run per-actor call lists under a deterministic schedule; remaining
    steps are drained round-robin after the schedule is exhausted. When the
    serial reference set is supplied, a final state outside it raises
    AtomicityViolation."""
    controller = LockstepController()
    mon.step_hook = controller.hook
    results: dict[str, list[tuple[str, str]]] = {a: [] for a in scripts}

    def runner(actor: str, calls: list[ActorCall]) -> None:
        controller.bind(actor)
        for call in calls:
            controller.checkpoint()
            try:
                call.fn()
                results[actor].append((call.label, "ok"))
            except SmError as err:
                results[actor].append((call.label, err.code))
        controller.finish()

    threads = [threading.Thread(target=runner, args=(actor, calls), daemon=True)
               for actor, calls in scripts.items()]
    for t in threads:
        t.start()
    try:
        for actor in schedule:
            controller.advance(actor)
        pending = True
        while pending:
            pending = False
            for actor in scripts:
                if controller.advance(actor):
                    pending = True
    finally:
        for t in threads:
            t.join(timeout=10)
        mon.step_hook = None
    outcome = InterleaveOutcome(results, mon.state_hash())
    if serial_hashes is not None and outcome.state_hash not in serial_hashes:
        raise AtomicityViolation(
            f"schedule {tuple(schedule)} produced a non-serializable state")
    return outcome


def serial_outcomes(make_monitor: Callable[[], SecurityMonitor],
                    make_scripts: Callable[[SecurityMonitor], dict[str, list[ActorCall]]],
                    ) -> set[str]:
    """State hashes of every serial order of whole calls (the reference set
    interleaved executions must land in)."""
    shape = [(actor, len(calls))
             for actor, calls in sorted(make_scripts(make_monitor()).items())]
    hashes: set[str] = set()
    for order in _interleavings(shape):
        mon = make_monitor()
        scripts = make_scripts(mon)
        cursor = {actor: 0 for actor in scripts}
        for actor in order:
            call = scripts[actor][cursor[actor]]
            cursor[actor] += 1
            try:
                call.fn()
            except SmError:
                pass
        hashes.add(mon.state_hash())
    return hashes


def _interleavings(counts: list[tuple[str, int]]):
    """All distinct orderings of per-actor step multisets."""
    if all(n == 0 for _, n in counts):
        yield ()
        return
    for i, (actor, n) in enumerate(counts):
        if n == 0:
            continue
        rest = counts[:i] + [(actor, n - 1)] + counts[i + 1:]
        for tail in _interleavings(rest):
            yield (actor,) + tail


def all_schedules(scripts: dict[str, list[ActorCall]]):
    """Every schedule covering two tokens per call (drain handles abortive
    calls that consume only one)."""
    counts = [(actor, 2 * len(calls)) for actor, calls in sorted(scripts.items())]
    yield from _interleavings(counts)


# ------------------------------------------------------------- stress driver


def run_concurrent(mon: SecurityMonitor,
                   scripts: dict[str, list[ActorCall]]) -> dict[str, list[tuple[str, str]]]:
    """Fire every actor's calls from real threads with no schedule; the
    transactional contract must keep the monitor consistent."""
    results: dict[str, list[tuple[str, str]]] = {a: [] for a in scripts}

    def runner(actor: str, calls: list[ActorCall]) -> None:
        for call in calls:
            try:
                call.fn()
                results[actor].append((call.label, "ok"))
            except SmError as err:
                results[actor].append((call.label, err.code))

    threads = [threading.Thread(target=runner, args=item) for item in scripts.items()]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return results
