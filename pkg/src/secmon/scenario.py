"""Scenario files: a line-oriented script format driving the monitor, with
per-step outcome assertions and a deterministic JSON-lines trace.

Header directives (before any step):

    machine cores=2 regions=8 region-size=0x10000 page-size=0x1000 backend=region
    seed 7
    post-init-accept on|off
    disable-check <name>          # fault injection, used by counterexamples
    explore-boot                  # the explorer's deterministic boot setup
    manifest <name> <path>        # declare an enclave image
    signing-manifest <name>       # hard-code the signing enclave measurement

Steps, one per line: `<actor>: <verb> <key=value...> [-> expectation]`.
Actors are `os`, `dma`, `hw` (machine events), `prog` (whoever runs on the
core), or a name bound by `bind=`/`load-enclave`. Expectations: `ok`,
`err:<Code>[:rule]`, `denied`, `value:<hex>`, `aex`, `delegated`,
`handler`, `violation:<invariant>`, `false:<reason>`, `owner:<dom>:<State>`;
omitted means `ok`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

from . import crypto
from .attestation import AttestationBundle
from .codec import short_digest
from .errors import AccessDenied, SmError
from .explore import apply_explore_boot
from .harness import install_manifest, run_remote_attestation
from .invariants import registered_invariants
from .machine import (
    MachineConfig,
    ProtectionDomain,
    UNTRUSTED_OS,
    enclave_domain,
    parse_perms,
)
from .manifest import EnclaveManifest, load_manifest, measure
from .monitor import EventKind, MachineEvent, SecurityMonitor
from .resources import (
    ResourceId,
    ResourceKind,
    core_resource,
    interval_resource,
    mailbox_resource,
    region_resource,
    thread_resource,
)


class ScenarioError(Exception):
    """Malformed scenario or manifest input (CLI exit 2)."""


class ScenarioFailure(Exception):
    """A step's outcome diverged from its expectation (CLI exit 1)."""

    def __init__(self, step: "Step", got: str):
        super().__init__(
            f"line {step.line_no}: `{step.raw}` expected {step.expect!r}, got {got!r}")
        self.step = step
        self.got = got


@dataclass
class Step:
    actor: str
    verb: str
    args: list[str]
    expect: str
    line_no: int
    raw: str


@dataclass
class Scenario:
    config: MachineConfig
    seed: Optional[int] = None
    post_init_accept: bool = True
    disabled_checks: frozenset = frozenset()
    explore_boot: bool = False
    manifests: dict[str, EnclaveManifest] = field(default_factory=dict)
    signing: Optional[str] = None
    steps: list[Step] = field(default_factory=list)


def _int(token: str) -> int:
    try:
        return int(token, 0)
    except ValueError:
        raise ScenarioError(f"expected an integer, got {token!r}") from None


def _kv(args: list[str]) -> dict[str, str]:
    out = {}
    for token in args:
        key, sep, value = token.partition("=")
        if not sep:
            raise ScenarioError(f"expected key=value, got {token!r}")
        out[key] = value
    return out


def parse_scenario(text: str, base_dir: str = ".") -> Scenario:
    config: Optional[MachineConfig] = None
    scenario_kwargs: dict = {}
    manifests: dict[str, EnclaveManifest] = {}
    disabled: set[str] = set()
    steps: list[Step] = []
    signing = None
    explore_boot = False
    post_init = True
    seed = None

    for line_no, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        head = line.split()[0]
        try:
            if head == "machine":
                config = _parse_machine(_kv(line.split()[1:]))
            elif head == "seed":
                seed = _int(line.split()[1])
            elif head == "post-init-accept":
                post_init = line.split()[1] in ("on", "true", "1")
            elif head == "disable-check":
                disabled.add(line.split()[1])
            elif head == "explore-boot":
                explore_boot = True
            elif head == "manifest":
                _, name, path = line.split()
                manifests[name] = load_manifest(os.path.join(base_dir, path))
            elif head == "signing-manifest":
                signing = line.split()[1]
            elif ":" in line.split()[0] or line.split()[0].endswith(":"):
                actor, _, rest = line.partition(":")
                body, _, expect = rest.partition("->")
                tokens = body.split()
                if not tokens:
                    raise ScenarioError("empty step")
                steps.append(Step(actor.strip(), tokens[0], tokens[1:],
                                  expect.strip() or "ok", line_no, line))
            else:
                raise ScenarioError(f"unknown directive {head!r}")
        except ScenarioError:
            raise
        except Exception as exc:
            raise ScenarioError(f"line {line_no}: {exc}") from None

    if config is None:
        config = MachineConfig.desk()
    if signing is not None and signing not in manifests:
        raise ScenarioError(f"signing-manifest {signing!r} is not declared")
    return Scenario(config=config, seed=seed, post_init_accept=post_init,
                    disabled_checks=frozenset(disabled),
                    explore_boot=explore_boot, manifests=manifests,
                    signing=signing, steps=steps)


def _parse_machine(kv: dict[str, str]) -> MachineConfig:
    backend = kv.get("backend", "region")
    cores = _int(kv.get("cores", "2"))
    page = _int(kv.get("page-size", "0x1000"))
    if backend == "region":
        regions = _int(kv.get("regions", "8"))
        region_size = _int(kv.get("region-size", "0x10000"))
        return MachineConfig(core_count=cores,
                             phys_memory_bytes=regions * region_size,
                             page_size=page, isolation_backend="region",
                             region_size=region_size, region_count=regions)
    return MachineConfig(core_count=cores,
                         phys_memory_bytes=_int(kv.get("memory", "0x80000")),
                         page_size=page, isolation_backend="interval",
                         sm_reserved_bytes=_int(kv.get("sm-reserve", "0x10000")))


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read(), base_dir=os.path.dirname(path) or ".")


# --------------------------------------------------------------------- runner


@dataclass
class Outcome:
    status: str
    value: Optional[bytes] = None


def _matches(expect: str, outcome: Outcome) -> bool:
    if expect == "ok" or expect == "allowed":
        return outcome.status == "ok"
    if expect.startswith("value:"):
        want = bytes.fromhex(expect[len("value:"):])
        return outcome.status == "ok" and outcome.value == want
    if expect.startswith("err:"):
        return outcome.status == expect or outcome.status.startswith(expect + ":")
    return outcome.status == expect


class ScenarioRunner:
    """Execute a scenario: build the monitor from the header, run each step,
    compare outcomes, and accumulate the trace."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        entropy = crypto.EntropySource(scenario.seed if scenario.seed is not None else 0)
        device = crypto.DeviceIdentity.generate(entropy)
        signing = None
        if scenario.signing is not None:
            signing = measure(scenario.manifests[scenario.signing], scenario.config)
        self.monitor = SecurityMonitor(
            scenario.config, device=device, entropy=entropy,
            signing_measurement=signing,
            allow_post_init_accept=scenario.post_init_accept,
            disabled_checks=scenario.disabled_checks)
        if scenario.explore_boot:
            apply_explore_boot(self.monitor)
        self.names: dict[str, int] = {}
        self.manifest_of: dict[str, str] = {}
        self.blobs: dict[str, bytes] = {}
        self.trace: list[dict] = []

    # -- value resolution ---------------------------------------------------

    def _addr(self, token: str, kind: str = "enclave") -> int:
        if token == "auto":
            return self.monitor.free_metadata_slot(kind)
        if token in self.names:
            return self.names[token]
        return _int(token)

    def _domain(self, token: str) -> ProtectionDomain:
        if token == "os":
            return UNTRUSTED_OS
        return enclave_domain(self._addr(token))

    def _actor_domain(self, step: Step) -> ProtectionDomain:
        # os1, os2, ... are distinct concurrent callers with OS identity
        if step.actor == "dma" or step.actor.startswith("os"):
            return UNTRUSTED_OS
        if step.actor == "prog":
            kv = _kv(step.args)
            core = _int(kv.get("core", "0"))
            return self.monitor.machine.cores[core].current_domain
        if step.actor in self.names:
            return enclave_domain(self.names[step.actor])
        raise ScenarioError(f"unknown actor {step.actor!r}")

    def _rid(self, kv: dict[str, str]) -> ResourceId:
        kind = kv.get("kind", "region")
        rid = kv.get("rid", "")
        if kind == "region":
            return region_resource(_int(rid))
        if kind == "core":
            return core_resource(_int(rid))
        if kind == "thread":
            return thread_resource(self._addr(rid, "thread"))
        if kind == "interval":
            base, length = rid.split(":")
            return interval_resource(_int(base), _int(length))
        if kind == "mailbox":
            eid, index = rid.split(":")
            return mailbox_resource(self._addr(eid), _int(index))
        raise ScenarioError(f"unknown resource kind {kind!r}")

    def _bytes(self, token: str) -> bytes:
        if token.startswith("hex:"):
            return bytes.fromhex(token[len("hex:"):])
        if token.startswith("text:"):
            return token[len("text:"):].encode()
        if token.startswith("measure:"):
            name = token[len("measure:"):]
            if name not in self.scenario.manifests:
                raise ScenarioError(f"unknown manifest {name!r}")
            return measure(self.scenario.manifests[name], self.scenario.config)
        if token in self.blobs:
            return self.blobs[token]
        raise ScenarioError(f"unknown byte value {token!r}")

    # -- execution ----------------------------------------------------------

    def run(self) -> list[dict]:
        for index, step in enumerate(self.scenario.steps):
            outcome = self.execute_step(step)
            self.trace.append({
                "i": index,
                "actor": step.actor,
                "verb": step.verb if step.verb != "call" else step.args[0],
                "args": short_digest(step.raw),
                "result": outcome.status,
                "state": self.monitor.state_hash()[:16],
            })
            if not _matches(step.expect, outcome):
                raise ScenarioFailure(step, outcome.status)
        return self.trace

    def trace_bytes(self) -> bytes:
        lines = [json.dumps(event, sort_keys=True, separators=(",", ":"))
                 for event in self.trace]
        return ("\n".join(lines) + "\n").encode()

    def execute_step(self, step: Step) -> Outcome:
        try:
            handler = getattr(self, f"_verb_{step.verb.replace('-', '_')}", None)
            if handler is None:
                raise ScenarioError(f"unknown verb {step.verb!r}")
            return handler(step)
        except SmError as err:
            status = f"err:{err.code}"
            if err.rule:
                status += f":{err.rule}"
            return Outcome(status)

    # -- verbs ----------------------------------------------------------------

    def _verb_call(self, step: Step) -> Outcome:
        if not step.args:
            raise ScenarioError("call needs an API name")
        api = step.args[0]
        kv = _kv(step.args[1:])
        caller = self._actor_domain(step)
        mon = self.monitor

        if api == "create_enclave":
            eid = self._addr(kv.get("eid", "auto"))
            base_s, _, pages_s = kv["evrange"].partition(":")
            base, pages = _int(base_s), _int(pages_s)
            mon.create_enclave(caller, eid, base, pages * mon.config.page_size,
                               _int(kv.get("mailboxes", "1")))
            if "bind" in kv:
                self.names[kv["bind"]] = eid
            return Outcome("ok")
        if api in ("block_resource", "clean_resource", "accept_resource"):
            getattr(mon, api)(caller, self._rid(kv))
            return Outcome("ok")
        if api == "grant_resource":
            mon.grant_resource(caller, self._rid(kv), self._domain(kv["to"]))
            return Outcome("ok")
        if api == "owner_of":
            owner, state = mon.owner_of(self._rid(kv))
            return Outcome(f"owner:{owner}:{state}")
        if api == "define_interval":
            mon.define_interval(caller, _int(kv["base"]), _int(kv["len"]))
            return Outcome("ok")
        if api == "allocate_page_table":
            mon.allocate_page_table(caller, self._addr(kv["eid"]), _int(kv["vaddr"]))
            return Outcome("ok")
        if api == "load_page":
            perms = kv.get("perms", "rw-")
            mon.load_page(caller, self._addr(kv["eid"]), _int(kv["vaddr"]),
                          _int(kv["src"]), parse_perms(perms))
            return Outcome("ok")
        if api == "register_shared_page":
            mon.register_shared_page(caller, self._addr(kv["eid"]),
                                     _int(kv["vpn"]), _int(kv["ppn"]))
            return Outcome("ok")
        if api == "create_thread":
            tid = self._addr(kv.get("tid", "auto"), "thread")
            handlers = {}
            for pair in kv.get("handlers", "").split(","):
                if not pair:
                    continue
                name, _, addr = pair.partition(":")
                from .monitor import HANDLER_KINDS
                handlers[HANDLER_KINDS[name]] = _int(addr)
            mon.create_thread(caller, self._addr(kv["eid"]), tid,
                              _int(kv["entry"]), handlers)
            if "bind" in kv:
                self.names[kv["bind"]] = tid
            return Outcome("ok")
        if api == "init_enclave":
            digest = mon.init_enclave(caller, self._addr(kv["eid"]))
            if kv.get("eid") in self.names or kv.get("eid", "").isidentifier():
                self.blobs[f"{kv['eid']}.measurement"] = digest
            return Outcome("ok", digest)
        if api == "enter_enclave":
            ctx = mon.enter_enclave(caller, self._addr(kv["eid"]),
                                    self._addr(kv["tid"], "thread"),
                                    _int(kv["core"]))
            return Outcome("ok", bytes([ctx.aex_present]))
        if api == "exit_enclave":
            mon.exit_enclave(caller, _int(kv["core"]))
            return Outcome("ok")
        if api == "delete_enclave":
            mon.delete_enclave(caller, self._addr(kv["eid"]))
            return Outcome("ok")
        if api == "accept_thread":
            mon.accept_thread(caller, self._addr(kv["tid"], "thread"))
            return Outcome("ok")
        if api == "accept_mail":
            sender = kv.get("sender", "sm")
            sender_id = 0 if sender == "sm" else self._addr(sender)
            mon.accept_mail(caller, _int(kv.get("mailbox", "0")), sender_id)
            return Outcome("ok")
        if api == "send_mail":
            mon.send_mail(caller, self._addr(kv["to"]), self._bytes(kv["msg"]))
            return Outcome("ok")
        if api == "get_mail":
            message, sender = mon.get_mail(caller, _int(kv.get("mailbox", "0")))
            self.blobs["mail.msg"] = message
            self.blobs["mail.sender"] = sender
            return Outcome("ok", message)
        if api == "get_attestation_key":
            mon.get_attestation_key(caller)
            return Outcome("ok")
        if api == "get_field":
            data = mon.get_field(kv["field"])
            self.blobs[f"field.{kv['field']}"] = data
            return Outcome("ok", data)
        raise ScenarioError(f"unknown API {api!r}")

    def _verb_load_enclave(self, step: Step) -> Outcome:
        if len(step.args) < 2:
            raise ScenarioError("load-enclave needs: <name> <manifest> [regions=..]")
        name, manifest_name = step.args[0], step.args[1]
        kv = _kv(step.args[2:])
        if manifest_name not in self.scenario.manifests:
            raise ScenarioError(f"unknown manifest {manifest_name!r}")
        manifest = self.scenario.manifests[manifest_name]
        regions = [_int(r) for r in kv.get("regions", "").split(",") if r]
        installed = install_manifest(self.monitor, manifest, regions=regions)
        self.names[name] = installed.eid
        for index, tid in enumerate(installed.tids):
            self.names[f"{name}.t{index}"] = tid
        self.manifest_of[name] = manifest_name
        self.blobs[f"{name}.measurement"] = installed.measurement
        return Outcome("ok", installed.measurement)

    def _verb_read(self, step: Step) -> Outcome:
        kv = _kv(step.args)
        paddr, length = _int(kv["paddr"]), _int(kv.get("len", "1"))
        try:
            if step.actor == "dma":
                data = self.monitor.machine.dma_access(paddr, length, "dma")
            else:
                data = self.monitor.machine.phys_read(
                    self._actor_domain(step), paddr, length)
        except AccessDenied:
            return Outcome("denied")
        return Outcome("ok", data)

    def _verb_write(self, step: Step) -> Outcome:
        kv = _kv(step.args)
        data = self._bytes(kv["value"])
        try:
            if step.actor == "dma":
                self.monitor.machine.dma_access(_int(kv["paddr"]), len(data), "dma")
                self.monitor.machine.memory.write(_int(kv["paddr"]), data)
            else:
                self.monitor.machine.phys_write(
                    self._actor_domain(step), _int(kv["paddr"]), data)
        except AccessDenied:
            return Outcome("denied")
        return Outcome("ok")

    def _verb_vread(self, step: Step) -> Outcome:
        kv = _kv(step.args)
        core, vaddr = _int(kv["core"]), _int(kv["vaddr"])
        length = _int(kv.get("len", "8"))
        try:
            paddr = self.monitor.machine.translate(core, vaddr, "read")
            data = self.monitor.machine.memory.read(paddr, length)
        except AccessDenied:
            return Outcome("denied")
        return Outcome("ok", data)

    def _verb_regs(self, step: Step) -> Outcome:
        kv = _kv(step.args)
        core_id = _int(kv["core"])
        core = self.monitor.machine.cores[core_id]
        actor = self._actor_domain(step)
        if core.current_domain != actor:
            return Outcome("denied")
        for key, value in kv.items():
            if key.startswith("r") and key[1:].isdigit():
                core.registers[int(key[1:])] = _int(value)
        return Outcome("ok")

    def _verb_interrupt(self, step: Step) -> Outcome:
        return self._event(step, EventKind.INTERRUPT)

    def _verb_pagefault(self, step: Step) -> Outcome:
        return self._event(step, EventKind.PAGE_FAULT)

    def _verb_fault(self, step: Step) -> Outcome:
        return self._event(step, EventKind.ENCLAVE_FAULT)

    def _event(self, step: Step, kind: EventKind) -> Outcome:
        kv = _kv(step.args)
        payload = ()
        if "vaddr" in kv:
            payload = (_int(kv["vaddr"]),)
        disposition = self.monitor.handle_event(_int(kv["core"]),
                                                MachineEvent(kind, payload))
        if disposition.kind == "handler":
            return Outcome("handler")
        if disposition.kind == "delegated":
            return Outcome("aex" if disposition.aex else "delegated")
        if disposition.error:
            return Outcome(f"err:{disposition.error}")
        return Outcome("ok")

    def _verb_check(self, step: Step) -> Outcome:
        if not step.args:
            raise ScenarioError("check needs a predicate")
        what = step.args[0]
        kv = _kv(step.args[1:])
        if what == "invariants":
            for invariant in registered_invariants():
                details = invariant.check_state(self.monitor)
                if details:
                    return Outcome(f"violation:{invariant.name}")
            return Outcome("ok")
        if what == "regs-zero":
            core = self.monitor.machine.cores[_int(kv["core"])]
            return Outcome("ok" if not any(core.registers) else "nonzero")
        if what == "aex":
            thread = self.monitor.threads[self._addr(kv["tid"], "thread")]
            want = kv.get("present", "true") in ("true", "1", "on")
            return Outcome("ok" if thread.aex_present == want else "mismatch")
        if what == "equal":
            left = self._bytes(kv["a"])
            right = self._bytes(kv["b"])
            return Outcome("ok" if left == right else "mismatch")
        raise ScenarioError(f"unknown check {what!r}")

    def _verb_remote_attest(self, step: Step) -> Outcome:
        kv = _kv(step.args)
        target, signer = kv["target"], kv["signer"]
        if "expected" in kv:
            expected = self._bytes(kv["expected"])
        else:
            expected = self._bytes(f"measure:{self.manifest_of[target]}")
        tamper = None
        if "tamper" in kv:
            tamper = _make_tamper(kv["tamper"])
        run = run_remote_attestation(self.monitor, self.names[target],
                                     self.names[signer], expected,
                                     tamper=tamper)
        self.blobs["bundle"] = run.bundle.to_bytes()
        self.blobs["nonce"] = run.nonce
        if run.result.ok:
            return Outcome("ok" if run.channel_ok else "false:channel")
        return Outcome(f"false:{run.result.reason}")


def _flip_byte(data: bytes, index: int = 0) -> bytes:
    out = bytearray(data)
    out[index % len(out)] ^= 0x01
    return bytes(out)


def _make_tamper(field_name: str):
    def tamper(bundle: AttestationBundle) -> AttestationBundle:
        kwargs = {
            "enclave_measurement": bundle.enclave_measurement,
            "nonce": bundle.nonce,
            "channel_binding": bundle.channel_binding,
            "signature": bundle.signature,
            "sm_certificate": bundle.sm_certificate,
            "device_certificate": bundle.device_certificate,
        }
        if field_name == "measurement":
            kwargs["enclave_measurement"] = _flip_byte(bundle.enclave_measurement)
        elif field_name == "nonce":
            kwargs["nonce"] = _flip_byte(bundle.nonce)
        elif field_name == "binding":
            kwargs["channel_binding"] = _flip_byte(bundle.channel_binding)
        elif field_name == "signature":
            kwargs["signature"] = _flip_byte(bundle.signature)
        elif field_name == "sm_cert":
            cert = bundle.sm_certificate
            kwargs["sm_certificate"] = crypto.Certificate(
                cert.body, _flip_byte(cert.signature))
        elif field_name == "device_cert":
            cert = bundle.device_certificate
            kwargs["device_certificate"] = crypto.Certificate(
                cert.body, _flip_byte(cert.signature))
        else:
            raise ScenarioError(f"unknown tamper field {field_name!r}")
        return AttestationBundle(**kwargs)
    return tamper


def run_scenario(scenario: Scenario) -> ScenarioRunner:
    runner = ScenarioRunner(scenario)
    runner.run()
    return runner


def run_scenario_file(path: str) -> ScenarioRunner:
    return run_scenario(load_scenario(path))
