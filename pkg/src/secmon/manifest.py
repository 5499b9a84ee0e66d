"""Enclave image manifests and the offline measurement oracle.

A manifest is the logical load description: virtual range, mailbox count,
and the ordered operation list (page-table reservations, page loads, thread
creations). An optional placement section schedules which memory regions the
OS grants before which operation; the digest never depends on placement, but
the load-order rule does.

The `measure` oracle replays the extend schedule independently of the live
monitor: it enforces the same loading rules (no aliasing, ascending physical
pages, tables before data) and reports the violated rule identifier exactly
as the live path does, so the two can be compared bit-for-bit.

Format, one directive per line, `#` comments:

    evrange 0x400000 16
    mailboxes 2
    pagetable 0x400000
    load 0x401000 r-x file:hello.bin sha3=<64 hex>
    load 0x402000 rw- inline:00112233
    thread 0x403000 handlers=pagefault:0x401000,fault:0x401004
    placement grant 2 before 0
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from . import crypto
from .machine import MachineConfig, parse_perms, perms_text
from .monitor import DEFAULT_SM_IMAGE, FAULT_GENERIC, FAULT_PAGE, MAX_MAILBOXES

_HANDLER_NAMES = {"pagefault": FAULT_PAGE, "fault": FAULT_GENERIC}
_HANDLER_LABELS = {v: k for k, v in _HANDLER_NAMES.items()}


class ManifestError(Exception):
    """Invalid manifest; `rule` identifies the violated loading rule
    ("alias", "order", "data-before-tables", "evrange", "memory", "threads",
    "format")."""

    def __init__(self, message: str, rule: str = "format"):
        super().__init__(message)
        self.rule = rule


@dataclass(frozen=True)
class PageTableOp:
    vaddr: int


@dataclass(frozen=True)
class LoadOp:
    vaddr: int
    perms: int
    content: bytes


@dataclass(frozen=True)
class ThreadOp:
    entry_point: int
    fault_handlers: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class PlacementGrant:
    region: int
    before_op: int


@dataclass
class EnclaveManifest:
    virt_base: int
    virt_pages: int
    mailbox_count: int = 1
    ops: list = field(default_factory=list)
    placements: list[PlacementGrant] = field(default_factory=list)

    def virt_length(self, page_size: int) -> int:
        return self.virt_pages * page_size

    def thread_count(self) -> int:
        return sum(1 for op in self.ops if isinstance(op, ThreadOp))


# ------------------------------------------------------------------- parsing


def _int(token: str) -> int:
    return int(token, 0)


def parse_manifest(text: str, base_dir: str = ".") -> EnclaveManifest:
    virt_base = None
    virt_pages = None
    mailbox_count = 1
    ops: list = []
    placements: list[PlacementGrant] = []

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            head = tokens[0]
            if head == "evrange":
                virt_base, virt_pages = _int(tokens[1]), _int(tokens[2])
            elif head == "mailboxes":
                mailbox_count = _int(tokens[1])
            elif head == "pagetable":
                ops.append(PageTableOp(_int(tokens[1])))
            elif head == "load":
                vaddr = _int(tokens[1])
                perms = parse_perms(tokens[2])
                content = _load_content(tokens[3], tokens[4:], base_dir)
                ops.append(LoadOp(vaddr, perms, content))
            elif head == "thread":
                handlers: dict[int, int] = {}
                for extra in tokens[2:]:
                    if extra.startswith("handlers="):
                        for pair in extra[len("handlers="):].split(","):
                            name, _, addr = pair.partition(":")
                            if name not in _HANDLER_NAMES:
                                raise ManifestError(f"unknown handler kind {name!r}")
                            handlers[_HANDLER_NAMES[name]] = _int(addr)
                    else:
                        raise ManifestError(f"unknown thread option {extra!r}")
                ops.append(ThreadOp(_int(tokens[1]), tuple(sorted(handlers.items()))))
            elif head == "placement":
                if tokens[1] != "grant" or tokens[3] != "before":
                    raise ManifestError("placement syntax: placement grant R before K")
                placements.append(PlacementGrant(_int(tokens[2]), _int(tokens[4])))
            else:
                raise ManifestError(f"unknown directive {head!r}")
        except ManifestError:
            raise
        except (IndexError, ValueError) as exc:
            raise ManifestError(f"line {lineno}: {exc}") from None

    if virt_base is None or virt_pages is None:
        raise ManifestError("manifest is missing an evrange directive")
    if not 0 <= mailbox_count <= MAX_MAILBOXES:
        raise ManifestError(f"mailboxes must be 0..{MAX_MAILBOXES}")
    return EnclaveManifest(virt_base, virt_pages, mailbox_count, ops, placements)


def _load_content(src: str, extras: list[str], base_dir: str) -> bytes:
    if src.startswith("inline:"):
        return bytes.fromhex(src[len("inline:"):])
    if not src.startswith("file:"):
        raise ManifestError(f"load source must be file: or inline:, got {src!r}")
    path = os.path.join(base_dir, src[len("file:"):])
    try:
        with open(path, "rb") as fh:
            content = fh.read()
    except OSError as exc:
        raise ManifestError(f"cannot read page content {path}: {exc}") from None
    for extra in extras:
        if extra.startswith("sha3="):
            expect = extra[len("sha3="):].lower()
            actual = crypto.sha3(content).hex()
            if actual != expect:
                raise ManifestError(f"content digest mismatch for {path}")
        else:
            raise ManifestError(f"unknown load option {extra!r}")
    return content


def load_manifest(path: str) -> EnclaveManifest:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_manifest(fh.read(), base_dir=os.path.dirname(path) or ".")


def manifest_to_text(manifest: EnclaveManifest) -> str:
    """Render with inline page contents (used for generated corpora)."""
    lines = [f"evrange 0x{manifest.virt_base:x} {manifest.virt_pages}",
             f"mailboxes {manifest.mailbox_count}"]
    for op in manifest.ops:
        if isinstance(op, PageTableOp):
            lines.append(f"pagetable 0x{op.vaddr:x}")
        elif isinstance(op, LoadOp):
            lines.append(f"load 0x{op.vaddr:x} {perms_text(op.perms)} "
                         f"inline:{op.content.hex()}")
        else:
            extra = ""
            if op.fault_handlers:
                pairs = ",".join(f"{_HANDLER_LABELS[k]}:0x{v:x}"
                                 for k, v in op.fault_handlers)
                extra = f" handlers={pairs}"
            lines.append(f"thread 0x{op.entry_point:x}{extra}")
    for grant in manifest.placements:
        lines.append(f"placement grant {grant.region} before {grant.before_op}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ offline oracle


def measurement_records(manifest: EnclaveManifest, config: MachineConfig,
                        sm_image_hash: bytes):
    """The record stream the monitor would extend for this logical load."""
    page = config.page_size
    yield crypto.create_record(sm_image_hash, config.platform_caps(),
                               manifest.virt_base, manifest.virt_length(page),
                               manifest.mailbox_count)
    for op in manifest.ops:
        if isinstance(op, PageTableOp):
            yield crypto.page_table_record(op.vaddr)
        elif isinstance(op, LoadOp):
            content = op.content.ljust(page, b"\x00")
            yield crypto.load_page_record(op.vaddr, op.perms, content)
        else:
            yield crypto.create_thread_record(op.entry_point, dict(op.fault_handlers))


def validate_manifest(manifest: EnclaveManifest, config: MachineConfig) -> None:
    """Enforce the loading rules the live monitor enforces; raises
    ManifestError with the rule identifier on the first violation."""
    page = config.page_size
    vbase, vlen = manifest.virt_base, manifest.virt_length(page)
    if vbase % page:
        raise ManifestError("virtual base must be page-aligned", rule="evrange")
    if manifest.virt_pages <= 0:
        raise ManifestError("virtual range is empty", rule="evrange")

    grants_before: dict[int, list[int]] = {}
    for placement in manifest.placements:
        grants_before.setdefault(placement.before_op, []).append(placement.region)

    def region_pages(region: int) -> range:
        if config.isolation_backend != "region":
            raise ManifestError("placements need a region-backend config", rule="format")
        if not 0 < region < config.region_count:
            raise ManifestError(f"no grantable region {region}", rule="format")
        per = config.region_size // page
        return range(region * per, (region + 1) * per)

    # with no placements, assume all memory granted up front: physical order
    # is then trivially ascending and only the logical rules can fire
    simulate = bool(manifest.placements)
    owned: list[int] = []
    consumed: set[int] = set()
    cursor = -1
    mapped: set[int] = set()
    data_loaded = False
    threads = 0

    def consume() -> None:
        nonlocal cursor
        if not simulate:
            return
        free = [p for p in owned if p not in consumed]
        if not free:
            raise ManifestError("placement grants too little memory", rule="memory")
        ppn = min(free)
        if ppn <= cursor:
            raise ManifestError(
                f"physical page {ppn} below the load cursor {cursor}", rule="order")
        consumed.add(ppn)
        cursor = ppn

    for index, op in enumerate(manifest.ops):
        for region in grants_before.get(index, ()):
            owned.extend(region_pages(region))
        if isinstance(op, PageTableOp):
            if data_loaded:
                raise ManifestError("page tables must precede data",
                                    rule="data-before-tables")
            consume()
        elif isinstance(op, LoadOp):
            if op.vaddr % page or not vbase <= op.vaddr < vbase + vlen:
                raise ManifestError(f"load vaddr 0x{op.vaddr:x} outside the "
                                    "virtual range", rule="evrange")
            if len(op.content) > page:
                raise ManifestError("page content exceeds the page size",
                                    rule="format")
            vpn = op.vaddr // page
            if vpn in mapped:
                raise ManifestError(f"vaddr 0x{op.vaddr:x} mapped twice", rule="alias")
            mapped.add(vpn)
            consume()
            data_loaded = True
        else:
            if not vbase <= op.entry_point < vbase + vlen:
                raise ManifestError("thread entry outside the virtual range",
                                    rule="evrange")
            for _, handler in op.fault_handlers:
                if not vbase <= handler < vbase + vlen:
                    raise ManifestError("fault handler outside the virtual range",
                                        rule="evrange")
            threads += 1
    if threads == 0:
        raise ManifestError("an enclave needs at least one thread", rule="threads")


def measure(manifest: EnclaveManifest,
            config: MachineConfig | None = None,
            sm_image: bytes = DEFAULT_SM_IMAGE) -> bytes:
    """Validate and digest a manifest offline; the result equals the live
    monitor's init_enclave digest for the same logical load."""
    config = config or MachineConfig.desk()
    validate_manifest(manifest, config)
    return crypto.measure_records(
        measurement_records(manifest, config, crypto.sha3(sm_image)))
