"""Random manifest corpus for oracle-equivalence and placement tests."""

from __future__ import annotations

import random

from secmon.manifest import (
    EnclaveManifest,
    LoadOp,
    PageTableOp,
    PlacementGrant,
    ThreadOp,
)

PAGE = 0x1000


def random_manifest(rng: random.Random, min_consuming_ops: int = 2) -> EnclaveManifest:
    """A valid manifest: tables first, distinct load addresses, >= 1 thread."""
    virt_base = rng.randrange(0x400, 0x800) * PAGE
    virt_pages = rng.randrange(3, 8)
    mailboxes = rng.randrange(0, 3)

    n_tables = rng.randrange(1, 3)
    max_loads = virt_pages - 1
    n_loads = rng.randrange(max(1, min_consuming_ops - n_tables), max_loads + 1)
    vpns = rng.sample(range(virt_pages), n_loads)

    ops: list = []
    for _ in range(n_tables):
        ops.append(PageTableOp(virt_base + rng.randrange(0, virt_pages) * PAGE))
    load_vaddrs = []
    for vpn in vpns:
        content = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 48)))
        perms = rng.randrange(1, 8)
        vaddr = virt_base + vpn * PAGE
        load_vaddrs.append(vaddr)
        ops.append(LoadOp(vaddr, perms, content))
    for _ in range(rng.randrange(1, 3)):
        entry = rng.choice(load_vaddrs)
        handlers = ()
        if rng.random() < 0.5:
            handlers = ((1, rng.choice(load_vaddrs)),)
        ops.append(ThreadOp(entry, handlers))
    return EnclaveManifest(virt_base, virt_pages, mailboxes, ops, [])


INVALID_KINDS = ("alias", "order", "data-before-tables")


def invalidate(rng: random.Random, manifest: EnclaveManifest,
               kind: str) -> EnclaveManifest:
    """Break one loading rule; the result must be rejected with `kind`."""
    ops = list(manifest.ops)
    placements = list(manifest.placements)
    if kind == "alias":
        loads = [i for i, op in enumerate(ops) if isinstance(op, LoadOp)]
        src = ops[rng.choice(loads)]
        dup = LoadOp(src.vaddr,
                     rng.randrange(1, 8),
                     bytes(rng.randrange(256) for _ in range(8)))
        ops.insert(rng.choice(loads) + 1, dup)
    elif kind == "data-before-tables":
        loads = [i for i, op in enumerate(ops) if isinstance(op, LoadOp)]
        ops.insert(rng.choice(loads) + 1,
                   PageTableOp(manifest.virt_base))
    elif kind == "order":
        # grant a high region first, then a lower one mid-load: the next
        # consumed physical page falls below the cursor
        consuming = [i for i, op in enumerate(ops)
                     if isinstance(op, (LoadOp, PageTableOp))]
        assert len(consuming) >= 2, "need two consuming ops to break ordering"
        placements = [PlacementGrant(2, 0),
                      PlacementGrant(1, consuming[1])]
    else:
        raise ValueError(kind)
    return EnclaveManifest(manifest.virt_base, manifest.virt_pages,
                           manifest.mailbox_count, ops, placements)
