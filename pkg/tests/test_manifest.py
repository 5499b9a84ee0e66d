import random

import pytest

from conftest import make_monitor
from corpus import INVALID_KINDS, invalidate, random_manifest
from secmon.errors import SmError
from secmon.harness import install_manifest
from secmon.manifest import (
    EnclaveManifest,
    LoadOp,
    ManifestError,
    PageTableOp,
    PlacementGrant,
    ThreadOp,
    load_manifest,
    manifest_to_text,
    measure,
    parse_manifest,
    validate_manifest,
)
from secmon.machine import MachineConfig


class TestParsing:
    def test_bundled_manifest_loads(self, manifest_path):
        manifest = load_manifest(manifest_path("hello.em"))
        assert manifest.virt_base == 0x400000
        assert manifest.thread_count() == 1
        thread = [op for op in manifest.ops if isinstance(op, ThreadOp)][0]
        assert thread.fault_handlers == ((1, 0x401004),)

    def test_content_digest_enforced(self, tmp_path):
        page = tmp_path / "page.bin"
        page.write_bytes(b"payload")
        text = (f"evrange 0x400000 4\npagetable 0x400000\n"
                f"load 0x401000 rw- file:page.bin sha3={'0' * 64}\nthread 0x401000\n")
        with pytest.raises(ManifestError):
            parse_manifest(text, base_dir=str(tmp_path))

    def test_inline_content(self):
        manifest = parse_manifest(
            "evrange 0x400000 2\npagetable 0x400000\n"
            "load 0x401000 r-x inline:deadbeef\nthread 0x401000\n")
        load = [op for op in manifest.ops if isinstance(op, LoadOp)][0]
        assert load.content == bytes.fromhex("deadbeef")

    def test_unknown_directive(self):
        with pytest.raises(ManifestError):
            parse_manifest("evrange 0x400000 2\nfrobnicate 3\n")

    def test_missing_evrange(self):
        with pytest.raises(ManifestError):
            parse_manifest("pagetable 0x400000\n")

    def test_placement_syntax(self):
        manifest = parse_manifest(
            "evrange 0x400000 2\npagetable 0x400000\nthread 0x400000\n"
            "placement grant 2 before 0\n")
        assert manifest.placements == [PlacementGrant(2, 0)]


class TestValidation:
    def test_alias(self):
        manifest = EnclaveManifest(0x400000, 4, 1, [
            PageTableOp(0x400000),
            LoadOp(0x401000, 5, b"a"),
            LoadOp(0x401000, 5, b"b"),
            ThreadOp(0x401000)])
        with pytest.raises(ManifestError) as err:
            validate_manifest(manifest, MachineConfig.desk())
        assert err.value.rule == "alias"

    def test_data_before_tables(self):
        manifest = EnclaveManifest(0x400000, 4, 1, [
            LoadOp(0x401000, 5, b"a"),
            PageTableOp(0x400000),
            ThreadOp(0x401000)])
        with pytest.raises(ManifestError) as err:
            validate_manifest(manifest, MachineConfig.desk())
        assert err.value.rule == "data-before-tables"

    def test_order_via_placements(self):
        manifest = EnclaveManifest(0x400000, 4, 1, [
            PageTableOp(0x400000),
            LoadOp(0x401000, 5, b"a"),
            ThreadOp(0x401000)],
            [PlacementGrant(2, 0), PlacementGrant(1, 1)])
        with pytest.raises(ManifestError) as err:
            validate_manifest(manifest, MachineConfig.desk())
        assert err.value.rule == "order"

    def test_thread_required(self):
        manifest = EnclaveManifest(0x400000, 4, 1, [PageTableOp(0x400000)])
        with pytest.raises(ManifestError) as err:
            validate_manifest(manifest, MachineConfig.desk())
        assert err.value.rule == "threads"

    def test_load_outside_range(self):
        manifest = EnclaveManifest(0x400000, 2, 1, [
            PageTableOp(0x400000),
            LoadOp(0x500000, 5, b"a"),
            ThreadOp(0x400000)])
        with pytest.raises(ManifestError) as err:
            validate_manifest(manifest, MachineConfig.desk())
        assert err.value.rule == "evrange"


class TestOracleAgreement:
    """The offline oracle and the live loader agree on accept/reject and on
    the rejected rule (a slice of the full acceptance-criterion corpus)."""

    def test_valid_corpus(self):
        rng = random.Random(7)
        for _ in range(10):
            manifest = random_manifest(rng)
            offline = measure(manifest)
            mon = make_monitor()
            live = install_manifest(mon, manifest, regions=[1, 2]).measurement
            assert live == offline

    @pytest.mark.parametrize("kind", INVALID_KINDS)
    def test_invalid_corpus(self, kind):
        rng = random.Random(13)
        for _ in range(5):
            manifest = invalidate(rng, random_manifest(rng), kind)
            with pytest.raises(ManifestError) as offline:
                measure(manifest)
            assert offline.value.rule == kind
            mon = make_monitor()
            with pytest.raises(SmError) as live:
                install_manifest(mon, manifest, regions=[1, 2])
            assert live.value.rule == kind

    def test_round_trip_preserves_semantics(self):
        rng = random.Random(21)
        for _ in range(10):
            manifest = random_manifest(rng)
            assert measure(parse_manifest(manifest_to_text(manifest))) == measure(manifest)
