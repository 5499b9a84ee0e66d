import os

import pytest

from conftest import make_monitor
from secmon.cli import main
from secmon.harness import install_manifest, run_remote_attestation
from secmon.machine import MachineConfig
from secmon.manifest import (
    EnclaveManifest,
    LoadOp,
    PageTableOp,
    PlacementGrant,
    ThreadOp,
    manifest_to_text,
    measure,
)


class TestRun:
    def test_bundled_scenario_exits_zero(self, scenario_path, capsys):
        assert main(["run", scenario_path("local_attestation.scn")]) == 0

    def test_trace_written(self, scenario_path, tmp_path):
        out = tmp_path / "trace.jsonl"
        assert main(["run", scenario_path("racing_clean.scn"),
                     "--trace-out", str(out)]) == 0
        lines = out.read_bytes().splitlines()
        assert len(lines) == 3

    def test_malformed_scenario_exits_two(self, tmp_path, capsys):
        bad = tmp_path / "bad.scn"
        bad.write_text("machine cores=\n")
        assert main(["run", str(bad)]) == 2

    def test_missing_file_exits_two(self):
        assert main(["run", "/nonexistent.scn"]) == 2

    def test_failed_assertion_exits_one(self, tmp_path, capsys):
        scn = tmp_path / "fail.scn"
        scn.write_text("os: call block_resource kind=region rid=1 -> err:NotOwner\n")
        assert main(["run", str(scn)]) == 1

    def test_stress_mode(self, scenario_path, capsys):
        assert main(["run", scenario_path("racing_clean.scn"), "--stress"]) == 0


class TestMeasure:
    def test_digest_matches_library(self, manifest_path, capsys):
        assert main(["measure", manifest_path("hello.em")]) == 0
        printed = capsys.readouterr().out.strip()
        from secmon.manifest import load_manifest
        assert printed == measure(load_manifest(manifest_path("hello.em"))).hex()
        assert len(printed) == 64

    def test_invalid_manifest_prints_rule(self, tmp_path, capsys):
        manifest = EnclaveManifest(0x400000, 4, 1, [
            PageTableOp(0x400000),
            LoadOp(0x401000, 5, b"a"),
            ThreadOp(0x401000)],
            [PlacementGrant(2, 0), PlacementGrant(1, 1)])
        path = tmp_path / "bad.em"
        path.write_text(manifest_to_text(manifest))
        assert main(["measure", str(path)]) == 2
        assert "(order)" in capsys.readouterr().err

    def test_alias_manifest_prints_rule(self, tmp_path, capsys):
        path = tmp_path / "alias.em"
        path.write_text("evrange 0x400000 4\npagetable 0x400000\n"
                        "load 0x401000 rw- inline:00\nload 0x401000 rw- inline:11\n"
                        "thread 0x401000\n")
        assert main(["measure", str(path)]) == 2
        assert "(alias)" in capsys.readouterr().err


class TestVerify:
    @pytest.fixture
    def bundle_setup(self, tmp_path):
        config = MachineConfig.desk()
        app = EnclaveManifest(0x400000, 4, 2, [
            PageTableOp(0x400000), LoadOp(0x401000, 5, b"app"), ThreadOp(0x401000)])
        signer = EnclaveManifest(0x500000, 4, 2, [
            PageTableOp(0x500000), LoadOp(0x501000, 5, b"sig"), ThreadOp(0x501000)])
        mon = make_monitor(config=config, seed=6,
                           signing_measurement=measure(signer, config))
        a = install_manifest(mon, app, regions=[1])
        s = install_manifest(mon, signer, regions=[2])
        run = run_remote_attestation(mon, a.eid, s.eid, measure(app, config))
        path = tmp_path / "bundle.bin"
        path.write_bytes(run.bundle.to_bytes())
        return (str(path), run.nonce.hex(), measure(app, config).hex(),
                mon.device.root_public_key.hex())

    def test_valid_bundle(self, bundle_setup, capsys):
        path, nonce, measurement, root = bundle_setup
        assert main(["verify", path, "--nonce", nonce,
                     "--measurement", measurement, "--device-key", root]) == 0

    def test_wrong_nonce_reason(self, bundle_setup, capsys):
        path, nonce, measurement, root = bundle_setup
        wrong = ("00" * 32)
        assert main(["verify", path, "--nonce", wrong,
                     "--measurement", measurement, "--device-key", root]) == 1
        assert capsys.readouterr().out.strip() == "nonce"

    def test_flipped_signature_reason(self, bundle_setup, tmp_path, capsys):
        path, nonce, measurement, root = bundle_setup
        raw = bytearray(open(path, "rb").read())
        # the signature field starts after three length-prefixed 32-byte fields
        raw[3 * 36 + 4] ^= 1
        mutated = tmp_path / "mut.bin"
        mutated.write_bytes(bytes(raw))
        code = main(["verify", str(mutated), "--nonce", nonce,
                     "--measurement", measurement, "--device-key", root])
        assert code == 1
        assert capsys.readouterr().out.strip() == "signature"

    def test_truncated_bundle_exits_two(self, bundle_setup, tmp_path, capsys):
        path, nonce, measurement, root = bundle_setup
        trunc = tmp_path / "trunc.bin"
        trunc.write_bytes(open(path, "rb").read()[:20])
        assert main(["verify", str(trunc), "--nonce", nonce,
                     "--measurement", measurement, "--device-key", root]) == 2


class TestExplore:
    def test_clean_run_exits_zero(self, capsys):
        assert main(["explore", "--depth", "2"]) == 0

    def test_depth_zero_single_state(self, capsys):
        assert main(["explore", "--depth", "0"]) == 0
        assert "explored 1 states" in capsys.readouterr().out

    def test_bundled_prefix_resolves(self, capsys):
        assert main(["run", "bundled:local_attestation"]) == 0

    def test_mutation_exits_one_with_counterexample(self, tmp_path, capsys):
        code = main(["explore", "--depth", "4",
                     "--disable-check", "clean_skips_zero",
                     "--out", str(tmp_path)])
        assert code == 1
        path = tmp_path / "counterexample_0.scn"
        assert path.exists()
        assert main(["run", str(path)]) == 0  # replays cleanly

    def test_budget_exceeded_exits_three(self, capsys):
        assert main(["explore", "--depth", "6", "--budget", "5"]) == 3

    def test_unknown_check_exits_two(self, capsys):
        assert main(["explore", "--disable-check", "nonsense"]) == 2
