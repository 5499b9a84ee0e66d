"""Command-line entry points.

    secmon run SCENARIO [--seed N] [--trace-out PATH] [--stress]
    secmon measure MANIFEST [machine flags] [--sm-image-file PATH]
    secmon verify BUNDLE --nonce HEX --measurement HEX --device-key HEX
    secmon explore [machine flags] [--depth N] [--budget N]
                   [--disable-check NAME] [--out DIR] [--report PATH]

Exit codes: run 0 pass / 1 assertion failure / 2 malformed input;
measure 0 / 2 invalid manifest (the violated rule is printed);
verify 0 / 1 rejected (reason printed) / 2 malformed bundle;
explore 0 clean / 1 violations (counterexamples written) / 3 budget exceeded.
"""

from __future__ import annotations

import argparse
import os
import sys

from .attestation import AttestationBundle, verify_attestation
from .errors import SmError, error_by_code
from .explore import counterexample_scenario, exhaustive_explore
from .harness import ActorCall, run_concurrent
from .invariants import registered_invariants
from .machine import MachineConfig
from .manifest import ManifestError, load_manifest, measure
from .monitor import DEFAULT_SM_IMAGE, KNOWN_CHECKS
from .scenario import (
    Scenario,
    ScenarioError,
    ScenarioFailure,
    ScenarioRunner,
    load_scenario,
)


def _machine_flags(parser: argparse.ArgumentParser, default_regions: int = 8) -> None:
    parser.add_argument("--backend", choices=["region", "interval"], default="region")
    parser.add_argument("--cores", type=int, default=2)
    parser.add_argument("--regions", type=int, default=default_regions)
    parser.add_argument("--region-size", type=lambda s: int(s, 0), default=0x10000)
    parser.add_argument("--page-size", type=lambda s: int(s, 0), default=0x1000)
    parser.add_argument("--memory", type=lambda s: int(s, 0), default=0x80000,
                        help="physical bytes (interval backend)")
    parser.add_argument("--sm-reserve", type=lambda s: int(s, 0), default=0x10000,
                        help="monitor reservation (interval backend)")


def _machine_config(args) -> MachineConfig:
    if args.backend == "region":
        return MachineConfig(core_count=args.cores,
                             phys_memory_bytes=args.regions * args.region_size,
                             page_size=args.page_size,
                             isolation_backend="region",
                             region_size=args.region_size,
                             region_count=args.regions)
    return MachineConfig(core_count=args.cores, phys_memory_bytes=args.memory,
                         page_size=args.page_size, isolation_backend="interval",
                         sm_reserved_bytes=args.sm_reserve)


def _resolve_scenario_path(path: str) -> str:
    """`bundled:<name>` resolves to the scenario files shipped in the package."""
    if not path.startswith("bundled:"):
        return path
    name = path[len("bundled:"):]
    if not name.endswith(".scn"):
        name += ".scn"
    return os.path.join(os.path.dirname(__file__), "data", "scenarios", name)


def _cmd_run(args) -> int:
    try:
        scenario = load_scenario(_resolve_scenario_path(args.scenario))
        if args.seed is not None:
            scenario.seed = args.seed
    except (ScenarioError, ManifestError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    runner = ScenarioRunner(scenario)
    code = 0
    try:
        runner.run()
    except ScenarioFailure as failure:
        print(f"assertion failed: {failure}", file=sys.stderr)
        code = 1
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.trace_out:
        with open(args.trace_out, "wb") as fh:
            fh.write(runner.trace_bytes())
    if code == 0 and args.stress:
        code = _stress(scenario)
    if code == 0:
        print(f"ok: {len(runner.trace)} steps")
    return code


def _stress(scenario: Scenario) -> int:
    """Concurrent-caller mode: replay each actor's call steps from its own
    thread against a fresh monitor. Per-step expectations are relaxed (any
    documented error is acceptable under a race); the registered invariants
    must still hold afterwards."""
    runner = ScenarioRunner(scenario)
    scripts: dict[str, list[ActorCall]] = {}

    def make_call(step):
        def fn():
            outcome = runner.execute_step(step)
            if outcome.status.startswith("err:"):
                code = outcome.status.split(":")[1]
                raise error_by_code(code)(outcome.status)
            return outcome
        label = step.raw.split("->")[0].strip()
        return ActorCall(label, fn)

    for step in scenario.steps:
        if step.verb not in ("call", "read", "write"):
            continue
        scripts.setdefault(step.actor, []).append(make_call(step))
    results = run_concurrent(runner.monitor, scripts)
    issues = []
    for invariant in registered_invariants():
        issues.extend(invariant.check_state(runner.monitor))
    if not runner.monitor.guards.quiescent():
        issues.append("guards not released after the stress run")
    for actor, calls in sorted(results.items()):
        for label, outcome in calls:
            print(f"stress {actor}: {label} -> {outcome}")
    for issue in issues:
        print(f"stress violation: {issue}", file=sys.stderr)
    return 1 if issues else 0


def _cmd_measure(args) -> int:
    try:
        manifest = load_manifest(args.manifest)
    except (ManifestError, OSError) as exc:
        rule = getattr(exc, "rule", "format")
        print(f"invalid manifest ({rule}): {exc}", file=sys.stderr)
        return 2
    sm_image = DEFAULT_SM_IMAGE
    if args.sm_image_file:
        with open(args.sm_image_file, "rb") as fh:
            sm_image = fh.read()
    try:
        digest = measure(manifest, _machine_config(args), sm_image)
    except ManifestError as exc:
        print(f"invalid manifest ({exc.rule}): {exc}", file=sys.stderr)
        return 2
    print(digest.hex())
    return 0


def _cmd_verify(args) -> int:
    try:
        with open(args.bundle, "rb") as fh:
            raw = fh.read()
        bundle = AttestationBundle.from_bytes(raw)
        nonce = bytes.fromhex(args.nonce)
        measurement = bytes.fromhex(args.measurement)
        device_key = bytes.fromhex(args.device_key)
    except (OSError, ValueError) as exc:
        print(f"malformed input: {exc}", file=sys.stderr)
        return 2
    result = verify_attestation(bundle, nonce, measurement, device_key)
    if result.ok:
        print("ok")
        return 0
    print(result.reason)
    return 1


def _cmd_explore(args) -> int:
    config = _machine_config(args)
    disabled = frozenset(args.disable_check or ())
    unknown = disabled - KNOWN_CHECKS
    if unknown:
        print(f"unknown --disable-check: {sorted(unknown)}", file=sys.stderr)
        return 2
    report = exhaustive_explore(machine_config=config, max_depth=args.depth,
                                node_budget=args.budget,
                                disabled_checks=disabled,
                                stop_at_first=not args.all_violations)
    text = report.summary()
    print(text)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    if report.violations:
        os.makedirs(args.out, exist_ok=True)
        for index, violation in enumerate(report.violations):
            path = os.path.join(args.out, f"counterexample_{index}.scn")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(counterexample_scenario(violation, config, disabled))
            print(f"counterexample written to {path}")
        return 1
    if report.budget_exceeded:
        print("state-space budget exceeded", file=sys.stderr)
        return 3
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="secmon",
        description="enclave security monitor reference model")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario file")
    p_run.add_argument("scenario")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--trace-out", default=None)
    p_run.add_argument("--stress", action="store_true",
                       help="replay call steps from concurrent actor threads")
    p_run.set_defaults(fn=_cmd_run)

    p_measure = sub.add_parser("measure", help="offline enclave measurement")
    p_measure.add_argument("manifest")
    p_measure.add_argument("--sm-image-file", default=None)
    _machine_flags(p_measure)
    p_measure.set_defaults(fn=_cmd_measure)

    p_verify = sub.add_parser("verify", help="verify an attestation bundle")
    p_verify.add_argument("bundle")
    p_verify.add_argument("--nonce", required=True)
    p_verify.add_argument("--measurement", required=True)
    p_verify.add_argument("--device-key", required=True,
                          help="trusted PKI root public key (hex)")
    p_verify.set_defaults(fn=_cmd_verify)

    p_explore = sub.add_parser("explore", help="exhaustive state exploration")
    p_explore.add_argument("--depth", type=int, default=6)
    p_explore.add_argument("--budget", type=int, default=300_000)
    p_explore.add_argument("--disable-check", action="append", default=[],
                           help="fault injection for mutation testing")
    p_explore.add_argument("--all-violations", action="store_true")
    p_explore.add_argument("--out", default=".", help="counterexample directory")
    p_explore.add_argument("--report", default=None)
    _machine_flags(p_explore, default_regions=4)  # the minimal exploration config
    p_explore.set_defaults(fn=_cmd_explore)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SmError as err:
        print(f"monitor error: {err.code}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
