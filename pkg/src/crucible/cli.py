"""Command-line interface.

Exit codes: 0 the run ended SECURE, 3 it ended EXFILTRATED, 1 usage
error, 2 runtime failure. The --as-server flag turns this process into
one of the built-in servers speaking the wire protocol on stdio; that is
how subprocess transport spawns them.
"""

from __future__ import annotations

import argparse
import json
import sys
import threading
from dataclasses import replace

from .manifest import ServerManifest
from .policy import sign_manifest
from .runner import (
    EXIT_RUNTIME,
    EXIT_USAGE,
    ScenarioError,
    load_scenario,
    run_scenario,
    shipped_scenarios,
)
from .servers import BUILTIN_KINDS, server_main
from .sink import BindError, CaptureSink

MITIGATION_CHOICES = ("none", "capabilities", "boundaries", "attestation", "all")
CONSENT_CHOICES = ("auto_approve", "auto_deny", "interactive")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this testbed reserves 2 for
    runtime failures, so usage errors exit 1 instead."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="crucible", description="Cross-server MCP attack and mitigation testbed.")
    sub = parser.add_subparsers(dest="cmd")

    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("scenario", help="path to a scenario JSON file, or a shipped scenario name")
    run.add_argument("--consent", choices=CONSENT_CHOICES, help="override the scenario's consent mode")
    run.add_argument("--mitigations", choices=MITIGATION_CHOICES,
                     help="override which mitigations are enabled")
    run.add_argument("--transcript", metavar="OUT.JSONL", help="write the audit transcript here")
    run.add_argument("--answers", metavar="FILE",
                     help="scripted y/n answers for interactive consent, one per line")

    sign = sub.add_parser("sign-manifest", help="attach an HMAC signature to a manifest")
    sign.add_argument("manifest", help="path to a manifest JSON file")
    sign.add_argument("--key", required=True, metavar="HEX", help="publisher key as hex")

    serve = sub.add_parser("serve-sink", help="run the capture sink standalone")
    serve.add_argument("--port", type=int, default=0, help="listen port (0 = ephemeral)")

    sub.add_parser("list-scenarios", help="list the shipped scenario files")
    return parser


def _apply_mitigations(policy, choice: str):
    if choice == "all":
        enabled = {"capabilities", "boundaries", "attestation"}
    elif choice == "none":
        enabled = set()
    else:
        enabled = {choice}
    return replace(
        policy,
        enable_capabilities="capabilities" in enabled,
        enable_boundaries="boundaries" in enabled,
        enable_attestation="attestation" in enabled,
    )


def _cmd_run(args) -> int:
    path = args.scenario
    shipped = shipped_scenarios()
    if path in shipped:
        path = shipped[path]
    try:
        scenario = load_scenario(path)
    except (ScenarioError, OSError) as exc:
        print(f"cannot load scenario: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    if args.mitigations:
        scenario = replace(scenario, policy=_apply_mitigations(scenario.policy, args.mitigations))
    if args.consent:
        from .agent import ConsentPolicy

        scenario = replace(scenario, consent=ConsentPolicy(mode=args.consent))

    answers = None
    if args.answers:
        try:
            with open(args.answers, "r", encoding="utf-8") as f:
                answers = [line.strip() for line in f if line.strip()]
        except OSError as exc:
            print(f"cannot read answers file: {exc}", file=sys.stderr)
            return EXIT_RUNTIME

    report = run_scenario(scenario, answers=answers)

    if args.transcript:
        try:
            with open(args.transcript, "w", encoding="utf-8") as f:
                for event in report.events:
                    f.write(json.dumps(event.to_json(), ensure_ascii=False, separators=(",", ":")) + "\n")
        except OSError as exc:
            print(f"cannot write transcript: {exc}", file=sys.stderr)
            return EXIT_RUNTIME

    print(json.dumps(report.summary(), indent=2))
    if report.error:
        print(f"run aborted: {report.error}", file=sys.stderr)
    return report.exit_code


def _cmd_sign_manifest(args) -> int:
    try:
        bytes.fromhex(args.key)
    except ValueError:
        print("--key must be a hex string", file=sys.stderr)
        return EXIT_USAGE
    try:
        with open(args.manifest, "r", encoding="utf-8") as f:
            manifest = ServerManifest.from_json(json.load(f))
    except (OSError, ValueError) as exc:
        print(f"cannot load manifest: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    signed = sign_manifest(manifest.with_signature(None), args.key)
    print(json.dumps(signed.to_json(), indent=2))
    return 0


def _cmd_serve_sink(args) -> int:
    def on_capture(capture):
        print(json.dumps(capture.to_json(), ensure_ascii=False), flush=True)

    try:
        sink = CaptureSink(port=args.port, on_capture=on_capture)
    except BindError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_RUNTIME
    print(f"capture sink listening on {sink.url}", file=sys.stderr)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        sink.stop()
    return 0


def _cmd_list_scenarios(args) -> int:
    for name, path in shipped_scenarios().items():
        print(f"{name}\t{path}")
    return 0


def entry(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # Server mode bypasses the subcommand parser: the spawned child must
    # never mistake server flags for runner flags.
    if argv[:1] == ["--as-server"]:
        if len(argv) != 2 or argv[1] not in BUILTIN_KINDS:
            print(f"--as-server requires one of {BUILTIN_KINDS}", file=sys.stderr)
            return EXIT_USAGE
        return server_main(argv[1])

    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.cmd == "run":
        return _cmd_run(args)
    if args.cmd == "sign-manifest":
        return _cmd_sign_manifest(args)
    if args.cmd == "serve-sink":
        return _cmd_serve_sink(args)
    if args.cmd == "list-scenarios":
        return _cmd_list_scenarios(args)
    parser.print_help()
    return EXIT_USAGE


def main() -> None:
    sys.exit(entry())
