"""Scenario loading, topology bring-up, plan execution, and verdicts.

A scenario file declares the servers (and how to run them), the policy
and consent configuration, the sink, and a user script. Running one
produces a RunReport: the full audit transcript, the sink's captures,
and an EXFILTRATED/SECURE verdict computed from observables.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, replace
from importlib.resources import files
from typing import Any

from .agent import (
    ConsentPolicy,
    ExecutionContext,
    InteractiveUnavailable,
    PlanSyntaxError,
    ScriptedAnswers,
    TerminalChannel,
    consent_decide,
    execute_plan,
    parse_directives,
)
from .audit import Transcript
from .manifest import ManifestError, ServerManifest, canonical_json
from .policy import PolicyConfig, PolicyEngine
from .servers import BUILTIN_KINDS, build_server
from .sink import BindError, CaptureSink, SinkCapture
from .transport import Connection, SpawnError, TransportError, loopback_pair, spawn_server
from .wire import INTERNAL_ERROR, envelope_to_obj

TRANSPORTS = ("subprocess", "loopback")

VERDICT_EXFILTRATED = "EXFILTRATED"
VERDICT_SECURE = "SECURE"

EXIT_SECURE = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_EXFILTRATED = 3


class ScenarioError(ValueError):
    """Scenario JSON violates the schema; message carries the JSON path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class RunAborted(RuntimeError):
    """A fatal setup or script failure; the run has no verdict."""


@dataclass(frozen=True)
class ServerSpec:
    server_id: str
    builtin: str | None = None
    command: tuple[str, ...] | None = None
    transport: str = "subprocess"
    fixture: str | None = None
    manifest: dict | None = None
    publisher: str | None = None


@dataclass(frozen=True)
class SinkSpec:
    enabled: bool = True
    port: int = 0


@dataclass(frozen=True)
class ScriptAction:
    action: str  # get_prompt | call_tool
    server_id: str
    name: str
    args: dict


@dataclass(frozen=True)
class Scenario:
    name: str
    servers: tuple[ServerSpec, ...]
    policy: PolicyConfig
    consent: ConsentPolicy
    sink: SinkSpec
    script: tuple[ScriptAction, ...]


@dataclass
class RunReport:
    scenario_name: str
    events: list
    captures: list[SinkCapture]
    verdict: str | None
    blocked_by: dict | None = None
    error: str | None = None

    @property
    def exit_code(self) -> int:
        if self.verdict == VERDICT_EXFILTRATED:
            return EXIT_EXFILTRATED
        if self.verdict == VERDICT_SECURE:
            return EXIT_SECURE
        return EXIT_RUNTIME

    def summary(self) -> dict:
        return {
            "scenario": self.scenario_name,
            "verdict": self.verdict,
            "blocked_by": self.blocked_by,
            "captures": len(self.captures),
            "events": len(self.events),
            "error": self.error,
            "exit_code": self.exit_code,
        }


# -- scenario loading ---------------------------------------------------------


def _require(obj: dict, key: str, kind, path: str):
    if key not in obj:
        raise ScenarioError(f"{path}.{key}", "missing required field")
    value = obj[key]
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ScenarioError(f"{path}.{key}", f"expected {kind.__name__}")
    return value


def _parse_server(obj: Any, path: str) -> ServerSpec:
    if not isinstance(obj, dict):
        raise ScenarioError(path, "server entry must be an object")
    unknown = set(obj) - {"server_id", "builtin", "command", "transport", "fixture", "manifest", "publisher"}
    if unknown:
        raise ScenarioError(path, f"unknown members {sorted(unknown)}")
    server_id = _require(obj, "server_id", str, path)
    builtin = obj.get("builtin")
    command = obj.get("command")
    if (builtin is None) == (command is None):
        raise ScenarioError(path, "exactly one of 'builtin' or 'command' is required")
    if builtin is not None and builtin not in BUILTIN_KINDS:
        raise ScenarioError(f"{path}.builtin", f"unknown builtin {builtin!r}; have {BUILTIN_KINDS}")
    if command is not None:
        if not isinstance(command, list) or not command or not all(isinstance(x, str) for x in command):
            raise ScenarioError(f"{path}.command", "must be a non-empty array of strings")
        command = tuple(command)
    transport = obj.get("transport", "subprocess")
    if transport not in TRANSPORTS:
        raise ScenarioError(f"{path}.transport", f"must be one of {TRANSPORTS}")
    if transport == "loopback" and builtin is None:
        raise ScenarioError(f"{path}.transport", "loopback requires a builtin server")
    fixture = obj.get("fixture")
    if fixture is not None and not isinstance(fixture, str):
        raise ScenarioError(f"{path}.fixture", "must be a path string")
    manifest = obj.get("manifest")
    if manifest is not None:
        try:
            ServerManifest.from_json(manifest)
        except ManifestError as exc:
            raise ScenarioError(f"{path}.manifest", str(exc))
    publisher = obj.get("publisher")
    if publisher is not None and not isinstance(publisher, str):
        raise ScenarioError(f"{path}.publisher", "must be a string")
    return ServerSpec(
        server_id=server_id,
        builtin=builtin,
        command=command,
        transport=transport,
        fixture=fixture,
        manifest=manifest,
        publisher=publisher,
    )


def _parse_action(obj: Any, path: str, server_ids: set[str]) -> ScriptAction:
    if not isinstance(obj, dict):
        raise ScenarioError(path, "script entry must be an object")
    action = _require(obj, "action", str, path)
    if action not in ("get_prompt", "call_tool"):
        raise ScenarioError(f"{path}.action", "must be get_prompt or call_tool")
    server_id = _require(obj, "server_id", str, path)
    if server_id not in server_ids:
        raise ScenarioError(f"{path}.server_id", f"references undeclared server {server_id!r}")
    name_key = "prompt" if action == "get_prompt" else "tool"
    unknown = set(obj) - {"action", "server_id", name_key, "args"}
    if unknown:
        raise ScenarioError(path, f"unknown members {sorted(unknown)}")
    name = _require(obj, name_key, str, path)
    args = obj.get("args", {})
    if not isinstance(args, dict):
        raise ScenarioError(f"{path}.args", "must be an object")
    return ScriptAction(action=action, server_id=server_id, name=name, args=args)


def parse_scenario(obj: Any, base_dir: str | None = None) -> Scenario:
    """Validate scenario JSON; fixture paths resolve relative to base_dir."""
    if not isinstance(obj, dict):
        raise ScenarioError("$", "scenario must be a JSON object")
    unknown = set(obj) - {"name", "servers", "policy", "consent", "sink", "script"}
    if unknown:
        raise ScenarioError("$", f"unknown top-level keys {sorted(unknown)}")
    name = _require(obj, "name", str, "$")

    servers_raw = _require(obj, "servers", list, "$")
    servers = tuple(_parse_server(s, f"servers[{i}]") for i, s in enumerate(servers_raw))
    seen: set[str] = set()
    for i, spec in enumerate(servers):
        if spec.server_id in seen:
            raise ScenarioError(f"servers[{i}].server_id", f"duplicate server_id {spec.server_id!r}")
        seen.add(spec.server_id)

    if base_dir:
        resolved = []
        for spec in servers:
            if spec.fixture is not None and not os.path.isabs(spec.fixture):
                spec = replace(spec, fixture=os.path.join(base_dir, spec.fixture))
            resolved.append(spec)
        servers = tuple(resolved)

    try:
        policy = PolicyConfig.from_json(obj.get("policy", {}), "policy")
    except ValueError as exc:
        raise ScenarioError("policy", str(exc))
    try:
        consent = ConsentPolicy.from_json(obj.get("consent", {"mode": "interactive"}))
    except ValueError as exc:
        raise ScenarioError("consent", str(exc))

    sink_raw = obj.get("sink", {"enabled": True, "port": 0})
    if not isinstance(sink_raw, dict):
        raise ScenarioError("sink", "must be an object")
    if set(sink_raw) - {"enabled", "port"}:
        raise ScenarioError("sink", f"unknown members {sorted(set(sink_raw) - {'enabled', 'port'})}")
    enabled = sink_raw.get("enabled", True)
    port = sink_raw.get("port", 0)
    if not isinstance(enabled, bool):
        raise ScenarioError("sink.enabled", "must be a boolean")
    if not isinstance(port, int) or isinstance(port, bool) or not (0 <= port <= 65535):
        raise ScenarioError("sink.port", "must be an integer in 0..65535")
    sink = SinkSpec(enabled=enabled, port=port)

    script_raw = _require(obj, "script", list, "$")
    script = tuple(
        _parse_action(a, f"script[{i}]", seen) for i, a in enumerate(script_raw)
    )
    return Scenario(name=name, servers=servers, policy=policy, consent=consent, sink=sink, script=script)


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as exc:
            raise ScenarioError("$", f"not valid JSON: {exc}")
    return parse_scenario(obj, base_dir=os.path.dirname(os.path.abspath(path)))


def shipped_scenarios() -> dict[str, str]:
    """Name → path of the scenario files shipped inside the package."""
    out = {}
    directory = files("crucible").joinpath("scenarios")
    for entry in sorted(directory.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".json"):
            out[entry.name[: -len(".json")]] = str(entry)
    return out


# -- manifest resolution --------------------------------------------------------


def resolve_manifest(spec: ServerSpec) -> ServerManifest:
    """The manifest this server is expected to present at initialize."""
    if spec.manifest is not None:
        return ServerManifest.from_json(spec.manifest)
    if spec.builtin is None:
        raise ScenarioError(
            f"server {spec.server_id}", "command servers need an explicit manifest"
        )
    if spec.builtin == "weather":
        from .servers.weather import default_manifest
    else:
        from .servers.banking import default_manifest
    manifest = default_manifest(spec.server_id)
    if spec.publisher is not None:
        manifest = replace(manifest, publisher=spec.publisher)
    return manifest


# -- run ------------------------------------------------------------------------


def _start_server(
    spec: ServerSpec, manifest: ServerManifest, sink_url: str | None, on_message
) -> Connection:
    if spec.transport == "loopback":
        server = build_server(
            spec.builtin,
            server_id=spec.server_id,
            fixture_path=spec.fixture,
            sink_url=sink_url,
            manifest_json=manifest.to_json(),
        )
        connection, _task = loopback_pair(server.serve, spec.server_id, on_message)
        return connection
    env = {
        "CRUCIBLE_SERVER_ID": spec.server_id,
        "CRUCIBLE_MANIFEST": canonical_json(manifest.to_json()),
    }
    if sink_url:
        env["CRUCIBLE_SINK_URL"] = sink_url
    if spec.fixture:
        env["CRUCIBLE_FIXTURE"] = spec.fixture
    command = list(spec.command) if spec.command else [
        sys.executable, "-m", "crucible", "--as-server", spec.builtin
    ]
    return spawn_server(command, spec.server_id, env=env, on_message=on_message)


def run_scenario(
    scenario: Scenario,
    answers: list[str] | None = None,
) -> RunReport:
    """Bring the topology up, drive the script, tear down, and judge.

    Fatal setup failures produce a report with the events collected so
    far and no verdict (exit code 2); script-level denials are normal
    outcomes, not failures.
    """
    transcript = Transcript()

    def on_message(direction: str, server_id: str, envelope) -> None:
        transcript.append(
            "message_out" if direction == "out" else "message_in",
            {"server_id": server_id, "envelope": envelope_to_obj(envelope)},
        )

    sink: CaptureSink | None = None
    connections: dict[str, Connection] = {}

    def abort(message: str) -> RunReport:
        return RunReport(
            scenario_name=scenario.name,
            events=transcript.events(),
            captures=sink.captures() if sink else [],
            verdict=None,
            error=message,
        )

    def teardown() -> list[SinkCapture]:
        for connection in connections.values():
            connection.close()
        captures: list[SinkCapture] = []
        if sink is not None:
            sink.stop()
            captures = sink.captures()
            for capture in captures:
                transcript.append("sink_capture", capture.to_json())
        return captures

    # 1. sink
    if scenario.sink.enabled:
        try:
            sink = CaptureSink(port=scenario.sink.port)
        except BindError as exc:
            return abort(str(exc))
    sink_url = sink.url if sink else None

    # 2. servers
    try:
        manifests = {spec.server_id: resolve_manifest(spec) for spec in scenario.servers}
    except (ScenarioError, ManifestError) as exc:
        teardown()
        return abort(str(exc))
    try:
        for spec in scenario.servers:
            connections[spec.server_id] = _start_server(
                spec, manifests[spec.server_id], sink_url, on_message
            )
        for spec in scenario.servers:
            presented = connections[spec.server_id].initialize()
            declared = manifests[spec.server_id]
            if presented.to_json() != declared.to_json():
                raise RunAborted(
                    f"server {spec.server_id} presented a manifest that differs from the scenario's"
                )
    except (SpawnError, TransportError, RunAborted, ManifestError) as exc:
        teardown()
        return abort(str(exc))

    engine = PolicyEngine(scenario.policy, manifests)
    channel = None
    if scenario.consent.mode == "interactive":
        channel = ScriptedAnswers(answers) if answers is not None else TerminalChannel()

    blocked_by: dict | None = None

    # 3. script
    try:
        for action in scenario.script:
            connection = connections[action.server_id]
            if action.action == "get_prompt":
                result = connection.request(
                    "prompts/get", {"name": action.name, "arguments": action.args}
                )
                text = result.get("text", "") if isinstance(result, dict) else ""
                try:
                    directives = parse_directives(text)
                except PlanSyntaxError as exc:
                    transcript.append("plan_outcome", {
                        "origin": action.server_id,
                        "status": "failed",
                        "error": {"code": INTERNAL_ERROR, "message": f"unparseable plan: {exc}"},
                        "steps": [],
                    })
                    continue
                ctx = ExecutionContext(
                    origin_server=action.server_id,
                    discovered={action.server_id},
                    transcript=transcript,
                )
                outcome = execute_plan(
                    directives, connections, scenario.consent, engine, ctx, channel
                )
                if outcome.status == "blocked" and blocked_by is None:
                    blocked_by = {"step": outcome.step, "rule": outcome.rule}
            else:  # call_tool issued directly by the user
                verdict = engine.evaluate(
                    origin=action.server_id,
                    target=action.server_id,
                    tool=action.name,
                    args_taints=frozenset(),
                )
                transcript.append("policy_verdict", {
                    "step": None,
                    "origin": action.server_id,
                    "target": action.server_id,
                    "tool": action.name,
                    "args_taints": [],
                    "decision": verdict.decision,
                    "rule": verdict.rule,
                    "detail": verdict.detail,
                })
                if verdict.decision != "allow":
                    continue
                decision = consent_decide(
                    scenario.consent, action.server_id, action.name,
                    action.args, frozenset(), channel,
                )
                transcript.append("consent_decision", {
                    "gate": "call",
                    "step": None,
                    "server_id": action.server_id,
                    "tool": action.name,
                    "mode": scenario.consent.mode,
                    "decision": decision,
                })
                if decision != "approve":
                    continue
                connection.request(
                    "tools/call", {"name": action.name, "arguments": action.args}
                )
    except (TransportError, InteractiveUnavailable) as exc:
        teardown()
        return abort(str(exc))

    # 4. teardown and verdict
    captures = teardown()
    events = transcript.events()
    verdict = compute_verdict(events, captures, scenario.policy)
    return RunReport(
        scenario_name=scenario.name,
        events=events,
        captures=captures,
        verdict=verdict,
        blocked_by=blocked_by,
    )


# -- verdict --------------------------------------------------------------------


def _json_nodes(value: Any):
    yield value
    if isinstance(value, dict):
        for v in value.values():
            yield from _json_nodes(v)
    elif isinstance(value, list):
        for v in value:
            yield from _json_nodes(v)


def compute_verdict(events, captures, config: PolicyConfig) -> str:
    """EXFILTRATED iff a capture contains a transcript-recorded value
    tainted by a sensitive server (or any non-origin server when none is
    configured); containment is node-level canonical-JSON equality."""
    tainted_nodes: set[str] = set()
    for event in events:
        obj = event.to_json() if hasattr(event, "to_json") else event
        if obj.get("kind") != "plan_outcome":
            continue
        payload = obj.get("payload", {})
        origin = payload.get("origin")
        for step in payload.get("steps", []):
            taints = set(step.get("result_taints", []))
            if config.sensitive_servers:
                qualifying = taints & config.sensitive_servers
            else:
                qualifying = taints - {origin}
            if not qualifying:
                continue
            for node in _json_nodes(step.get("result")):
                tainted_nodes.add(canonical_json(node))
    if not tainted_nodes:
        return VERDICT_SECURE
    for capture in captures:
        obj = capture.to_json() if hasattr(capture, "to_json") else capture
        if "body_json" not in obj:
            continue
        for node in _json_nodes(obj["body_json"]):
            if canonical_json(node) in tainted_nodes:
                return VERDICT_EXFILTRATED
    return VERDICT_SECURE
