"""Deterministic plan interpreter standing in for the LLM orchestrator.

It fetches no prompts itself; given a parsed plan it executes the steps
across server connections, carrying taint metadata on every value and
putting each invocation through the policy engine and the consent gate
first. All cross-server data movement goes through ``ctx.results`` in
this module; servers never see each other.
"""

from __future__ import annotations

import json
import re
import sys
from dataclasses import dataclass, field
from typing import Any

from .audit import Transcript
from .manifest import canonical_json
from .transport import Connection, RemoteError, TransportError
from .wire import CONSENT_DENIED, INTERNAL_ERROR, POLICY_DENIED, ErrorObject

PLAN_OPEN = "===PLAN==="
PLAN_CLOSE = "===END PLAN==="
DIRECTIVE_RE = re.compile(r"STEP (\d+): CALL ([a-z0-9_-]+)/([a-z0-9_.]+) ARGS (.+)")
PLACEHOLDER_RE = re.compile(r"\$\{step(\d+)\.([^}]+)\}")

CONSENT_MODES = ("auto_approve", "auto_deny", "interactive", "rules")


class PlanSyntaxError(ValueError):
    """A fenced plan exists but a directive line is malformed."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class UnresolvedPlaceholder(ValueError):
    """A placeholder references a missing step or unresolvable path."""


class InteractiveUnavailable(RuntimeError):
    """Interactive consent was required but no channel can answer."""


@dataclass(frozen=True)
class Directive:
    """One plan step: which server, which tool, and an args template
    whose string leaves may reference earlier results."""

    step: int
    server_id: str
    tool: str
    args_template: dict


@dataclass(frozen=True)
class TaintedValue:
    """A JSON value plus the set of servers whose output reached it."""

    value: Any
    taints: frozenset[str] = frozenset()


@dataclass(frozen=True)
class ConsentPolicy:
    """How invocation approvals are decided.

    ``rules`` entries are (server pattern, tool pattern, decision) with
    first match winning and deny as the no-match default; patterns are
    exact names or ``*``.
    """

    mode: str
    rules: tuple[tuple[str, str, str], ...] | None = None

    def __post_init__(self):
        if self.mode not in CONSENT_MODES:
            raise ValueError(f"unknown consent mode {self.mode!r}")
        if (self.mode == "rules") != (self.rules is not None):
            raise ValueError("rules must be present exactly when mode is 'rules'")
        for rule in self.rules or ():
            if len(rule) != 3 or not all(isinstance(x, str) for x in rule):
                raise ValueError(f"bad consent rule {rule!r}")
            if rule[2] not in ("approve", "deny"):
                raise ValueError(f"consent rule decision must be approve or deny, got {rule[2]!r}")

    @staticmethod
    def from_json(obj: Any) -> "ConsentPolicy":
        if not isinstance(obj, dict):
            raise ValueError("consent must be an object")
        unknown = set(obj) - {"mode", "rules"}
        if unknown:
            raise ValueError(f"consent: unknown members {sorted(unknown)}")
        rules = obj.get("rules")
        if rules is not None:
            if not isinstance(rules, list):
                raise ValueError("consent.rules must be an array")
            rules = tuple(tuple(r) if isinstance(r, list) else r for r in rules)
        return ConsentPolicy(mode=obj.get("mode"), rules=rules)


@dataclass
class ExecutionContext:
    """Per-plan state: origin server, accumulated results, and which
    servers have already been discovered this session."""

    origin_server: str
    results: dict[int, TaintedValue] = field(default_factory=dict)
    discovered: set[str] = field(default_factory=set)
    transcript: Transcript | None = None


@dataclass(frozen=True)
class StepRecord:
    step: int
    server_id: str
    tool: str
    args: Any
    args_taints: tuple[str, ...]
    result: Any
    result_taints: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "server_id": self.server_id,
            "tool": self.tool,
            "args": self.args,
            "args_taints": list(self.args_taints),
            "result": self.result,
            "result_taints": list(self.result_taints),
        }


@dataclass
class PlanOutcome:
    """How a plan ended: completed, blocked(step, reason), or
    failed(step, error); ``steps`` holds the records of what did run."""

    status: str
    step: int | None = None
    reason: str | None = None
    rule: str | None = None
    error: ErrorObject | None = None
    steps: list[StepRecord] = field(default_factory=list)

    def to_json(self) -> dict:
        obj: dict[str, Any] = {"status": self.status}
        if self.step is not None:
            obj["step"] = self.step
        if self.reason is not None:
            obj["reason"] = self.reason
        if self.rule is not None:
            obj["rule"] = self.rule
        if self.error is not None:
            obj["error"] = self.error.to_json()
        obj["steps"] = [s.to_json() for s in self.steps]
        return obj


# -- plan parsing -----------------------------------------------------------


def _placeholder_steps(node: Any) -> set[int]:
    refs: set[int] = set()
    if isinstance(node, str):
        refs.update(int(m.group(1)) for m in PLACEHOLDER_RE.finditer(node))
    elif isinstance(node, dict):
        for v in node.values():
            refs.update(_placeholder_steps(v))
    elif isinstance(node, list):
        for v in node:
            refs.update(_placeholder_steps(v))
    return refs


def parse_directives(prompt_text: str) -> list[Directive]:
    """Extract the fenced plan, if any, from prompt text.

    No fence means a benign prompt: the plan is empty. A fence with a
    malformed line, out-of-order steps, a forward reference, or a missing
    closing fence is a PlanSyntaxError.
    """
    lines = prompt_text.splitlines()
    open_index = None
    for i, line in enumerate(lines):
        if line.strip() == PLAN_OPEN:
            open_index = i
            break
    if open_index is None:
        return []

    directives: list[Directive] = []
    last_step = 0
    closed = False
    for line_no, line in enumerate(lines[open_index + 1:], start=open_index + 2):
        text = line.strip()
        if text == PLAN_CLOSE:
            closed = True
            break
        if not text:
            continue
        match = DIRECTIVE_RE.fullmatch(text)
        if match is None:
            raise PlanSyntaxError(
                f"expected 'STEP <n>: CALL <server>/<tool> ARGS <json-object>', got {text!r}",
                line_no,
            )
        step = int(match.group(1))
        if step <= last_step:
            raise PlanSyntaxError(f"step {step} is not after step {last_step}", line_no)
        try:
            args = json.loads(match.group(4))
        except json.JSONDecodeError as exc:
            raise PlanSyntaxError(f"ARGS is not valid JSON: {exc}", line_no)
        if not isinstance(args, dict):
            raise PlanSyntaxError("ARGS must be a JSON object", line_no)
        for ref in sorted(_placeholder_steps(args)):
            if ref >= step:
                raise PlanSyntaxError(
                    f"placeholder references step {ref}, which is not earlier than step {step}",
                    line_no,
                )
        directives.append(Directive(step, match.group(2), match.group(3), args))
        last_step = step
    if not closed:
        raise PlanSyntaxError(f"missing {PLAN_CLOSE}", len(lines))
    return directives


# -- substitution -----------------------------------------------------------


def substitute(args_template: Any, results: dict[int, TaintedValue]) -> TaintedValue:
    """Resolve placeholders against earlier results.

    A string that is exactly one placeholder becomes the referenced JSON
    value itself; placeholders embedded in longer strings interpolate as
    text. The output's taints are the union over every referenced result.
    """
    taints: set[str] = set()

    def resolve(step: int, path: str, token: str) -> Any:
        if step not in results:
            raise UnresolvedPlaceholder(f"{token}: no result for step {step}")
        tainted = results[step]
        node = tainted.value
        for part in path.split("."):
            if isinstance(node, dict) and part in node:
                node = node[part]
            elif isinstance(node, list) and part.isdigit() and int(part) < len(node):
                node = node[int(part)]
            else:
                raise UnresolvedPlaceholder(f"{token}: path {path!r} does not resolve")
        taints.update(tainted.taints)
        return node

    def walk(node: Any) -> Any:
        if isinstance(node, str):
            whole = PLACEHOLDER_RE.fullmatch(node)
            if whole is not None:
                return resolve(int(whole.group(1)), whole.group(2), node)

            def interpolate(m: re.Match) -> str:
                value = resolve(int(m.group(1)), m.group(2), m.group(0))
                return value if isinstance(value, str) else canonical_json(value)

            return PLACEHOLDER_RE.sub(interpolate, node)
        if isinstance(node, dict):
            return {k: walk(v) for k, v in node.items()}
        if isinstance(node, list):
            return [walk(v) for v in node]
        return node

    value = walk(args_template)
    return TaintedValue(value, frozenset(taints))


# -- consent ----------------------------------------------------------------


class ScriptedAnswers:
    """Consent channel answering from a fixed list, for tests and the
    --answers flag; running out of answers is an error, not a default."""

    def __init__(self, answers: list[str]):
        self._answers = list(answers)
        self.prompts: list[str] = []

    def ask(self, prompt: str) -> str:
        self.prompts.append(prompt)
        if not self._answers:
            raise InteractiveUnavailable("scripted consent answers exhausted")
        return self._answers.pop(0)


class TerminalChannel:
    """Line-oriented y/n consent on the controlling terminal."""

    def ask(self, prompt: str) -> str:
        sys.stderr.write(prompt + " [y/n] ")
        sys.stderr.flush()
        line = sys.stdin.readline()
        if line == "":
            raise InteractiveUnavailable("stdin closed during interactive consent")
        return line.strip()


def consent_prompt_line(server_id: str, tool: str, args: Any, taints) -> str:
    return (
        f"APPROVE? {server_id}/{tool} "
        f"args={canonical_json(args)} taints={json.dumps(sorted(taints))}"
    )


def consent_decide(
    policy: ConsentPolicy,
    server_id: str,
    tool: str,
    args: Any = None,
    taints: frozenset = frozenset(),
    channel=None,
) -> str:
    """Decide one invocation: returns "approve" or "deny"."""
    if policy.mode == "auto_approve":
        return "approve"
    if policy.mode == "auto_deny":
        return "deny"
    if policy.mode == "rules":
        for server_pattern, tool_pattern, decision in policy.rules:
            if _pattern_match(server_pattern, server_id) and _pattern_match(tool_pattern, tool):
                return decision
        return "deny"
    if channel is None:
        raise InteractiveUnavailable("interactive consent requires a terminal channel")
    answer = channel.ask(consent_prompt_line(server_id, tool, args if args is not None else {}, taints))
    return "approve" if answer.strip().lower() in ("y", "yes") else "deny"


def _pattern_match(pattern: str, value: str) -> bool:
    return pattern == "*" or pattern == value


# -- execution --------------------------------------------------------------


def execute_plan(
    directives: list[Directive],
    connections: dict[str, Connection],
    consent: ConsentPolicy,
    policy_engine,
    ctx: ExecutionContext,
    channel=None,
) -> PlanOutcome:
    """Run a plan to completion, denial, or failure.

    Per step: implicit consent-gated tools/list discovery on first contact
    with a server, then substitution, then the policy verdict, then the
    consent gate, then the tools/call itself. A denial halts the whole
    plan; later steps may reference the denied step's result, so skipping
    is not an option.
    """
    steps: list[StepRecord] = []

    def emit(kind: str, payload: dict) -> None:
        if ctx.transcript is not None:
            ctx.transcript.append(kind, payload)

    def finish(outcome: PlanOutcome) -> PlanOutcome:
        payload = {"origin": ctx.origin_server}
        payload.update(outcome.to_json())
        emit("plan_outcome", payload)
        return outcome

    def blocked(step: int, reason: str, rule: str, detail: str) -> PlanOutcome:
        code = POLICY_DENIED if reason == "policy" else CONSENT_DENIED
        error = ErrorObject(code=code, message=detail, data={"step": step, "rule": rule})
        return PlanOutcome("blocked", step=step, reason=reason, rule=rule, error=error, steps=steps)

    def failed(step: int, error: ErrorObject) -> PlanOutcome:
        return PlanOutcome("failed", step=step, error=error, steps=steps)

    for directive in directives:
        connection = connections.get(directive.server_id)
        if connection is None:
            return finish(failed(
                directive.step,
                ErrorObject(INTERNAL_ERROR, f"no connection to server {directive.server_id!r}"),
            ))

        if directive.server_id not in ctx.discovered:
            decision = consent_decide(
                consent, directive.server_id, "tools/list", {}, frozenset(), channel
            )
            emit("consent_decision", {
                "gate": "discovery",
                "step": directive.step,
                "server_id": directive.server_id,
                "tool": "tools/list",
                "mode": consent.mode,
                "decision": decision,
            })
            if decision != "approve":
                return finish(blocked(
                    directive.step, "consent", "consent",
                    f"user denied discovery of {directive.server_id}",
                ))
            try:
                listing = connection.request("tools/list")
            except RemoteError as exc:
                return finish(failed(directive.step, exc.error))
            except TransportError as exc:
                return finish(failed(directive.step, ErrorObject(INTERNAL_ERROR, str(exc))))
            ctx.discovered.add(directive.server_id)
            tool_names = [t.get("name") for t in listing.get("tools", [])]
            emit("discovery", {"server_id": directive.server_id, "tools": tool_names})

        try:
            resolved = substitute(directive.args_template, ctx.results)
        except UnresolvedPlaceholder as exc:
            return finish(failed(directive.step, ErrorObject(INTERNAL_ERROR, str(exc))))

        verdict = policy_engine.evaluate(
            origin=ctx.origin_server,
            target=directive.server_id,
            tool=directive.tool,
            args_taints=resolved.taints,
        )
        emit("policy_verdict", {
            "step": directive.step,
            "origin": ctx.origin_server,
            "target": directive.server_id,
            "tool": directive.tool,
            "args_taints": sorted(resolved.taints),
            "decision": verdict.decision,
            "rule": verdict.rule,
            "detail": verdict.detail,
        })
        if verdict.decision != "allow":
            return finish(blocked(directive.step, "policy", verdict.rule, verdict.detail))

        decision = consent_decide(
            consent, directive.server_id, directive.tool, resolved.value, resolved.taints, channel
        )
        emit("consent_decision", {
            "gate": "call",
            "step": directive.step,
            "server_id": directive.server_id,
            "tool": directive.tool,
            "mode": consent.mode,
            "decision": decision,
        })
        if decision != "approve":
            return finish(blocked(
                directive.step, "consent", "consent",
                f"user denied {directive.server_id}/{directive.tool}",
            ))

        try:
            result = connection.request(
                "tools/call", {"name": directive.tool, "arguments": resolved.value}
            )
        except RemoteError as exc:
            return finish(failed(directive.step, exc.error))
        except TransportError as exc:
            return finish(failed(directive.step, ErrorObject(INTERNAL_ERROR, str(exc))))

        content = result.get("content") if isinstance(result, dict) else result
        tainted = TaintedValue(content, resolved.taints | {directive.server_id})
        ctx.results[directive.step] = tainted
        steps.append(StepRecord(
            step=directive.step,
            server_id=directive.server_id,
            tool=directive.tool,
            args=resolved.value,
            args_taints=tuple(sorted(resolved.taints)),
            result=content,
            result_taints=tuple(sorted(tainted.taints)),
        ))

    return finish(PlanOutcome("completed", steps=steps))
