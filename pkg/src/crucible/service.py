"""The MCP method layer a server speaks: handshake, discovery, invocation.

Methods are fixed: initialize, tools/list, tools/call, prompts/list,
prompts/get. Request handling on a connection is strictly sequential and
the handler registry is immutable after construction.
"""

from __future__ import annotations

import json
import logging
from typing import Any, Callable

from .manifest import ServerManifest
from .wire import (
    CONSENT_DENIED,
    INTERNAL_ERROR,
    INVALID_PARAMS,
    INVALID_REQUEST,
    METHOD_NOT_FOUND,
    Envelope,
    EndOfStream,
    ErrorObject,
    WireError,
    decode,
    encode,
    read_frame,
)

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = "crucible/1"

ToolHandler = Callable[[dict], Any]
PromptHandler = Callable[[dict], str]


class MethodError(Exception):
    """Raised by dispatch or a handler; becomes an error response."""

    def __init__(self, code: int, message: str, data: Any = None):
        super().__init__(message)
        self.code = code
        self.message = message
        self.data = data

    def to_error(self) -> ErrorObject:
        return ErrorObject(code=self.code, message=self.message, data=self.data)


def render_template(template: str, args: dict) -> str:
    """Plain ``{name}`` substitution with no escaping.

    Only the provided arg names are replaced; all other braces (JSON
    literals, for instance) pass through untouched.
    """
    out = template
    for name, value in args.items():
        text = value if isinstance(value, str) else json.dumps(value)
        out = out.replace("{" + name + "}", text)
    return out


def _validate_args(schema: dict[str, dict], args: Any) -> dict:
    if not isinstance(args, dict):
        raise MethodError(INVALID_PARAMS, "arguments must be an object")
    unknown = set(args) - set(schema)
    if unknown:
        raise MethodError(INVALID_PARAMS, f"unknown arguments: {sorted(unknown)}")
    for pname, spec in schema.items():
        if pname not in args:
            if spec["required"]:
                raise MethodError(INVALID_PARAMS, f"missing required argument '{pname}'")
            continue
        value = args[pname]
        expected = spec["type"]
        ok = (
            (expected == "string" and isinstance(value, str))
            or (expected == "number" and isinstance(value, (int, float)) and not isinstance(value, bool))
            or (expected == "object" and isinstance(value, dict))
        )
        if not ok:
            raise MethodError(INVALID_PARAMS, f"argument '{pname}' must be a {expected}")
    return args


class McpServer:
    """One server endpoint: a manifest plus the handlers behind it.

    The registry must cover exactly the names the manifest advertises, so
    everything invocable is discoverable and vice versa.
    """

    def __init__(
        self,
        manifest: ServerManifest,
        tool_handlers: dict[str, ToolHandler],
        prompt_handlers: dict[str, PromptHandler] | None = None,
    ):
        manifest.validate()
        prompt_handlers = prompt_handlers or {}
        declared_tools = {t.name for t in manifest.tools}
        if declared_tools != set(tool_handlers):
            raise ValueError(
                f"manifest tools {sorted(declared_tools)} != handlers {sorted(tool_handlers)}"
            )
        declared_prompts = {p.name for p in manifest.prompts}
        if declared_prompts != set(prompt_handlers):
            raise ValueError(
                f"manifest prompts {sorted(declared_prompts)} != handlers {sorted(prompt_handlers)}"
            )
        self.manifest = manifest
        self._tools = dict(tool_handlers)
        self._prompts = dict(prompt_handlers)
        self._initialized = False

    # -- method implementations -------------------------------------------

    def handle_initialize(self, params: Any) -> dict:
        if self._initialized:
            raise MethodError(INVALID_REQUEST, "connection already initialized")
        self._initialized = True
        # Unknown params members are ignored: the handshake is tolerant.
        return {"protocol_version": PROTOCOL_VERSION, "manifest": self.manifest.to_json()}

    def list_tools(self) -> list[dict]:
        return [t.to_json() for t in self.manifest.tools]

    def list_prompts(self) -> list[dict]:
        return [p.to_json() for p in self.manifest.prompts]

    def call_tool(self, name: Any, args: Any) -> Any:
        if not isinstance(name, str) or name not in self._tools:
            raise MethodError(METHOD_NOT_FOUND, f"unknown tool {name!r}")
        descriptor = self.manifest.tool(name)
        return self._tools[name](_validate_args(descriptor.params_schema, args))

    def get_prompt(self, name: Any, args: Any) -> str:
        if not isinstance(name, str) or name not in self._prompts:
            raise MethodError(METHOD_NOT_FOUND, f"unknown prompt {name!r}")
        descriptor = self.manifest.prompt(name)
        return self._prompts[name](_validate_args(descriptor.params_schema, args))

    # -- dispatch ----------------------------------------------------------

    def _dispatch(self, method: str, params: Any) -> Any:
        if method == "initialize":
            return self.handle_initialize(params)
        if not self._initialized:
            raise MethodError(INVALID_REQUEST, "connection not initialized")
        if method == "tools/list":
            return {"tools": self.list_tools()}
        if method == "prompts/list":
            return {"prompts": self.list_prompts()}
        if method == "tools/call":
            if not isinstance(params, dict):
                raise MethodError(INVALID_PARAMS, "params must be an object")
            return {"content": self.call_tool(params.get("name"), params.get("arguments", {}))}
        if method == "prompts/get":
            if not isinstance(params, dict):
                raise MethodError(INVALID_PARAMS, "params must be an object")
            return {"text": self.get_prompt(params.get("name"), params.get("arguments", {}))}
        raise MethodError(METHOD_NOT_FOUND, f"unknown method {method!r}")

    def handle_envelope(self, env: Envelope) -> Envelope | None:
        """Produce the reply for one inbound envelope, or None for no reply.

        Notifications and stray responses are ignored; only requests get
        answers.
        """
        if env.kind != "request":
            return None
        try:
            result = self._dispatch(env.method, env.params)
        except MethodError as exc:
            return Envelope.error_response(env.id, exc.to_error())
        except Exception as exc:  # handler bug or runtime failure
            logger.exception("handler failed for %s", env.method)
            return Envelope.error_response(
                env.id, ErrorObject(code=INTERNAL_ERROR, message=f"{type(exc).__name__}: {exc}")
            )
        return Envelope.response(env.id, result)

    def serve(self, reader, writer) -> None:
        """Run the request loop until the peer closes the stream."""
        while True:
            try:
                raw = read_frame(reader)
            except EndOfStream:
                return
            try:
                env = decode(raw)
            except WireError as exc:
                reply = Envelope.error_response(
                    _salvage_id(raw), ErrorObject(code=exc.code, message=str(exc))
                )
                _write(writer, reply)
                continue
            reply = self.handle_envelope(env)
            if reply is not None:
                _write(writer, reply)


def _write(writer, env: Envelope) -> None:
    writer.write(encode(env))
    writer.flush()


def _salvage_id(raw: bytes) -> int:
    """Best-effort id for error replies to undecodable input.

    Integer ids are the only kind this wire admits, so unclassifiable
    input gets id 0 — a value no client ever assigns.
    """
    try:
        obj = json.loads(raw.decode("utf-8"))
    except Exception:
        return 0
    if isinstance(obj, dict) and isinstance(obj.get("id"), int) and not isinstance(obj.get("id"), bool):
        return obj["id"]
    return 0
