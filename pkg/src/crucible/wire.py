"""JSON-RPC 2.0 envelopes framed as newline-delimited UTF-8 JSON.

One envelope per line, exactly one 0x0A byte per frame (the terminator).
Ids are integers only and the top level admits no members beyond
jsonrpc/id/method/params/result/error, which keeps transcripts canonical
and diff-able.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

# Error codes carried on the wire. The first four are the JSON-RPC 2.0
# standard codes; the last two are application-assigned inside the
# reserved -32000..-32099 range.
PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602
INTERNAL_ERROR = -32000
POLICY_DENIED = -32001
CONSENT_DENIED = -32002

_STANDARD_CODES = {PARSE_ERROR, INVALID_REQUEST, METHOD_NOT_FOUND, INVALID_PARAMS}

REQUEST = "request"
RESPONSE = "response"
NOTIFICATION = "notification"

_TOP_LEVEL_MEMBERS = {"jsonrpc", "id", "method", "params", "result", "error"}


class WireError(Exception):
    """Base class for envelope encode/decode failures."""

    code: int = INVALID_REQUEST


class InvalidEnvelope(WireError):
    """An Envelope value violates its kind invariants and cannot be encoded."""


class ParseError(WireError):
    """Input bytes are not a well-formed UTF-8 JSON document."""

    code = PARSE_ERROR


class InvalidRequest(WireError):
    """Well-formed JSON that is not a valid envelope."""

    code = INVALID_REQUEST


class EndOfStream(WireError):
    """The byte source closed before a full frame arrived."""


def _code_allowed(code: Any) -> bool:
    return isinstance(code, int) and not isinstance(code, bool) and (
        code in _STANDARD_CODES or -32099 <= code <= -32000
    )


@dataclass(frozen=True)
class ErrorObject:
    """JSON-RPC error member: a code from the wire table plus a message."""

    code: int
    message: str
    data: Any = None

    def to_json(self) -> dict:
        obj: dict[str, Any] = {"code": self.code, "message": self.message}
        if self.data is not None:
            obj["data"] = self.data
        return obj


@dataclass(frozen=True)
class Envelope:
    """One JSON-RPC message: a request, response, or notification.

    ``params``/``result`` hold plain JSON values. ``params=None`` means the
    member is absent; a response with ``error=None`` is a result response
    (its ``result`` member is emitted even when the value is null).
    """

    kind: str
    id: int | None = None
    method: str | None = None
    params: Any = None
    result: Any = None
    error: ErrorObject | None = None

    @staticmethod
    def request(id: int, method: str, params: Any = None) -> "Envelope":
        return Envelope(kind=REQUEST, id=id, method=method, params=params)

    @staticmethod
    def notification(method: str, params: Any = None) -> "Envelope":
        return Envelope(kind=NOTIFICATION, method=method, params=params)

    @staticmethod
    def response(id: int, result: Any) -> "Envelope":
        return Envelope(kind=RESPONSE, id=id, result=result)

    @staticmethod
    def error_response(id: int, error: ErrorObject) -> "Envelope":
        return Envelope(kind=RESPONSE, id=id, error=error)


def _check_valid(env: Envelope) -> None:
    if env.kind == REQUEST:
        ok = (
            isinstance(env.id, int)
            and not isinstance(env.id, bool)
            and isinstance(env.method, str)
            and env.result is None
            and env.error is None
        )
        if not ok:
            raise InvalidEnvelope("request needs integer id and method, no result/error")
    elif env.kind == NOTIFICATION:
        if env.id is not None or not isinstance(env.method, str):
            raise InvalidEnvelope("notification needs method and no id")
        if env.result is not None or env.error is not None:
            raise InvalidEnvelope("notification carries no result/error")
    elif env.kind == RESPONSE:
        if not isinstance(env.id, int) or isinstance(env.id, bool) or env.method is not None:
            raise InvalidEnvelope("response needs integer id and no method")
        if env.error is not None:
            if env.result is not None:
                raise InvalidEnvelope("response carries exactly one of result/error")
            if not _code_allowed(env.error.code):
                raise InvalidEnvelope(f"error code {env.error.code!r} outside the wire table")
            if not isinstance(env.error.message, str):
                raise InvalidEnvelope("error message must be a string")
    else:
        raise InvalidEnvelope(f"unknown envelope kind {env.kind!r}")


def envelope_to_obj(env: Envelope) -> dict:
    """JSON object form of a validated envelope, members in wire order."""
    _check_valid(env)
    obj: dict[str, Any] = {"jsonrpc": "2.0"}
    if env.id is not None:
        obj["id"] = env.id
    if env.method is not None:
        obj["method"] = env.method
    if env.params is not None:
        obj["params"] = env.params
    if env.kind == RESPONSE:
        if env.error is not None:
            obj["error"] = env.error.to_json()
        else:
            obj["result"] = env.result
    return obj


def encode(env: Envelope) -> bytes:
    """Serialize to one newline-terminated line of UTF-8 JSON."""
    obj = envelope_to_obj(env)
    try:
        line = json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise InvalidEnvelope(f"payload is not JSON-serializable: {exc}") from exc
    return line.encode("utf-8") + b"\n"


def _decode_error_member(raw: Any) -> ErrorObject:
    if not isinstance(raw, dict):
        raise InvalidRequest("error member must be an object")
    unknown = set(raw) - {"code", "message", "data"}
    if unknown:
        raise InvalidRequest(f"unknown error members: {sorted(unknown)}")
    if not _code_allowed(raw.get("code")):
        raise InvalidRequest(f"error code {raw.get('code')!r} outside the wire table")
    if not isinstance(raw.get("message"), str):
        raise InvalidRequest("error message must be a string")
    return ErrorObject(code=raw["code"], message=raw["message"], data=raw.get("data"))


def decode(line: bytes | str) -> Envelope:
    """Parse one frame back into an Envelope.

    Total over arbitrary byte input: raises ParseError for malformed
    JSON/UTF-8 and InvalidRequest for valid JSON that is not an envelope;
    never anything else.
    """
    if isinstance(line, (bytes, bytearray)):
        try:
            text = bytes(line).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"invalid UTF-8: {exc}") from exc
    else:
        text = line
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc}") from exc

    if not isinstance(obj, dict):
        raise InvalidRequest("envelope must be a JSON object")
    unknown = set(obj) - _TOP_LEVEL_MEMBERS
    if unknown:
        raise InvalidRequest(f"unknown top-level members: {sorted(unknown)}")
    if obj.get("jsonrpc") != "2.0":
        raise InvalidRequest('missing or wrong "jsonrpc" member')

    has_id = "id" in obj
    if has_id and (not isinstance(obj["id"], int) or isinstance(obj["id"], bool)):
        raise InvalidRequest("ids must be integers")
    has_method = "method" in obj
    if has_method and not isinstance(obj["method"], str):
        raise InvalidRequest("method must be a string")
    params = obj.get("params")

    if has_method:
        if "result" in obj or "error" in obj:
            raise InvalidRequest("request/notification carries no result/error")
        if has_id:
            return Envelope.request(obj["id"], obj["method"], params)
        return Envelope.notification(obj["method"], params)

    if not has_id:
        raise InvalidRequest("envelope has neither method nor id")
    has_result = "result" in obj
    has_error = "error" in obj
    if has_result == has_error:
        raise InvalidRequest("response carries exactly one of result/error")
    if has_error:
        return Envelope.error_response(obj["id"], _decode_error_member(obj["error"]))
    return Envelope.response(obj["id"], obj["result"])


def read_frame(stream) -> bytes:
    """Read bytes up to and excluding the next 0x0A from a binary stream.

    Blocks until a full line arrives. Raises EndOfStream if the source
    closes at the start or mid-line.
    """
    line = stream.readline()
    if line == b"":
        raise EndOfStream("stream closed")
    if not line.endswith(b"\n"):
        raise EndOfStream("stream closed mid-frame")
    return line[:-1]
