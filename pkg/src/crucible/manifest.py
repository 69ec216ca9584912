"""Server manifests: identity, tool/prompt descriptors, and canonical bytes.

The canonical byte form (keys sorted at every level, no whitespace,
signature field excluded) is the input to attestation signing, so
manifests ban floating-point numbers: integers and strings have exactly
one canonical rendering, floats do not reliably across writers.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any

SERVER_ID_RE = re.compile(r"[a-z0-9_-]+")
TOOL_NAME_RE = re.compile(r"[a-z0-9_.]+")

PARAM_TYPES = ("string", "number", "object")


class ManifestError(ValueError):
    """A manifest or descriptor violates its structural invariants."""


class CanonicalizationError(ValueError):
    """The manifest cannot be canonicalized (a float is present)."""


def canonical_json(value: Any) -> str:
    """Deterministic compact JSON for arbitrary JSON values.

    Keys sorted ascending at every nesting level, no insignificant
    whitespace. Unlike manifest canonicalization this permits floats; it
    is used for display, equality checks, and stable HTTP bodies.
    """
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def _check_params_schema(schema: Any, where: str) -> None:
    if not isinstance(schema, dict):
        raise ManifestError(f"{where}: params_schema must be an object")
    for pname, spec in schema.items():
        if not isinstance(pname, str) or not pname:
            raise ManifestError(f"{where}: bad param name {pname!r}")
        if not isinstance(spec, dict) or set(spec) != {"type", "required"}:
            raise ManifestError(f"{where}.{pname}: spec needs exactly type and required")
        if spec["type"] not in PARAM_TYPES:
            raise ManifestError(f"{where}.{pname}: type must be one of {PARAM_TYPES}")
        if not isinstance(spec["required"], bool):
            raise ManifestError(f"{where}.{pname}: required must be a boolean")


@dataclass(frozen=True)
class ToolDescriptor:
    """A named invocable operation. ``egress=True`` marks tools whose
    invocation transmits data outside the client/server topology."""

    name: str
    description: str
    params_schema: dict[str, dict]
    egress: bool = False

    def validate(self) -> None:
        if not isinstance(self.name, str) or not TOOL_NAME_RE.fullmatch(self.name or ""):
            raise ManifestError(f"bad tool name {self.name!r}")
        if not isinstance(self.description, str):
            raise ManifestError(f"tool {self.name}: description must be a string")
        _check_params_schema(self.params_schema, f"tool {self.name}")
        if not isinstance(self.egress, bool):
            raise ManifestError(f"tool {self.name}: egress must be a boolean")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "params_schema": self.params_schema,
            "egress": self.egress,
        }

    @staticmethod
    def from_json(obj: Any) -> "ToolDescriptor":
        if not isinstance(obj, dict):
            raise ManifestError("tool descriptor must be an object")
        unknown = set(obj) - {"name", "description", "params_schema", "egress"}
        if unknown:
            raise ManifestError(f"tool descriptor: unknown members {sorted(unknown)}")
        desc = ToolDescriptor(
            name=obj.get("name"),
            description=obj.get("description", ""),
            params_schema=obj.get("params_schema", {}),
            egress=obj.get("egress", False),
        )
        desc.validate()
        return desc


@dataclass(frozen=True)
class PromptDescriptor:
    """A named prompt template a server exposes for retrieval."""

    name: str
    description: str
    params_schema: dict[str, dict]

    def validate(self) -> None:
        if not isinstance(self.name, str) or not TOOL_NAME_RE.fullmatch(self.name or ""):
            raise ManifestError(f"bad prompt name {self.name!r}")
        if not isinstance(self.description, str):
            raise ManifestError(f"prompt {self.name}: description must be a string")
        _check_params_schema(self.params_schema, f"prompt {self.name}")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "params_schema": self.params_schema,
        }

    @staticmethod
    def from_json(obj: Any) -> "PromptDescriptor":
        if not isinstance(obj, dict):
            raise ManifestError("prompt descriptor must be an object")
        unknown = set(obj) - {"name", "description", "params_schema"}
        if unknown:
            raise ManifestError(f"prompt descriptor: unknown members {sorted(unknown)}")
        desc = PromptDescriptor(
            name=obj.get("name"),
            description=obj.get("description", ""),
            params_schema=obj.get("params_schema", {}),
        )
        desc.validate()
        return desc


_MANIFEST_MEMBERS = {
    "server_id",
    "publisher",
    "version",
    "tools",
    "prompts",
    "interacts_with",
    "signature",
}


@dataclass(frozen=True)
class ServerManifest:
    """A server's self-declaration: identity, capabilities, and the
    cross-server interactions it claims to need."""

    server_id: str
    publisher: str
    version: str
    tools: tuple[ToolDescriptor, ...] = ()
    prompts: tuple[PromptDescriptor, ...] = ()
    interacts_with: tuple[str, ...] = ()
    signature: str | None = None

    def validate(self) -> None:
        if not isinstance(self.server_id, str) or not SERVER_ID_RE.fullmatch(self.server_id or ""):
            raise ManifestError(f"bad server_id {self.server_id!r}")
        for f in ("publisher", "version"):
            if not isinstance(getattr(self, f), str):
                raise ManifestError(f"{f} must be a string")
        for tool in self.tools:
            tool.validate()
        for prompt in self.prompts:
            prompt.validate()
        tool_names = [t.name for t in self.tools]
        if len(set(tool_names)) != len(tool_names):
            raise ManifestError("duplicate tool names")
        prompt_names = [p.name for p in self.prompts]
        if len(set(prompt_names)) != len(prompt_names):
            raise ManifestError("duplicate prompt names")
        for entry in self.interacts_with:
            if entry != "*" and not (isinstance(entry, str) and SERVER_ID_RE.fullmatch(entry)):
                raise ManifestError(f"interacts_with entry {entry!r} is neither a server_id nor '*'")
        if self.signature is not None and not isinstance(self.signature, str):
            raise ManifestError("signature must be a hex string")
        _reject_floats(self.to_json(), "manifest")

    def to_json(self) -> dict:
        obj: dict[str, Any] = {
            "server_id": self.server_id,
            "publisher": self.publisher,
            "version": self.version,
            "tools": [t.to_json() for t in self.tools],
            "prompts": [p.to_json() for p in self.prompts],
            "interacts_with": list(self.interacts_with),
        }
        if self.signature is not None:
            obj["signature"] = self.signature
        return obj

    @staticmethod
    def from_json(obj: Any) -> "ServerManifest":
        if not isinstance(obj, dict):
            raise ManifestError("manifest must be an object")
        unknown = set(obj) - _MANIFEST_MEMBERS
        if unknown:
            raise ManifestError(f"manifest: unknown members {sorted(unknown)}")
        tools_raw = obj.get("tools", [])
        prompts_raw = obj.get("prompts", [])
        if not isinstance(tools_raw, list) or not isinstance(prompts_raw, list):
            raise ManifestError("tools and prompts must be arrays")
        interacts = obj.get("interacts_with", [])
        if not isinstance(interacts, list):
            raise ManifestError("interacts_with must be an array")
        manifest = ServerManifest(
            server_id=obj.get("server_id"),
            publisher=obj.get("publisher", ""),
            version=obj.get("version", ""),
            tools=tuple(ToolDescriptor.from_json(t) for t in tools_raw),
            prompts=tuple(PromptDescriptor.from_json(p) for p in prompts_raw),
            interacts_with=tuple(interacts),
            signature=obj.get("signature"),
        )
        manifest.validate()
        return manifest

    def with_signature(self, signature: str | None) -> "ServerManifest":
        return ServerManifest(
            server_id=self.server_id,
            publisher=self.publisher,
            version=self.version,
            tools=self.tools,
            prompts=self.prompts,
            interacts_with=self.interacts_with,
            signature=signature,
        )

    def tool(self, name: str) -> ToolDescriptor | None:
        for t in self.tools:
            if t.name == name:
                return t
        return None

    def prompt(self, name: str) -> PromptDescriptor | None:
        for p in self.prompts:
            if p.name == name:
                return p
        return None


def _reject_floats(value: Any, path: str) -> None:
    if isinstance(value, float):
        raise CanonicalizationError(f"{path}: floating-point value {value!r} has no canonical form")
    if isinstance(value, dict):
        for k, v in value.items():
            _reject_floats(v, f"{path}.{k}")
    elif isinstance(value, list):
        for i, v in enumerate(value):
            _reject_floats(v, f"{path}[{i}]")


def canonicalize_manifest(manifest: ServerManifest) -> bytes:
    """Canonical UTF-8 bytes of a manifest, excluding its signature.

    Equal manifests yield identical bytes; these bytes are the attestation
    signing input.
    """
    obj = manifest.to_json()
    obj.pop("signature", None)
    _reject_floats(obj, "manifest")
    return canonical_json(obj).encode("utf-8")
