"""Three protocol-level gates evaluated before every tool invocation.

Capability declarations (may this origin involve that server at all),
sensitive-server boundaries over taint flow, and manifest attestation.
Checks run in a fixed order with first deny winning; since any single
deny decides the outcome, the order only affects which rule gets named.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass
from typing import Any, Iterable, Mapping

from .manifest import ServerManifest, canonicalize_manifest

RULE_NONE = "none"
RULE_CAPABILITY = "capability"
RULE_BOUNDARY = "boundary"
RULE_ATTESTATION = "attestation"

UNATTESTED_DEFAULTS = ("deny_cross_server", "deny_all")


@dataclass(frozen=True)
class PolicyVerdict:
    decision: str  # allow | deny
    rule: str = RULE_NONE
    detail: str = ""


def _allow(detail: str = "") -> PolicyVerdict:
    return PolicyVerdict("allow", RULE_NONE, detail)


def _deny(rule: str, detail: str) -> PolicyVerdict:
    return PolicyVerdict("deny", rule, detail)


_POLICY_MEMBERS = {
    "enable_capabilities",
    "enable_boundaries",
    "enable_attestation",
    "sensitive_servers",
    "boundary_allowlist",
    "trusted_keys",
    "unattested_default",
}


@dataclass(frozen=True)
class PolicyConfig:
    enable_capabilities: bool = False
    enable_boundaries: bool = False
    enable_attestation: bool = False
    sensitive_servers: frozenset = frozenset()
    boundary_allowlist: tuple = ()
    trusted_keys: Mapping[str, str] | None = None
    unattested_default: str = "deny_cross_server"

    def __post_init__(self):
        object.__setattr__(self, "sensitive_servers", frozenset(self.sensitive_servers))
        object.__setattr__(
            self, "boundary_allowlist", tuple(tuple(e) for e in self.boundary_allowlist)
        )
        object.__setattr__(self, "trusted_keys", dict(self.trusted_keys or {}))
        if self.unattested_default not in UNATTESTED_DEFAULTS:
            raise ValueError(f"unattested_default must be one of {UNATTESTED_DEFAULTS}")
        for entry in self.boundary_allowlist:
            if len(entry) != 3 or not all(isinstance(x, str) for x in entry):
                raise ValueError(f"boundary_allowlist entry {entry!r} must be [source, destination, tool]")

    @staticmethod
    def from_json(obj: Any, where: str = "policy") -> "PolicyConfig":
        if not isinstance(obj, dict):
            raise ValueError(f"{where}: must be an object")
        unknown = set(obj) - _POLICY_MEMBERS
        if unknown:
            raise ValueError(f"{where}: unknown members {sorted(unknown)}")
        for flag in ("enable_capabilities", "enable_boundaries", "enable_attestation"):
            if not isinstance(obj.get(flag, False), bool):
                raise ValueError(f"{where}.{flag}: must be a boolean")
        sensitive = obj.get("sensitive_servers", [])
        if not isinstance(sensitive, list) or not all(isinstance(s, str) for s in sensitive):
            raise ValueError(f"{where}.sensitive_servers: must be an array of server ids")
        allowlist = obj.get("boundary_allowlist", [])
        if not isinstance(allowlist, list):
            raise ValueError(f"{where}.boundary_allowlist: must be an array")
        for i, entry in enumerate(allowlist):
            if not isinstance(entry, list) or len(entry) != 3 or not all(isinstance(x, str) for x in entry):
                raise ValueError(
                    f"{where}.boundary_allowlist[{i}]: must be [source, destination, tool]"
                )
        keys = obj.get("trusted_keys", {})
        if not isinstance(keys, dict):
            raise ValueError(f"{where}.trusted_keys: must be an object")
        for publisher, key_hex in keys.items():
            if not isinstance(key_hex, str):
                raise ValueError(f"{where}.trusted_keys.{publisher}: must be a hex string")
            try:
                bytes.fromhex(key_hex)
            except ValueError:
                raise ValueError(f"{where}.trusted_keys.{publisher}: not valid hex")
        default = obj.get("unattested_default", "deny_cross_server")
        if default not in UNATTESTED_DEFAULTS:
            raise ValueError(f"{where}.unattested_default: must be one of {UNATTESTED_DEFAULTS}")
        return PolicyConfig(
            enable_capabilities=obj.get("enable_capabilities", False),
            enable_boundaries=obj.get("enable_boundaries", False),
            enable_attestation=obj.get("enable_attestation", False),
            sensitive_servers=frozenset(sensitive),
            boundary_allowlist=tuple(tuple(e) for e in allowlist),
            trusted_keys=dict(keys),
            unattested_default=default,
        )


# -- signing ------------------------------------------------------------------


def hmac_hex(key_hex: str, message: bytes) -> str:
    """Lowercase-hex HMAC-SHA256 over message bytes."""
    return hmac.new(bytes.fromhex(key_hex), message, hashlib.sha256).hexdigest()


def signature_valid(canonical: bytes, signature: str, key_hex: str) -> bool:
    return hmac.compare_digest(hmac_hex(key_hex, canonical), signature)


def sign_manifest(manifest: ServerManifest, key_hex: str) -> ServerManifest:
    """Return a copy carrying the publisher signature over its canonical
    bytes; the signature field itself is excluded from the signed input."""
    return manifest.with_signature(hmac_hex(key_hex, canonicalize_manifest(manifest)))


def verify_attestation(manifest: ServerManifest | None, config: PolicyConfig) -> str:
    """Classify a manifest as "attested" or "unattested"."""
    if manifest is None or manifest.signature is None:
        return "unattested"
    key_hex = config.trusted_keys.get(manifest.publisher)
    if key_hex is None:
        return "unattested"
    try:
        valid = signature_valid(canonicalize_manifest(manifest), manifest.signature, key_hex)
    except ValueError:
        return "unattested"
    return "attested" if valid else "unattested"


# -- the three checks ---------------------------------------------------------


def check_capability(
    origin: str, target: str, origin_manifest: ServerManifest | None
) -> PolicyVerdict:
    """May plans originating at ``origin`` involve ``target`` at all?"""
    if target == origin:
        return _allow("same-server call")
    if origin_manifest is None:
        return _deny(RULE_CAPABILITY, f"no manifest for origin {origin!r}")
    declared = origin_manifest.interacts_with
    if target in declared or "*" in declared:
        return _allow(f"{origin} declares interaction with {target}")
    return _deny(
        RULE_CAPABILITY,
        f"{origin} does not declare cross-server interaction with {target}",
    )


def _allowlisted(config: PolicyConfig, source: str, destination: str, tool: str) -> bool:
    for entry_source, entry_destination, entry_tool in config.boundary_allowlist:
        if entry_source == source and entry_destination == destination:
            if entry_tool == "*" or entry_tool == tool:
                return True
    return False


def check_boundary(
    origin: str,
    args_taints: Iterable[str],
    target: str,
    tool: str,
    config: PolicyConfig,
) -> PolicyVerdict:
    """Sensitive-server boundary: egress of tainted data and ingress of
    foreign-origin calls both need an allowlist entry."""
    for taint in sorted(set(args_taints)):
        if taint in config.sensitive_servers and taint != target:
            if not _allowlisted(config, taint, target, tool):
                return _deny(
                    RULE_BOUNDARY,
                    f"data tainted by sensitive server {taint} flowing into {target}/{tool}",
                )
    if target in config.sensitive_servers and origin != target:
        if not _allowlisted(config, origin, target, tool):
            return _deny(
                RULE_BOUNDARY,
                f"plan from {origin} calling sensitive server {target}/{tool}",
            )
    return _allow("no sensitive flow")


def check_attestation(
    origin: str,
    target: str,
    args_taints: Iterable[str],
    origin_manifest: ServerManifest | None,
    target_manifest: ServerManifest | None,
    config: PolicyConfig,
) -> PolicyVerdict:
    """Unattested servers get the configured default treatment.

    deny_all refuses every call on an unattested target; both modes refuse
    cross-server flow (foreign origin or foreign taints) when either
    endpoint is unattested.
    """
    origin_state = verify_attestation(origin_manifest, config)
    target_state = verify_attestation(target_manifest, config)
    if config.unattested_default == "deny_all" and target_state == "unattested":
        return _deny(RULE_ATTESTATION, f"target {target} is unattested")
    crosses = origin != target or any(t != target for t in args_taints)
    if crosses:
        if target_state == "unattested":
            return _deny(RULE_ATTESTATION, f"cross-server call on unattested target {target}")
        if origin_state == "unattested":
            return _deny(RULE_ATTESTATION, f"cross-server call from unattested origin {origin}")
    return _allow("attestation satisfied")


def evaluate(
    origin: str,
    target: str,
    tool: str,
    args_taints: Iterable[str],
    manifests: Mapping[str, ServerManifest],
    config: PolicyConfig,
) -> PolicyVerdict:
    """Run the enabled checks in fixed order; first deny wins.

    With everything disabled this is a pure pass-through: the permissive
    baseline that lets the cross-server attack run.
    """
    args_taints = frozenset(args_taints)
    if config.enable_attestation:
        verdict = check_attestation(
            origin, target, args_taints, manifests.get(origin), manifests.get(target), config
        )
        if verdict.decision == "deny":
            return verdict
    if config.enable_capabilities:
        verdict = check_capability(origin, target, manifests.get(origin))
        if verdict.decision == "deny":
            return verdict
    if config.enable_boundaries:
        verdict = check_boundary(origin, args_taints, target, tool, config)
        if verdict.decision == "deny":
            return verdict
    return _allow("all enabled checks passed")


class PolicyEngine:
    """Bound evaluator: one config plus the scenario's pinned manifests."""

    def __init__(self, config: PolicyConfig, manifests: Mapping[str, ServerManifest]):
        self.config = config
        self.manifests = dict(manifests)

    def evaluate(self, origin: str, target: str, tool: str, args_taints) -> PolicyVerdict:
        return evaluate(origin, target, tool, args_taints, self.manifests, self.config)

    def attestation_state(self, server_id: str) -> str:
        return verify_attestation(self.manifests.get(server_id), self.config)
