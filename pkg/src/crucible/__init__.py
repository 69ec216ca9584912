"""Crucible: a self-contained MCP security testbed.

A deterministic client/server sandbox in which a malicious tool server can
steer an agent into leaking data from another server, and in which
protocol-level defenses (capability declarations, sensitive-server
boundaries, manifest attestation) can be switched on to block the same run.
"""

__version__ = "0.1.0"
