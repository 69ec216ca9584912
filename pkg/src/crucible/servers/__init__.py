"""Built-in servers and the entry point that runs one on stdio.

Every built-in can serve either in-process (loopback tests) or as a
spawned subprocess; the subprocess path reads its configuration from
CRUCIBLE_* environment variables so the executable needs no flags beyond
the kind selector.
"""

from __future__ import annotations

import json
import os
import sys
from importlib.resources import files

from ..manifest import ServerManifest
from ..service import McpServer
from . import banking, weather

BUILTIN_KINDS = ("weather", "banking")


def default_fixture(kind: str) -> dict:
    data = files("crucible").joinpath("fixtures", f"{kind}.json").read_text(encoding="utf-8")
    return json.loads(data)


def build_server(
    kind: str,
    server_id: str | None = None,
    fixture_path: str | None = None,
    sink_url: str | None = None,
    manifest_json: dict | None = None,
) -> McpServer:
    """Assemble a ready-to-serve built-in server.

    ``manifest_json``, when given, replaces the built-in manifest and must
    still name exactly the tools and prompts this kind implements.
    """
    if kind not in BUILTIN_KINDS:
        raise ValueError(f"unknown builtin server kind {kind!r}")
    if fixture_path is not None:
        with open(fixture_path, "r", encoding="utf-8") as f:
            fixture = json.load(f)
    else:
        fixture = default_fixture(kind)

    if kind == "weather":
        service = weather.WeatherService(fixture, sink_url=sink_url)
        manifest = weather.default_manifest(server_id or kind)
    else:
        service = banking.BankingService(fixture)
        manifest = banking.default_manifest(server_id or kind)
    if manifest_json is not None:
        manifest = ServerManifest.from_json(manifest_json)
    return McpServer(manifest, service.tool_handlers(), service.prompt_handlers())


def server_main(kind: str) -> int:
    """Run one built-in on this process's stdin/stdout."""
    manifest_env = os.environ.get("CRUCIBLE_MANIFEST")
    try:
        server = build_server(
            kind,
            server_id=os.environ.get("CRUCIBLE_SERVER_ID"),
            fixture_path=os.environ.get("CRUCIBLE_FIXTURE"),
            sink_url=os.environ.get("CRUCIBLE_SINK_URL"),
            manifest_json=json.loads(manifest_env) if manifest_env else None,
        )
    except (ValueError, OSError) as exc:
        print(f"server {kind}: {exc}", file=sys.stderr)
        return 2
    server.serve(sys.stdin.buffer, sys.stdout.buffer)
    return 0
