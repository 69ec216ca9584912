"""Shared fixtures: loopback topologies, a live sink, envelope strategies."""

from __future__ import annotations

import json
from importlib.resources import files

import pytest
from hypothesis import strategies as st

from crucible.agent import ConsentPolicy
from crucible.policy import PolicyConfig, PolicyEngine
from crucible.servers import build_server
from crucible.sink import CaptureSink
from crucible.transport import loopback_pair
from crucible.wire import Envelope, ErrorObject

SKYLINE_KEY = "6b3f9a1d4c8e27505f1b9e3d7c2a64800d9f4b16e8a35c72904d1f6b8e2a5c37"
OPENBANK_KEY = "2d7e4c19a6f05b83e1c9d2764afb30585e8d1a42c7b6f9301d5e8a2b4c6f7d90"


def load_fixture(kind: str) -> dict:
    text = files("crucible").joinpath("fixtures", f"{kind}.json").read_text(encoding="utf-8")
    return json.loads(text)


@pytest.fixture
def sink():
    s = CaptureSink()
    yield s
    s.stop()


class Topology:
    """Loopback weather+banking pair behind initialized connections."""

    def __init__(self, sink_url: str | None, on_message=None):
        self.connections = {}
        for kind in ("weather", "banking"):
            server = build_server(kind, sink_url=sink_url)
            connection, _task = loopback_pair(server.serve, kind, on_message)
            self.connections[kind] = connection
        self.manifests = {
            server_id: connection.initialize()
            for server_id, connection in self.connections.items()
        }

    def engine(self, **overrides) -> PolicyEngine:
        config = PolicyConfig(
            sensitive_servers=frozenset({"banking"}),
            boundary_allowlist=(("weather", "banking", "account.balance"),),
            trusted_keys={"skyline-labs": SKYLINE_KEY, "openbank-labs": OPENBANK_KEY},
            **overrides,
        )
        return PolicyEngine(config, self.manifests)

    def close(self):
        for connection in self.connections.values():
            connection.close()


@pytest.fixture
def topology(sink):
    topo = Topology(sink.url)
    yield topo
    topo.close()


AUTO_APPROVE = ConsentPolicy(mode="auto_approve")
AUTO_DENY = ConsentPolicy(mode="auto_deny")


# -- hypothesis strategies ----------------------------------------------------

json_values = st.recursive(
    st.none()
    | st.booleans()
    | st.integers(min_value=-(10**12), max_value=10**12)
    | st.floats(allow_nan=False, allow_infinity=False)
    | st.text(max_size=20),
    lambda children: st.lists(children, max_size=4)
    | st.dictionaries(st.text(max_size=10), children, max_size=4),
    max_leaves=10,
)

_ids = st.integers(min_value=0, max_value=2**31)
_methods = st.sampled_from(
    ["initialize", "tools/list", "tools/call", "prompts/list", "prompts/get", "ping"]
)
_codes = st.sampled_from([-32700, -32600, -32601, -32602, -32000, -32001, -32002, -32099])

# params/result use non-null values: a null member is indistinguishable
# from an absent one on the wire, by design.
_present = json_values.filter(lambda v: v is not None)
_maybe_params = st.none() | _present

_errors = st.builds(
    ErrorObject,
    code=_codes,
    message=st.text(max_size=30),
    data=st.none() | _present,
)


@st.composite
def envelopes(draw) -> Envelope:
    kind = draw(st.sampled_from(["request", "notification", "result", "error"]))
    if kind == "request":
        return Envelope.request(draw(_ids), draw(_methods), draw(_maybe_params))
    if kind == "notification":
        return Envelope.notification(draw(_methods), draw(_maybe_params))
    if kind == "result":
        return Envelope.response(draw(_ids), draw(json_values))
    return Envelope.error_response(draw(_ids), draw(_errors))
