"""The HTTP capture sink: records POST bodies, refuses everything else."""

import json
import socket
import threading
import urllib.error
import urllib.request

import pytest

from crucible.sink import CaptureSink


def post(url: str, obj) -> tuple[int, dict]:
    body = json.dumps(obj).encode("utf-8")
    req = urllib.request.Request(
        url, data=body, headers={"Content-Type": "application/json"}, method="POST"
    )
    with urllib.request.urlopen(req, timeout=5) as resp:
        return resp.status, json.loads(resp.read())


def raw_exchange(host: str, port: int, payload: bytes) -> bytes:
    with socket.create_connection((host, port), timeout=5) as sock:
        sock.sendall(payload)
        sock.shutdown(socket.SHUT_WR)
        chunks = []
        while True:
            chunk = sock.recv(4096)
            if not chunk:
                break
            chunks.append(chunk)
    return b"".join(chunks)


class TestCapture:
    def test_post_records_body_and_json(self, sink):
        status, reply = post(sink.url + "/collect", {"a": 1})
        assert status == 200
        assert reply == {"ok": True}
        (cap,) = sink.captures()
        assert cap.seq == 1
        assert cap.path == "/collect"
        assert cap.body == b'{"a": 1}'
        assert cap.body_json == {"a": 1}
        assert cap.headers["Content-Type"] == "application/json"

    def test_non_json_body_still_captured(self, sink):
        req = urllib.request.Request(
            sink.url, data=b"plain text", headers={"Content-Type": "text/plain"}, method="POST"
        )
        with urllib.request.urlopen(req, timeout=5) as resp:
            assert resp.status == 200
        (cap,) = sink.captures()
        assert cap.body == b"plain text"
        assert not cap.has_json
        assert "body_json" not in cap.to_json()

    def test_empty_body_with_zero_length(self, sink):
        host, port = sink.url.removeprefix("http://").split(":")
        raw = raw_exchange(
            host, int(port),
            b"POST / HTTP/1.1\r\nHost: x\r\nContent-Length: 0\r\n\r\n",
        )
        assert b"200" in raw.split(b"\r\n", 1)[0]
        (cap,) = sink.captures()
        assert cap.body == b""

    def test_sequence_numbers_under_concurrency(self, sink):
        errors = []

        def hit(i):
            try:
                post(sink.url, {"n": i})
            except Exception as exc:  # noqa: BLE001 - collected for the assert
                errors.append(exc)

        threads = [threading.Thread(target=hit, args=(i,)) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert sorted(c.seq for c in sink.captures()) == list(range(1, 9))

    def test_url_shape(self, sink):
        assert sink.url.startswith("http://127.0.0.1:")


class TestRefusals:
    def test_get_is_rejected_and_not_captured(self, sink):
        with pytest.raises(urllib.error.HTTPError) as err:
            urllib.request.urlopen(sink.url, timeout=5)
        assert err.value.code == 405
        assert sink.captures() == []

    @pytest.mark.parametrize("verb", ["PUT", "DELETE", "PATCH"])
    def test_other_verbs_rejected(self, sink, verb):
        req = urllib.request.Request(sink.url, data=b"{}", method=verb)
        with pytest.raises(urllib.error.HTTPError) as err:
            urllib.request.urlopen(req, timeout=5)
        assert err.value.code == 405
        assert sink.captures() == []

    def test_missing_content_length(self, sink):
        host, port = sink.url.removeprefix("http://").split(":")
        raw = raw_exchange(host, int(port), b"POST / HTTP/1.1\r\nHost: x\r\n\r\n")
        assert b"411" in raw.split(b"\r\n", 1)[0]
        assert sink.captures() == []

    def test_chunked_transfer_rejected(self, sink):
        host, port = sink.url.removeprefix("http://").split(":")
        raw = raw_exchange(
            host, int(port),
            b"POST / HTTP/1.1\r\nHost: x\r\nTransfer-Encoding: chunked\r\n\r\n"
            b"2\r\n{}\r\n0\r\n\r\n",
        )
        assert b"411" in raw.split(b"\r\n", 1)[0]
        assert sink.captures() == []


class TestLifecycle:
    def test_two_sinks_get_distinct_ports(self):
        a = CaptureSink()
        b = CaptureSink()
        try:
            assert a.url != b.url
        finally:
            a.stop()
            b.stop()

    def test_stop_releases_port(self):
        a = CaptureSink()
        url = a.url
        a.stop()
        with pytest.raises(Exception):
            urllib.request.urlopen(url, timeout=1)

    def test_on_capture_hook_fires(self):
        seen = []
        a = CaptureSink(on_capture=seen.append)
        try:
            post(a.url, {"x": 2})
        finally:
            a.stop()
        assert len(seen) == 1 and seen[0].body_json == {"x": 2}
