import json
import os
import socket
import sys
import threading

import pytest

from campus.probe import ProbeError
from campus.remote import (
    ProbeHandshakeError,
    ProbeProtocolError,
    ProbeTimeoutError,
    RemoteProbe,
    canonical_request,
    external_probe,
)

import mock_probe

MOCK = f"exec:{sys.executable} {os.path.join(os.path.dirname(__file__), 'mock_probe.py')}"
GOLDEN = os.path.join(os.path.dirname(__file__), "data", "golden_requests.jsonl")


def drive_reference_session(record):
    """The fixed call sequence frozen in the golden transcript."""
    probe = external_probe(MOCK, timeout=10, record=record)
    probe.logprobs([1, 2, 3], mask_from=1)
    probe.update([[1, 2], [3]])
    probe.features([1, 2, 3])
    probe.snapshot()
    probe.close()


class TestHandshake:
    def test_feature_dim_from_hello(self):
        probe = external_probe(MOCK, timeout=10)
        assert probe.feature_dim == 3
        assert not probe.wants_text
        probe.close()

    def test_missing_feature_dim_rejected(self):
        with pytest.raises(ProbeHandshakeError, match="feature_dim"):
            external_probe(MOCK + " badhello", timeout=10)

    def test_unknown_endpoint_scheme(self):
        with pytest.raises(ProbeHandshakeError, match="endpoint"):
            external_probe("ftp:nope")

    def test_unspawnable_command(self):
        with pytest.raises(ProbeHandshakeError):
            external_probe("exec:/does/not/exist-xyz")

    def test_unreachable_tcp(self):
        with pytest.raises(ProbeHandshakeError):
            external_probe("tcp:127.0.0.1:9", timeout=0.5)


class TestCalls:
    def test_logprobs_round_trip(self):
        probe = external_probe(MOCK, timeout=10)
        assert probe.logprobs([5, 6], mask_from=0) == [-1.0, -1.0]
        probe.close()

    def test_features_validated_against_feature_dim(self):
        probe = external_probe(MOCK, timeout=10)
        z1, z2 = probe.features([1, 2])
        assert z1 == [0.1, 0.2, 0.3]
        assert z2 == [0.4, 0.5, 0.6]
        probe.close()

    def test_malformed_response_names_line(self):
        probe = external_probe(MOCK + " malformed", timeout=10)
        with pytest.raises(ProbeProtocolError, match="not json"):
            probe.logprobs([1])
        probe._transport.close()

    def test_server_error_propagates(self):
        probe = external_probe(MOCK + " error", timeout=10)
        with pytest.raises(ProbeError, match="synthetic failure"):
            probe.update([[1]])
        probe._transport.close()

    def test_timeout(self):
        probe = external_probe(MOCK + " slow", timeout=0.3)
        with pytest.raises(ProbeTimeoutError):
            probe.snapshot()
        probe._transport.close()

    def test_token_mode_rejects_text(self):
        probe = external_probe(MOCK, timeout=10)
        with pytest.raises(ProbeError, match="token id"):
            probe.logprobs("raw text")
        probe.close()


class TestGoldenTranscript:
    def test_requests_are_byte_identical_to_golden(self):
        record: list[bytes] = []
        drive_reference_session(record)
        with open(GOLDEN, "rb") as fh:
            golden = fh.read().splitlines(keepends=True)
        assert record == golden

    def test_canonical_serialization_is_stable(self):
        a = canonical_request({"op": "logprobs", "tokens": [1, 2], "mask_from": 0})
        b = canonical_request({"mask_from": 0, "tokens": [1, 2], "op": "logprobs"})
        assert a == b == b'{"mask_from":0,"op":"logprobs","tokens":[1,2]}\n'


class _TcpMock(threading.Thread):
    """Serve the mock handler over one TCP connection."""

    def __init__(self):
        super().__init__(daemon=True)
        self.sock = socket.socket()
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(1)
        self.port = self.sock.getsockname()[1]

    def run(self):
        conn, _ = self.sock.accept()
        buf = b""
        with conn:
            while True:
                chunk = conn.recv(65536)
                if not chunk:
                    return
                buf += chunk
                while b"\n" in buf:
                    line, buf = buf.split(b"\n", 1)
                    req = json.loads(line)
                    resp = mock_probe.handle(req, "normal")
                    if resp is None:
                        conn.sendall(json.dumps({"ok": True}).encode() + b"\n")
                        return
                    conn.sendall(resp.encode() + b"\n")


class TestTcpTransport:
    def test_full_session_over_tcp(self):
        server = _TcpMock()
        server.start()
        probe = external_probe(f"tcp:127.0.0.1:{server.port}", timeout=10)
        assert probe.feature_dim == 3
        assert probe.logprobs([1, 2]) == [-1.0, -1.0]
        probe.close()
        server.join(timeout=5)


class TestRemoteTokenizerMode:
    def _text_mock(self, responses):
        """In-process transport stub for the negotiated text extension."""

        class T:
            def __init__(self):
                self.sent = []
                self.queue = list(responses)

            def send(self, line):
                self.sent.append(line)

            def recv(self, timeout):
                return self.queue.pop(0)

            def close(self):
                pass

        return T()

    def test_text_payloads_and_response_mask(self):
        transport = self._text_mock(
            [
                b'{"ok": true, "feature_dim": 4, "tokenizer": "remote"}',
                b'{"ok": true, "logprobs": [-0.5, -0.5, -2.0], "mask_from": 1}',
            ]
        )
        probe = RemoteProbe(transport, timeout=1)
        assert probe.wants_text

        class Enc:
            text = "hello world"
            mask_from_char = 6

        assert probe.loss(Enc()) == pytest.approx(2.5)
        sent = json.loads(transport.sent[-1])
        assert sent == {"op": "logprobs", "text": "hello world", "mask_from": 6}

    def test_text_mode_update_sends_strings(self):
        transport = self._text_mock(
            [
                b'{"ok": true, "feature_dim": 4, "tokenizer": "remote"}',
                b'{"ok": true}',
            ]
        )
        probe = RemoteProbe(transport, timeout=1)
        probe.update(["sample one", "sample two"])
        assert json.loads(transport.sent[-1])["samples"] == ["sample one", "sample two"]
