"""Wire-protocol adapter: drive an external model as a probe.

JSON-lines over subprocess stdio or TCP, strictly request-response with one
call in flight. Requests are serialized canonically (sorted keys, no spaces)
so a recorded transcript is byte-reproducible.
"""

from __future__ import annotations

import json
import math
import os
import select
import shlex
import socket
import subprocess
from typing import Sequence

from .probe import Probe, ProbeError, ProbeReport

DEFAULT_TIMEOUT = 60.0


class ProbeHandshakeError(ProbeError):
    pass


class ProbeProtocolError(ProbeError):
    pass


class ProbeTimeoutError(ProbeError):
    pass


def canonical_request(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"


class _LineReader:
    """Line-buffered reads over a raw fd with a select() timeout."""

    def __init__(self, fd: int):
        self.fd = fd
        self.buf = b""

    def readline(self, timeout: float) -> bytes:
        while b"\n" not in self.buf:
            ready, _, _ = select.select([self.fd], [], [], timeout)
            if not ready:
                raise ProbeTimeoutError(f"no response within {timeout}s")
            chunk = os.read(self.fd, 65536)
            if not chunk:
                raise ProbeProtocolError("connection closed mid-conversation")
            self.buf += chunk
        line, self.buf = self.buf.split(b"\n", 1)
        return line


class _StdioTransport:
    def __init__(self, command: str):
        try:
            self.proc = subprocess.Popen(
                shlex.split(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
            )
        except OSError as exc:
            raise ProbeHandshakeError(f"cannot spawn probe process {command!r}: {exc}") from exc
        self.reader = _LineReader(self.proc.stdout.fileno())

    def send(self, line: bytes) -> None:
        try:
            self.proc.stdin.write(line)
            self.proc.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise ProbeProtocolError(f"probe process closed its stdin: {exc}") from exc

    def recv(self, timeout: float) -> bytes:
        return self.reader.readline(timeout)

    def close(self) -> None:
        for stream in (self.proc.stdin, self.proc.stdout):
            try:
                stream.close()
            except OSError:
                pass
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()


class _TcpTransport:
    def __init__(self, host: str, port: int, timeout: float):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ProbeHandshakeError(f"cannot connect to probe at {host}:{port}: {exc}") from exc
        self.reader = _LineReader(self.sock.fileno())

    def send(self, line: bytes) -> None:
        try:
            self.sock.sendall(line)
        except OSError as exc:
            raise ProbeProtocolError(f"probe connection lost: {exc}") from exc

    def recv(self, timeout: float) -> bytes:
        return self.reader.readline(timeout)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class RemoteProbe(Probe):
    """Probe handle forwarding every call over the wire protocol.

    With a `tokenizer: remote` handshake the server owns tokenization: payloads
    are rendered text, mask_from is a character offset, and loss masking uses
    the remote token index echoed in the response (full stream otherwise).
    """

    def __init__(self, transport, timeout: float = DEFAULT_TIMEOUT, record: list[bytes] | None = None):
        self._transport = transport
        self._timeout = timeout
        self.record = record
        self._closed = False
        hello = self._call({"op": "hello"})
        dim = hello.get("feature_dim")
        if not isinstance(dim, int) or dim < 1:
            raise ProbeHandshakeError(f"handshake returned invalid feature_dim {dim!r}")
        self._feature_dim = dim
        self.wants_text = hello.get("tokenizer") == "remote"

    @property
    def feature_dim(self) -> int:
        return self._feature_dim

    def _call(self, obj: dict) -> dict:
        line = canonical_request(obj)
        if self.record is not None:
            self.record.append(line)
        self._transport.send(line)
        raw = self._transport.recv(self._timeout)
        try:
            resp = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ProbeProtocolError(f"malformed response line {raw!r}: {exc.msg}") from exc
        if not isinstance(resp, dict) or "ok" not in resp:
            raise ProbeProtocolError(f"malformed response line {raw!r}: missing 'ok'")
        if not resp["ok"]:
            raise ProbeError(f"probe reported error: {resp.get('error', 'unknown')}")
        return resp

    def _payload_field(self, payload: Sequence[int] | str) -> dict:
        if self.wants_text:
            if not isinstance(payload, str):
                raise ProbeError("remote-tokenizer probe takes rendered text payloads")
            return {"text": payload}
        if isinstance(payload, str):
            raise ProbeError("token-mode probe takes token id payloads")
        return {"tokens": [int(t) for t in payload]}

    @staticmethod
    def _float_list(resp: dict, key: str, raw_hint: str) -> list[float]:
        values = resp.get(key)
        if not isinstance(values, list) or not all(isinstance(v, (int, float)) for v in values):
            raise ProbeProtocolError(f"response field {key!r} is not a float list ({raw_hint})")
        out = [float(v) for v in values]
        if not all(math.isfinite(v) for v in out):
            raise ProbeProtocolError(f"response field {key!r} contains non-finite values")
        return out

    def logprobs(self, payload, mask_from: int = 0) -> list[float]:
        req = {"op": "logprobs", "mask_from": int(mask_from), **self._payload_field(payload)}
        resp = self._call(req)
        return self._float_list(resp, "logprobs", "logprobs op")

    def _logprobs_with_mask(self, payload, mask_from: int) -> tuple[list[float], int]:
        req = {"op": "logprobs", "mask_from": int(mask_from), **self._payload_field(payload)}
        resp = self._call(req)
        lp = self._float_list(resp, "logprobs", "logprobs op")
        start = resp.get("mask_from", 0)
        if not isinstance(start, int) or not 0 <= start <= len(lp):
            raise ProbeProtocolError(f"response mask_from {start!r} out of range")
        return lp, start

    def update(self, batch) -> None:
        samples = [payload if self.wants_text else [int(t) for t in payload] for payload in batch]
        self._call({"op": "update", "samples": samples})

    def features(self, payload, output_mask=None):
        resp = self._call({"op": "features", **self._payload_field(payload)})
        z1 = self._float_list(resp, "z1", "features op")
        z2 = self._float_list(resp, "z2", "features op")
        if len(z1) != self._feature_dim or len(z2) != self._feature_dim:
            raise ProbeProtocolError(
                f"feature vectors of length {len(z1)}/{len(z2)} do not match handshake dim {self._feature_dim}"
            )
        return z1, z2

    def snapshot(self) -> None:
        self._call({"op": "snapshot"})

    def loss(self, enc) -> float:
        if not self.wants_text:
            return super().loss(enc)
        lp, start = self._logprobs_with_mask(enc.text, enc.mask_from_char)
        return -sum(lp[start:])

    def report(self, enc) -> ProbeReport:
        if not self.wants_text:
            return super().report(enc)
        lp, start = self._logprobs_with_mask(enc.text, enc.mask_from_char)
        z1, z2 = self.features(enc.text)
        return ProbeReport(
            token_logprobs=lp,
            sample_loss=-sum(lp[start:]),
            features_initial=z1,
            features_current=z2,
            feature_dim=self._feature_dim,
        )

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._call({"op": "shutdown"})
        except ProbeError:
            pass
        finally:
            self._transport.close()


def external_probe(endpoint: str, timeout: float = DEFAULT_TIMEOUT, record: list[bytes] | None = None) -> RemoteProbe:
    """Connect to `exec:<command>` or `tcp:<host>:<port>` and handshake."""
    if endpoint.startswith("exec:"):
        transport = _StdioTransport(endpoint[len("exec:") :])
    elif endpoint.startswith("tcp:"):
        rest = endpoint[len("tcp:") :]
        host, sep, port = rest.rpartition(":")
        if not sep or not port.isdigit():
            raise ProbeHandshakeError(f"bad tcp endpoint {endpoint!r}, expected tcp:<host>:<port>")
        transport = _TcpTransport(host, int(port), timeout)
    else:
        raise ProbeHandshakeError(f"unknown probe endpoint {endpoint!r}")
    try:
        return RemoteProbe(transport, timeout=timeout, record=record)
    except ProbeError:
        transport.close()
        raise
