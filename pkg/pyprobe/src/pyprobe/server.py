"""Probe wire-protocol server: JSON lines, strictly one response per request.

Accepts both payload forms on every data op: pre-tokenized ids (clipped into
the byte vocabulary) and, because the handshake declares `tokenizer: remote`,
raw text that the adapter tokenizes itself. Any per-request exception turns
into {"ok": false, "error": ...} and the loop keeps serving; EOF is a clean
shutdown.
"""

from __future__ import annotations

import json
import socket
import sys
from dataclasses import dataclass

from .model import ModelConfig, ProbeModel, logprob_stats


@dataclass
class AdapterConfig:
    model: ModelConfig
    pooling: str = "mean-hidden"  # mean-hidden | stats
    transport: str = "stdio"  # stdio | tcp:<port>

    @property
    def feature_dim(self) -> int:
        return self.model.hidden if self.pooling == "mean-hidden" else 8


class ProtocolServer:
    def __init__(self, cfg: AdapterConfig):
        self.cfg = cfg
        self.model = ProbeModel(cfg.model)

    def _ids_of(self, req: dict) -> list[int]:
        if "text" in req:
            return self.model.live.encode_text(req["text"])
        return self.model.live.clip_tokens(req.get("tokens", []))

    def _mask_index(self, req: dict, ids: list[int]) -> int:
        raw = req.get("mask_from", 0)
        if not isinstance(raw, int) or raw < 0:
            return 0
        if "text" in req:
            # char offset -> token index; byte-level tokens make this exact
            prefix = self.model.live.encode_text(req["text"][:raw])
            return min(len(prefix), len(ids))
        return min(raw, len(ids))

    def _features(self, ids: list[int], model) -> list[float]:
        if self.cfg.pooling == "mean-hidden":
            return model.mean_hidden(ids)
        return logprob_stats(model.token_logprobs(ids))

    def handle(self, req: dict) -> tuple[dict, bool]:
        """Response object plus whether to keep serving."""
        op = req.get("op")
        if op == "hello":
            return {"ok": True, "feature_dim": self.cfg.feature_dim, "tokenizer": "remote"}, True
        if op == "logprobs":
            ids = self._ids_of(req)
            lp = self.model.live.token_logprobs(ids)
            return {"ok": True, "logprobs": lp, "mask_from": self._mask_index(req, ids)}, True
        if op == "update":
            samples = req.get("samples", [])
            batches = [
                self.model.live.encode_text(s) if isinstance(s, str) else self.model.live.clip_tokens(s)
                for s in samples
            ]
            loss = self.model.sft_step(batches)
            return {"ok": True, "loss": loss}, True
        if op == "features":
            ids = self._ids_of(req)
            z1 = self._features(ids, self.model.frozen)
            z2 = self._features(ids, self.model.live)
            return {"ok": True, "z1": z1, "z2": z2}, True
        if op == "snapshot":
            self.model.snapshot()
            return {"ok": True}, True
        if op == "shutdown":
            return {"ok": True}, False
        return {"ok": False, "error": f"unknown op {op!r}"}, True

    def serve_lines(self, reader, writer) -> int:
        for line in reader:
            if isinstance(line, bytes):
                line = line.decode("utf-8")
            if not line.strip():
                continue
            try:
                req = json.loads(line)
                if not isinstance(req, dict):
                    raise ValueError("request must be a JSON object")
                resp, keep_going = self.handle(req)
            except Exception as exc:  # noqa: BLE001 - protocol contract: report and continue
                resp, keep_going = {"ok": False, "error": str(exc)}, True
            writer.write(json.dumps(resp) + "\n")
            writer.flush()
            if not keep_going:
                return 0
        return 0  # EOF: clean shutdown


class _SocketWriter:
    def __init__(self, conn):
        self.conn = conn

    def write(self, text: str) -> None:
        self.conn.sendall(text.encode("utf-8"))

    def flush(self) -> None:
        pass


def _socket_lines(conn):
    buf = b""
    while True:
        chunk = conn.recv(65536)
        if not chunk:
            return
        buf += chunk
        while b"\n" in buf:
            line, buf = buf.split(b"\n", 1)
            yield line


def serve(cfg: AdapterConfig) -> int:
    server = ProtocolServer(cfg)
    if cfg.transport == "stdio":
        return server.serve_lines(sys.stdin, sys.stdout)
    if cfg.transport.startswith("tcp:"):
        port = int(cfg.transport.split(":", 1)[1])
        with socket.socket() as sock:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.bind(("127.0.0.1", port))
            sock.listen(1)
            print(f"pyprobe listening on 127.0.0.1:{sock.getsockname()[1]}", file=sys.stderr, flush=True)
            conn, _ = sock.accept()
            with conn:
                return server.serve_lines(_socket_lines(conn), _SocketWriter(conn))
    raise ValueError(f"unknown transport {cfg.transport!r}")
