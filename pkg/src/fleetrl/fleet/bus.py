"""Acknowledged message bus with an append-only on-disk journal.

Delivery is at-least-once: a message stays pending until acked and is
redelivered once its visibility window lapses.  Consumers must be
idempotent.  The journal is a sequence of length-prefixed binary records
``(delivery id, kind, ack flag, payload ref)``; ack records are appended,
never rewritten, and replaying the journal restores the pending set.

``BusServer``/``BusClient`` expose the same contract over TCP with
newline-delimited JSON frames.
"""

from __future__ import annotations

import json
import os
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fleetrl.errors import ContractViolation

KINDS = ("episode_notify", "weights_publish")
_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<QBBH")


@dataclass(frozen=True)
class BusMessage:
    delivery_id: int
    kind: str
    ref: str
    acked: bool = False

    def to_dict(self) -> dict:
        return {"delivery_id": self.delivery_id, "kind": self.kind, "ref": self.ref, "acked": self.acked}


def encode_record(msg: BusMessage) -> bytes:
    ref = msg.ref.encode()
    body = _HEAD.pack(msg.delivery_id, KINDS.index(msg.kind), int(msg.acked), len(ref)) + ref
    return _LEN.pack(len(body)) + body


def decode_records(raw: bytes) -> list[BusMessage]:
    """Parse a journal; a torn final record (crash mid-append) is ignored."""
    return _decode(raw)[0]


def _decode(raw: bytes) -> tuple[list[BusMessage], int]:
    out, pos = [], 0
    while pos + _LEN.size <= len(raw):
        (n,) = _LEN.unpack_from(raw, pos)
        if pos + _LEN.size + n > len(raw):
            break
        body = raw[pos + _LEN.size:pos + _LEN.size + n]
        did, kind, acked, rlen = _HEAD.unpack_from(body)
        ref = body[_HEAD.size:_HEAD.size + rlen].decode()
        out.append(BusMessage(did, KINDS[kind], ref, bool(acked)))
        pos += _LEN.size + n
    return out, pos


@dataclass
class BusFaults:
    drop_rate: float = 0.0        # delivery silently lost (message stays pending)
    duplicate_rate: float = 0.0   # delivered and immediately re-offered
    seed: int = 0


class DurableBus:
    def __init__(self, journal_path, *, redeliver_after: float = 0.5, faults: BusFaults | None = None):
        self.path = Path(journal_path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.redeliver_after = redeliver_after
        self.faults = faults or BusFaults()
        self._rng = np.random.default_rng([self.faults.seed, 23])
        self._cv = threading.Condition()
        self._msgs: dict[int, BusMessage] = {}
        self._acked: set[int] = set()
        self._inflight: dict[int, float] = {}
        self.stats = {"published": 0, "delivered": 0, "dropped": 0, "duplicated": 0, "redelivered": 0}
        if self.path.exists():
            recs, good = _decode(self.path.read_bytes())
            # drop a torn tail so later appends stay parseable
            os.truncate(self.path, good)
            for rec in recs:
                if rec.acked:
                    self._acked.add(rec.delivery_id)
                else:
                    self._msgs[rec.delivery_id] = rec
        self._next = max(list(self._msgs) + list(self._acked) + [0]) + 1
        self._fh = open(self.path, "ab")

    def close(self) -> None:
        with self._cv:
            if not self._fh.closed:
                self._fh.close()

    def _append(self, msg: BusMessage) -> None:
        self._fh.write(encode_record(msg))
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def publish(self, kind: str, ref: str) -> int:
        if kind not in KINDS:
            raise ContractViolation(f"unknown message kind {kind!r}")
        with self._cv:
            did = self._next
            self._next += 1
            msg = BusMessage(did, kind, ref)
            self._append(msg)
            self._msgs[did] = msg
            self.stats["published"] += 1
            self._cv.notify_all()
            return did

    def _ready(self, kind: str | None, now: float) -> BusMessage | None:
        for did in sorted(self._msgs):
            if did in self._acked:
                continue
            msg = self._msgs[did]
            if kind is not None and msg.kind != kind:
                continue
            t = self._inflight.get(did)
            if t is None or now - t >= self.redeliver_after:
                if t is not None:
                    self.stats["redelivered"] += 1
                return msg
        return None

    def receive(self, kind: str | None = None, timeout: float = 0.0) -> BusMessage | None:
        deadline = time.monotonic() + timeout
        with self._cv:
            while True:
                now = time.monotonic()
                msg = self._ready(kind, now)
                if msg is not None:
                    self._inflight[msg.delivery_id] = now
                    if self.faults.drop_rate and self._rng.random() < self.faults.drop_rate:
                        self.stats["dropped"] += 1
                        msg = None
                    else:
                        self.stats["delivered"] += 1
                        if self.faults.duplicate_rate and self._rng.random() < self.faults.duplicate_rate:
                            self.stats["duplicated"] += 1
                            self._inflight.pop(msg.delivery_id, None)
                        return msg
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._cv.wait(min(remaining, max(self.redeliver_after / 4, 0.005)))

    def ack(self, delivery_id: int) -> None:
        with self._cv:
            if delivery_id in self._acked:
                return
            msg = self._msgs.get(delivery_id)
            if msg is None:
                raise ContractViolation(f"unknown delivery id {delivery_id}")
            self._append(BusMessage(delivery_id, msg.kind, msg.ref, True))
            self._acked.add(delivery_id)
            self._inflight.pop(delivery_id, None)

    def unacked(self, kind: str | None = None) -> list[BusMessage]:
        with self._cv:
            return [m for d, m in sorted(self._msgs.items())
                    if d not in self._acked and (kind is None or m.kind == kind)]


# --------------------------------------------------------------------------
# TCP transport

class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        bus: DurableBus = self.server.bus   # type: ignore[attr-defined]
        for line in self.rfile:
            if not line.strip():
                continue
            try:
                req = json.loads(line)
                op = req["op"]
                if op == "publish":
                    resp = {"ok": True, "id": bus.publish(req["kind"], req["ref"])}
                elif op == "receive":
                    m = bus.receive(req.get("kind"), float(req.get("timeout", 0.0)))
                    resp = {"ok": True, "msg": m.to_dict() if m else None}
                elif op == "unacked":
                    resp = {"ok": True, "msgs": [m.to_dict() for m in bus.unacked(req.get("kind"))]}
                elif op == "ack":
                    bus.ack(int(req["id"]))
                    resp = {"ok": True}
                else:
                    resp = {"ok": False, "error": f"unknown op {op!r}"}
            except Exception as e:   # report, keep the connection alive
                resp = {"ok": False, "error": str(e)}
            self.wfile.write((json.dumps(resp) + "\n").encode())
            self.wfile.flush()


class BusServer:
    """Serves a DurableBus on ``host:port`` (port 0 picks a free port)."""

    def __init__(self, bus: DurableBus, host: str = "127.0.0.1", port: int = 0):
        self.bus = bus
        socketserver.ThreadingTCPServer.allow_reuse_address = True
        self._srv = socketserver.ThreadingTCPServer((host, port), _Handler)
        self._srv.daemon_threads = True
        self._srv.bus = bus   # type: ignore[attr-defined]
        self.address = self._srv.server_address
        self._thread = threading.Thread(target=self._srv.serve_forever, daemon=True)

    def start(self) -> "BusServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._srv.shutdown()
        self._srv.server_close()


class BusClient:
    """Same publish/receive/ack contract as DurableBus, over one TCP connection."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._r = self._sock.makefile("rb")
        self._lock = threading.Lock()

    def _call(self, req: dict) -> dict:
        with self._lock:
            self._sock.sendall((json.dumps(req) + "\n").encode())
            line = self._r.readline()
        if not line:
            raise ConnectionError("bus server closed the connection")
        resp = json.loads(line)
        if not resp.get("ok"):
            raise ConnectionError(resp.get("error", "bus error"))
        return resp

    def publish(self, kind: str, ref: str) -> int:
        return int(self._call({"op": "publish", "kind": kind, "ref": ref})["id"])

    def receive(self, kind: str | None = None, timeout: float = 0.0) -> BusMessage | None:
        m = self._call({"op": "receive", "kind": kind, "timeout": timeout})["msg"]
        return BusMessage(**m) if m else None

    def ack(self, delivery_id: int) -> None:
        self._call({"op": "ack", "id": delivery_id})

    def unacked(self, kind: str | None = None) -> list[BusMessage]:
        return [BusMessage(**m) for m in self._call({"op": "unacked", "kind": kind})["msgs"]]

    def close(self) -> None:
        self._r.close()
        self._sock.close()
