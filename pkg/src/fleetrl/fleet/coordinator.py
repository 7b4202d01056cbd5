"""Snapshot coordinator: the single writer of committed snapshot versions.

A commit writes ``snapshots/<v>.json`` (immutable record list) and then
swaps ``snapshots/CURRENT`` to point at it; both writes are temp+rename, so
readers always see a complete previous or complete new version.  Notifies
are acked only after the pointer swap, which makes every crash point safe:
unacked notifies are redelivered and already-committed ids are skipped.
"""

from __future__ import annotations

import enum
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from fleetrl.fleet.store import EpisodeStore, atomic_write
from fleetrl.errors import ReliabilityError

CURRENT = "CURRENT"


class KillPoint(str, enum.Enum):
    POST_PAYLOAD_PRE_NOTIFY = "post_payload_pre_notify"   # actor side
    POST_NOTIFY_PRE_COMMIT = "post_notify_pre_commit"     # coordinator side
    MID_COMMIT = "mid_commit"                             # coordinator, data written, pointer not


class Killed(Exception):
    """Simulated process crash at a kill point."""

    def __init__(self, point: KillPoint):
        super().__init__(point.value)
        self.point = point


class KillSwitch:
    """Deterministic crash schedule: fire at the listed occurrence numbers of each point."""

    def __init__(self, schedule: dict | None = None):
        self.schedule = {KillPoint(k): set(v) for k, v in (schedule or {}).items()}
        self.counts = {p: 0 for p in KillPoint}
        self.fired: list[tuple[KillPoint, int]] = []
        self._lock = threading.Lock()

    @classmethod
    def every(cls, period: int, points=tuple(KillPoint), limit: int = 10_000) -> "KillSwitch":
        return cls({p: range(period, limit, period) for p in points})

    def check(self, point: KillPoint) -> None:
        with self._lock:
            self.counts[point] += 1
            n = self.counts[point]
            hit = n in self.schedule.get(point, ())
            if hit:
                self.fired.append((point, n))
        if hit:
            raise Killed(point)


@dataclass(frozen=True)
class SnapshotVersion:
    version: int
    records: tuple[str, ...]
    committed_at: float

    def to_json(self) -> str:
        return json.dumps({"version": self.version, "records": list(self.records),
                           "committed_at": self.committed_at})

    @classmethod
    def from_json(cls, text: str) -> "SnapshotVersion":
        d = json.loads(text)
        return cls(int(d["version"]), tuple(d["records"]), float(d["committed_at"]))


EMPTY = SnapshotVersion(0, (), 0.0)


def snapshot_dir(root) -> Path:
    return Path(root) / "snapshots"


def read_current(root) -> SnapshotVersion:
    """The committed snapshot the CURRENT pointer names (version 0 if none)."""
    d = snapshot_dir(root)
    try:
        v = int((d / CURRENT).read_text().strip())
    except FileNotFoundError:
        return EMPTY
    return read_version(root, v)


def read_version(root, version: int) -> SnapshotVersion:
    if version == 0:
        return EMPTY
    return SnapshotVersion.from_json((snapshot_dir(root) / f"{version}.json").read_text())


def committed_versions(root) -> list[int]:
    """Versions reachable from CURRENT (orphans from interrupted commits excluded)."""
    cur = read_current(root).version
    return list(range(1, cur + 1))


class Coordinator:
    """Consumes episode notifies and commits snapshot versions.

    ``step`` gathers notifies for up to ``window`` seconds, validates them
    against the store, and commits once if anything new arrived.
    """

    def __init__(self, root, store: EpisodeStore, bus, *, window: float = 0.2,
                 kill: KillSwitch | None = None, events=None):
        self.root = Path(root)
        self.store, self.bus, self.window = store, bus, window
        self.kill = kill or KillSwitch()
        self.events = events
        snapshot_dir(root).mkdir(parents=True, exist_ok=True)
        self.current = read_current(root)
        self._committed = set(self.current.records)
        self.stats = {"commits": 0, "duplicates": 0, "requeued": 0}

    def _gather(self, max_wait: float) -> list:
        msgs = []
        end = time.monotonic() + max_wait
        while True:
            left = end - time.monotonic()
            m = self.bus.receive("episode_notify", timeout=max(left, 0.0))
            if m is None:
                break
            msgs.append(m)
        return msgs

    def step(self, max_wait: float | None = None) -> SnapshotVersion | None:
        msgs = self._gather(self.window if max_wait is None else max_wait)
        if not msgs:
            return None
        new, ack_now, ack_after = [], [], []
        seen = set()
        for m in msgs:
            eid = m.ref
            if eid in self._committed:
                self.stats["duplicates"] += 1
                ack_now.append(m.delivery_id)
            elif eid in seen:
                # same episode twice in this batch: safe to ack only once committed
                self.stats["duplicates"] += 1
                ack_after.append(m.delivery_id)
            elif self.store.verify(eid):
                new.append(eid)
                seen.add(eid)
                ack_after.append(m.delivery_id)
            else:
                # not acked: redelivered later, committed once the upload verifies
                self.stats["requeued"] += 1
        for d in ack_now:
            self.bus.ack(d)
        if not new:
            return None
        self.kill.check(KillPoint.POST_NOTIFY_PRE_COMMIT)
        snap = SnapshotVersion(self.current.version + 1, self.current.records + tuple(new), time.time())
        d = snapshot_dir(self.root)
        atomic_write(d / f"{snap.version}.json", snap.to_json().encode())
        self.kill.check(KillPoint.MID_COMMIT)
        atomic_write(d / CURRENT, str(snap.version).encode())
        self.current = snap
        self._committed.update(new)
        self.stats["commits"] += 1
        if self.events is not None:
            for eid in new:
                self.events.record("available", eid)
        for d_id in ack_after:
            self.bus.ack(d_id)
        return snap


def run_coordinator(root, store, bus, stop: threading.Event, *, window: float = 0.2,
                    kill: KillSwitch | None = None, events=None, on_restart=None,
                    drain_timeout: float = 30.0) -> None:
    """Coordinator loop that restarts itself (fresh state from disk) after simulated crashes."""
    coord = Coordinator(root, store, bus, window=window, kill=kill, events=events)
    while not stop.is_set():
        try:
            coord.step()
        except Killed as k:
            if on_restart is not None:
                on_restart(k.point)
            coord = Coordinator(root, store, bus, window=window, kill=kill, events=events)
    # final drain; a notify whose upload never verifies is left pending for the audit
    end = time.monotonic() + drain_timeout
    while time.monotonic() < end:
        try:
            if coord.step(max_wait=0.05) is None and not bus.unacked("episode_notify"):
                break
        except Killed:
            coord = Coordinator(root, store, bus, window=window, kill=kill, events=events)
        if not bus.unacked("episode_notify"):
            break
        time.sleep(0.01)


def check_snapshot_chain(root) -> list[str]:
    """Structural problems in the committed chain (empty list means healthy)."""
    problems = []
    prev: tuple[str, ...] = ()
    for v in committed_versions(root):
        try:
            snap = read_version(root, v)
        except (OSError, ValueError) as e:
            problems.append(f"version {v} unreadable: {e}")
            continue
        if snap.records[:len(prev)] != prev:
            problems.append(f"version {v} does not extend version {v - 1}")
        if len(set(snap.records)) != len(snap.records):
            problems.append(f"version {v} lists a record twice")
        prev = snap.records
    return problems
