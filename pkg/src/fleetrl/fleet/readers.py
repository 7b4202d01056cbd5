"""Replay readers synchronised on snapshot versions.

At every barrier the barrier action reads the CURRENT pointer exactly once
and all readers then load that version, so every reader holds an identical
record list after each barrier, no matter how commits race with it.
"""

from __future__ import annotations

import queue
import threading
import time
from pathlib import Path

from fleetrl.fleet.coordinator import SnapshotVersion, read_current, read_version
from fleetrl.fleet.store import EpisodeStore


class SnapshotReader:
    def __init__(self, reader_id: int, root):
        self.reader_id = reader_id
        self.root = Path(root)
        self.view: SnapshotVersion | None = None
        self.history: list[int] = []

    def load(self, version: int) -> SnapshotVersion:
        snap = read_version(self.root, version)
        if self.view is not None and snap.version < self.view.version:
            raise RuntimeError(f"reader {self.reader_id} would move backwards "
                               f"({self.view.version} -> {snap.version})")
        self.view = snap
        self.history.append(snap.version)
        return snap


class BarrierGroup:
    """N readers meeting at a reusable barrier; the action fixes one target version."""

    def __init__(self, root, num_readers: int, timeout: float = 5.0, stop_when=None):
        self.root = Path(root)
        self.n, self.timeout = num_readers, timeout
        self.readers = [SnapshotReader(i, root) for i in range(num_readers)]
        self.target = 0
        self._floor = 0
        self.rounds: list[dict[int, int]] = []
        self._round: dict[int, int] = {}
        self._lock = threading.Lock()
        self.aborts = 0
        self.stop_when = stop_when
        self.stop_now = False
        self._barrier = threading.Barrier(num_readers, action=self._pick, timeout=timeout)

    def _pick(self) -> None:
        # the previous round is complete once everyone is back at the barrier
        if self._round:
            self.rounds.append(self._round)
        self._round = {}
        self.target = max(read_current(self.root).version, self._floor)
        self._floor = self.target
        # decided once per round so every reader leaves after the same barrier
        self.stop_now = bool(self.stop_when and self.stop_when(len(self.rounds)))

    def restart_reader(self, i: int) -> None:
        """Replace reader ``i`` with a fresh instance; it rejoins at the next barrier."""
        old = self.readers[i]
        fresh = SnapshotReader(i, self.root)
        fresh.history = list(old.history)
        self.readers[i] = fresh

    def sync(self, i: int) -> SnapshotVersion | None:
        """Called by reader ``i``; returns its view, or None if the barrier aborted."""
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            with self._lock:
                self.aborts += 1
                if self._barrier.broken:
                    self._barrier.reset()
            return None
        snap = self.readers[i].load(self.target)
        with self._lock:
            self._round[i] = snap.version
        return snap

    def finish(self) -> None:
        if self._round:
            self.rounds.append(self._round)
            self._round = {}

    def consistent(self) -> bool:
        return all(len(set(r.values())) == 1 and len(r) == self.n for r in self.rounds)

    def monotone(self) -> bool:
        return all(all(a <= b for a, b in zip(r.history, r.history[1:])) for r in self.readers)


class Prefetcher:
    """Background stage that follows CURRENT and queues newly committed episodes."""

    def __init__(self, root, store: EpisodeStore, *, maxsize: int = 256, poll: float = 0.02):
        self.root, self.store = Path(root), store
        self.q: queue.Queue = queue.Queue(maxsize=maxsize)
        self.poll = poll
        self.version = 0
        self.seen: set[str] = set()
        self._stop = threading.Event()
        self._t = threading.Thread(target=self._run, daemon=True)

    def start(self) -> "Prefetcher":
        self._t.start()
        return self

    def _run(self) -> None:
        while not self._stop.is_set():
            snap = read_current(self.root)
            if snap.version > self.version:
                for eid in snap.records:
                    if eid in self.seen:
                        continue
                    ep = self.store.get(eid)
                    while not self._stop.is_set():
                        try:
                            self.q.put((snap.version, ep), timeout=0.1)
                            break
                        except queue.Full:
                            continue
                    self.seen.add(eid)
                self.version = snap.version
            time.sleep(self.poll)

    def drain(self) -> list:
        out = []
        while True:
            try:
                out.append(self.q.get_nowait())
            except queue.Empty:
                return out

    def stop(self) -> None:
        self._stop.set()
        self._t.join(timeout=5)
