"""Threaded fleet handle for the online learner loop."""

from __future__ import annotations

import threading
from pathlib import Path
from typing import Sequence

from fleetrl import diffcore as dc
from fleetrl import envsim
from fleetrl.envsim import Episode, TaskSpec
from fleetrl.fleet.actors import Actor, publish_weights, write_weights
from fleetrl.fleet.bus import DurableBus
from fleetrl.fleet.coordinator import KillSwitch, run_coordinator
from fleetrl.fleet.latency import EventLog
from fleetrl.fleet.readers import Prefetcher
from fleetrl.fleet.store import EpisodeStore


class AsyncFleet:
    """Actors, coordinator and a prefetcher running as threads around a shared root.

    ``poll`` returns episodes from committed snapshots only, so the learner
    never trains on data outside a snapshot view.
    """

    def __init__(self, root, specs: Sequence[TaskSpec], initial: dc.DenseNet, *, num_actors: int = 4,
                 seed: int = 0, window: float = 0.2, stall_chunks: float = envsim.STALL_CHUNKS,
                 kill: KillSwitch | None = None, n_flow: int = 10):
        self.root = Path(root)
        self.events = EventLog()
        self.store = EpisodeStore(self.root)
        self.notify = DurableBus(self.root / "bus" / "notify.journal")
        self.weights = {a: DurableBus(self.root / "bus" / f"weights-{a:02d}.journal") for a in range(num_actors)}
        write_weights(self.root, initial, 0)
        self.actors = [Actor(a, specs, self.root, self.store, self.notify, self.weights[a], seed=seed,
                             kill=kill, events=self.events, stall_chunks=stall_chunks, n_flow=n_flow)
                       for a in range(num_actors)]
        self._stop_actors = threading.Event()
        self._stop_coord = threading.Event()
        self._threads = [threading.Thread(target=a.loop, args=(self._stop_actors,), daemon=True)
                         for a in self.actors]
        self._coord = threading.Thread(target=run_coordinator, daemon=True, args=(
            self.root, self.store, self.notify, self._stop_coord),
            kwargs={"window": window, "kill": kill, "events": self.events})
        self.prefetch = Prefetcher(self.root, self.store)
        self.ingested: list[str] = []

    def start(self) -> "AsyncFleet":
        self._coord.start()
        self.prefetch.start()
        for t in self._threads:
            t.start()
        return self

    def publish(self, policy: dc.DenseNet, version: int) -> int:
        return publish_weights(self.root, policy, version, self.weights, self.events)

    def poll(self) -> list[Episode]:
        eps = [ep for _, ep in self.prefetch.drain()]
        self.ingested.extend(e.episode_id for e in eps)
        return eps

    def close(self) -> None:
        self._stop_actors.set()
        for t in self._threads:
            t.join(timeout=120)
        self._stop_coord.set()
        self._coord.join(timeout=60)
        self.prefetch.stop()
        self.notify.close()
        for b in self.weights.values():
            b.close()
