"""Simulated robot actors and pub-sub policy fanout."""

from __future__ import annotations

import json
import threading
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from fleetrl import diffcore as dc
from fleetrl import envsim
from fleetrl.envsim import TaskSpec
from fleetrl.fleet.coordinator import Killed, KillPoint, KillSwitch
from fleetrl.fleet.store import EpisodeStore, atomic_write
from fleetrl.flowpol import FlowPolicy


class _Stopped(Exception):
    pass


def weights_path(root, version: int) -> Path:
    return Path(root) / "weights" / f"v{version:06d}.json"


def write_weights(root, net: dc.DenseNet, version: int) -> Path:
    p = weights_path(root, version)
    atomic_write(p, json.dumps({"version": version, "net": dc.net_to_dict(net)}).encode())
    return p


def read_weights(root, version: int) -> dc.DenseNet:
    d = json.loads(weights_path(root, version).read_text())
    return dc.net_from_dict(d["net"])


def publish_weights(root, net: dc.DenseNet, version: int, buses: dict, events=None) -> int:
    """Persist the checkpoint, then send one weights_publish message per subscriber.

    Returns the fanout (number of subscribers addressed); zero subscribers is
    a valid, recorded outcome.
    """
    write_weights(root, net, version)
    if events is not None:
        events.record("publish", str(version))
    for actor_id, bus in sorted(buses.items()):
        bus.publish("weights_publish", f"{actor_id}:{version}")
    return len(buses)


class Actor:
    """One robot: roll out, upload, notify, and pick up newer policies between episodes."""

    def __init__(self, actor_id: int, specs: Sequence[TaskSpec], root, store: EpisodeStore,
                 notify_bus, weights_bus, *, initial_version: int = 0, seed: int = 0,
                 kill: KillSwitch | None = None, events=None, stall_chunks: float = envsim.STALL_CHUNKS,
                 horizon: int = envsim.HORIZON, n_flow: int = 10, max_episodes: int | None = None):
        self.actor_id = actor_id
        self.specs = list(specs)
        self.root, self.store = Path(root), store
        self.notify_bus, self.weights_bus = notify_bus, weights_bus
        self.seed, self.kill, self.events = seed, kill or KillSwitch(), events
        self.stall_chunks, self.horizon, self.n_flow = stall_chunks, horizon, n_flow
        self.max_episodes = max_episodes
        self.version = initial_version
        self.policy = read_weights(root, initial_version)
        self.applied: list[int] = [initial_version]
        self.received: list[int] = []
        self.crashes = 0
        self.discarded = 0
        self.paused = threading.Event()
        self.prefix = f"a{actor_id:02d}-"

    # ---- ids and recovery ------------------------------------------------
    def _next_index(self) -> int:
        return len(self.store.complete_ids(self.prefix))

    def recover(self) -> int:
        """Re-announce every completed upload of this actor (coordinator dedups)."""
        ids = self.store.complete_ids(self.prefix)
        for eid in ids:
            self.notify_bus.publish("episode_notify", eid)
        return len(ids)

    # ---- policy updates ----------------------------------------------------
    def fetch_policy(self) -> int:
        """Drain weight messages, ack them, apply the newest version if it is newer."""
        newest = self.version
        while True:
            m = self.weights_bus.receive("weights_publish", timeout=0.0)
            if m is None:
                break
            v = int(m.ref.split(":")[1])
            self.received.append(v)
            if self.events is not None:
                self.events.record("received", f"{v}:{self.actor_id}")
            newest = max(newest, v)
            self.weights_bus.ack(m.delivery_id)
        if newest > self.version:
            self.policy = read_weights(self.root, newest)
            self.version = newest
            self.applied.append(newest)
        return self.version

    # ---- one episode -------------------------------------------------------
    def run_episode(self, k: int, stop: threading.Event | None = None):
        spec = self.specs[k % len(self.specs)]
        seed = int(np.random.default_rng([self.seed, self.actor_id, k]).integers(2**31))
        pol = FlowPolicy(self.policy, self.horizon, envsim.ACTION_DIM, self.n_flow, self.version)

        def guard(i, state):
            if stop is not None and stop.is_set():
                raise _Stopped()

        ep = envsim.rollout_batch([spec], [seed], pol.chunk_fn([seed]), horizon=self.horizon,
                                  stall_chunks=self.stall_chunks, source="online",
                                  policy_version=self.version, on_chunk=guard)[0]
        ep.episode_id = f"{self.prefix}e{k:05d}"
        return ep

    def loop(self, stop: threading.Event) -> None:
        self.recover()
        while not stop.is_set():
            k = self._next_index()
            if self.max_episodes is not None and k >= self.max_episodes:
                return
            if self.paused.is_set():
                time.sleep(0.005)
                continue
            self.fetch_policy()
            try:
                ep = self.run_episode(k, stop)
            except _Stopped:
                self.discarded += 1
                return
            self.store.put(ep, {"actor": self.actor_id})
            if self.events is not None:
                self.events.record("episode_done", ep.episode_id)
            try:
                self.kill.check(KillPoint.POST_PAYLOAD_PRE_NOTIFY)
            except Killed:
                # process dies here; the restarted actor re-announces its uploads
                self.crashes += 1
                self.recover()
                continue
            self.notify_bus.publish("episode_notify", ep.episode_id)

    def applied_monotone(self) -> bool:
        return all(a < b for a, b in zip(self.applied, self.applied[1:]))
