"""Reliability and latency benchmark for the data plane under fault injection."""

from __future__ import annotations

import dataclasses
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fleetrl import diffcore as dc
from fleetrl import envsim, flowpol
from fleetrl.fleet.actors import Actor, publish_weights, write_weights
from fleetrl.fleet.audit import AuditReport, audit
from fleetrl.fleet.bus import BusClient, BusFaults, BusServer, DurableBus
from fleetrl.fleet.coordinator import KillPoint, KillSwitch, run_coordinator
from fleetrl.fleet.latency import EventLog, latency_report
from fleetrl.fleet.readers import BarrierGroup
from fleetrl.fleet.store import EpisodeStore

log = logging.getLogger(__name__)


@dataclass
class FleetConfig:
    actors: int = 4
    episodes_per_actor: int = 100
    readers: int = 3
    min_barriers: int = 500
    tasks: tuple = ("reach1",)
    bus_mode: str = "local"               # local | tcp
    port: int = 0
    window: float = 0.2                   # coordinator batching window (s)
    redeliver_after: float = 0.2
    publish_every: float = 0.25           # seconds between weight publishes
    chaos: bool = False
    kill_period: int = 4                  # fire each kill point every k-th occurrence
    drop_rate: float = 0.0
    duplicate_rate: float = 0.0
    store_failures: int = 0               # injected transient payload-write failures
    field_hidden: tuple = (16, 16)
    timeout: float = 600.0
    seed: int = 0

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        self.field_hidden = tuple(self.field_hidden)
        if self.bus_mode not in ("local", "tcp"):
            raise ValueError(f"unknown bus_mode {self.bus_mode!r}")

    @classmethod
    def full_chaos(cls, **kw) -> "FleetConfig":
        base = dict(chaos=True, drop_rate=0.1, duplicate_rate=0.1, store_failures=5)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tasks"] = list(self.tasks)
        d["field_hidden"] = list(self.field_hidden)
        return d


TASKS = {"reach1": envsim.reach1, "chain5": envsim.chain5}


@dataclass
class BenchReport:
    audit: AuditReport
    expected: int
    barriers: int
    barrier_consistent: bool
    reader_monotone: bool
    actor_versions_monotone: bool
    applied_versions: dict
    received_versions: dict
    latency: dict
    kills: list
    bus_stats: dict
    elapsed: float

    @property
    def ok(self) -> bool:
        return (self.audit.ok and self.audit.completed == self.expected and self.barrier_consistent
                and self.reader_monotone and self.actor_versions_monotone)

    def violations(self) -> list[str]:
        out = []
        if not self.audit.ok:
            out.append("episode accounting failed")
        if self.audit.completed != self.expected:
            out.append(f"{self.audit.completed} of {self.expected} episodes completed")
        if not self.barrier_consistent:
            out.append("readers disagreed at a barrier")
        if not self.reader_monotone:
            out.append("a reader moved backwards")
        if not self.actor_versions_monotone:
            out.append("an actor applied a non-increasing policy version")
        return out

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violations": self.violations(), "audit": self.audit.to_dict(),
                "expected": self.expected, "barriers": self.barriers,
                "barrier_consistent": self.barrier_consistent, "reader_monotone": self.reader_monotone,
                "actor_versions_monotone": self.actor_versions_monotone,
                "applied_versions": self.applied_versions, "latency": self.latency,
                "kills": self.kills, "bus_stats": self.bus_stats, "elapsed": self.elapsed}


def run_fleetbench(cfg: FleetConfig, root) -> BenchReport:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    specs = [TASKS[t]() for t in cfg.tasks]
    events = EventLog()
    store = EpisodeStore(root)
    store.fail_next_writes = cfg.store_failures
    faults = BusFaults(cfg.drop_rate, cfg.duplicate_rate, cfg.seed)
    if cfg.chaos:
        coord_kill = KillSwitch.every(cfg.kill_period, (KillPoint.POST_NOTIFY_PRE_COMMIT, KillPoint.MID_COMMIT))
        actor_kill = KillSwitch.every(cfg.kill_period, (KillPoint.POST_PAYLOAD_PRE_NOTIFY,))
    else:
        coord_kill, actor_kill = KillSwitch(), KillSwitch()

    notify_local = DurableBus(root / "bus" / "notify.journal", redeliver_after=cfg.redeliver_after, faults=faults)
    weights_local = {a: DurableBus(root / "bus" / f"weights-{a:02d}.journal",
                                   redeliver_after=cfg.redeliver_after, faults=faults)
                     for a in range(cfg.actors)}
    servers, clients = [], []
    if cfg.bus_mode == "tcp":
        srv = BusServer(notify_local, port=cfg.port).start()
        servers.append(srv)
        notify_for_actor = lambda: clients.append(BusClient(*srv.address)) or clients[-1]
        notify_coord = BusClient(*srv.address)
        clients.append(notify_coord)
    else:
        notify_for_actor = lambda: notify_local
        notify_coord = notify_local

    od = envsim.obs_dim()
    D = envsim.HORIZON * envsim.ACTION_DIM
    net = flowpol.init_field(od, D, cfg.field_hidden, cfg.seed)
    write_weights(root, net, 0)

    actors = [Actor(a, specs, root, store, notify_for_actor(), weights_local[a], seed=cfg.seed,
                    kill=actor_kill, events=events, max_episodes=cfg.episodes_per_actor)
              for a in range(cfg.actors)]

    stop_actors = threading.Event()
    stop_coord = threading.Event()
    stop_readers = threading.Event()
    errors: list[BaseException] = []

    def guarded(fn):
        def run():
            try:
                fn()
            except BaseException as e:   # surfaced after join
                errors.append(e)
                log.exception("fleet thread failed")
        return run

    coord_t = threading.Thread(target=guarded(lambda: run_coordinator(
        root, store, notify_coord, stop_coord, window=cfg.window, kill=coord_kill, events=events)))
    actor_ts = [threading.Thread(target=guarded(lambda a=a: a.loop(stop_actors))) for a in actors]

    group = BarrierGroup(root, cfg.readers, timeout=5.0,
                         stop_when=lambda n: stop_readers.is_set() and n >= cfg.min_barriers)

    def reader(i):
        while True:
            group.sync(i)
            if group.stop_now:
                return
            time.sleep(0.002)

    reader_ts = [threading.Thread(target=guarded(lambda i=i: reader(i))) for i in range(cfg.readers)]

    version = [0]

    def publisher():
        rng = np.random.default_rng([cfg.seed, 31])
        cur = net
        while not stop_actors.is_set():
            time.sleep(cfg.publish_every)
            cur = cur.with_params(cur.params.like(cur.params.values + 1e-3 * rng.standard_normal(len(cur.params))))
            version[0] += 1
            publish_weights(root, cur, version[0], weights_local, events)

    pub_t = threading.Thread(target=guarded(publisher))
    for t in [coord_t, pub_t, *actor_ts, *reader_ts]:
        t.start()
    deadline = t0 + cfg.timeout
    for t in actor_ts:
        t.join(timeout=max(deadline - time.monotonic(), 0.1))
    stop_actors.set()
    pub_t.join()
    stop_coord.set()
    coord_t.join(timeout=60)
    stop_readers.set()
    for t in reader_ts:
        t.join(timeout=120)
    group.finish()
    for c in clients:
        c.close()
    for s in servers:
        s.stop()
    notify_local.close()
    for b in weights_local.values():
        b.close()
    if errors:
        raise errors[0]

    rep = audit(root, store)
    return BenchReport(
        audit=rep, expected=cfg.actors * cfg.episodes_per_actor, barriers=len(group.rounds),
        barrier_consistent=group.consistent(), reader_monotone=group.monotone(),
        actor_versions_monotone=all(a.applied_monotone() for a in actors),
        applied_versions={a.actor_id: a.applied for a in actors},
        received_versions={a.actor_id: a.received for a in actors},
        latency=latency_report(events),
        kills=[(p.value, n) for p, n in coord_kill.fired + actor_kill.fired],
        bus_stats=dict(notify_local.stats), elapsed=time.monotonic() - t0)
