import threading
import time

import numpy as np
import pytest

from fleetrl import envsim, flowpol
from fleetrl.errors import ContractViolation, ReliabilityError
from fleetrl.fleet import actors as A
from fleetrl.fleet.audit import audit
from fleetrl.fleet.bench import FleetConfig, run_fleetbench
from fleetrl.fleet.bus import BusClient, BusFaults, BusServer, DurableBus, decode_records
from fleetrl.fleet.coordinator import (Coordinator, KillPoint, KillSwitch, Killed, check_snapshot_chain,
                                       read_current)
from fleetrl.fleet.latency import EventLog, latency_report, percentile
from fleetrl.fleet.readers import BarrierGroup
from fleetrl.fleet.store import EpisodeStore, atomic_write

SPEC = envsim.reach1(0)


def episode(eid, seed=0):
    ep = envsim.expert_episode(SPEC, seed, 0.0)
    ep.episode_id = eid
    return ep


def small_net(seed=0):
    return flowpol.init_field(envsim.obs_dim(), envsim.HORIZON * envsim.ACTION_DIM, (4,), seed)


# ---- store ------------------------------------------------------------------

def test_store_marker_gates_visibility(tmp_path):
    store = EpisodeStore(tmp_path)
    ep = episode("e1")
    store.fail_next_writes = 3
    store.put(ep)
    assert store.verify("e1") and store.complete_ids() == ["e1"]
    assert store.get("e1").to_json() == ep.to_json()
    # payload without marker: not visible
    atomic_write(store.payload_path("e2"), b"partial")
    assert "e2" not in store.complete_ids() and not store.verify("e2")
    with pytest.raises(ReliabilityError):
        store.get("e2")


def test_store_gives_up_after_bounded_retries(tmp_path):
    store = EpisodeStore(tmp_path, max_retries=2, backoff=0.0)
    store.fail_next_writes = 5
    with pytest.raises(OSError):
        store.put(episode("e1"))
    assert store.complete_ids() == []


def test_corrupted_payload_fails_verification(tmp_path):
    store = EpisodeStore(tmp_path)
    store.put(episode("e1"))
    p = store.payload_path("e1")
    p.write_bytes(p.read_bytes()[:-10])
    assert not store.verify("e1")


def test_stop_mid_episode_leaves_no_record(tmp_path):
    store = EpisodeStore(tmp_path)
    A.write_weights(tmp_path, small_net(), 0)
    bus = DurableBus(tmp_path / "n.journal")
    actor = A.Actor(0, [SPEC], tmp_path, store, bus, DurableBus(tmp_path / "w.journal"))
    stop = threading.Event()
    stop.set()
    actor.loop(stop)
    assert store.all_ids() == [] and bus.unacked() == []


# ---- bus ----------------------------------------------------------------------

def test_bus_journal_replay_and_redelivery(tmp_path):
    path = tmp_path / "bus.journal"
    bus = DurableBus(path, redeliver_after=0.05)
    ids = [bus.publish("episode_notify", f"e{i}") for i in range(3)]
    m = bus.receive("episode_notify")
    assert m.ref == "e0"
    bus.ack(m.delivery_id)
    m1 = bus.receive("episode_notify")
    assert m1.ref == "e1"
    # unacked e1 is redelivered after the visibility window
    time.sleep(0.06)
    assert bus.receive("episode_notify").ref == "e1"
    bus.close()
    with open(path, "ab") as f:
        f.write(b"\x40\x00\x00\x00torn")          # crash mid-append
    again = DurableBus(path)
    assert [m.ref for m in again.unacked()] == ["e1", "e2"]
    assert again.publish("episode_notify", "e3") == ids[-1] + 1
    again.ack(again.receive().delivery_id)
    again.ack(again.receive().delivery_id)
    recs = decode_records(path.read_bytes())
    assert sum(r.acked for r in recs) == 3
    with pytest.raises(ContractViolation):
        again.publish("bogus", "x")
    with pytest.raises(ContractViolation):
        again.ack(999)


def test_bus_faults_never_lose_messages(tmp_path):
    bus = DurableBus(tmp_path / "b.journal", redeliver_after=0.01,
                     faults=BusFaults(drop_rate=0.3, duplicate_rate=0.3, seed=1))
    for i in range(50):
        bus.publish("episode_notify", f"e{i}")
    got = set()
    deadline = time.monotonic() + 10
    while bus.unacked() and time.monotonic() < deadline:
        m = bus.receive(timeout=0.05)
        if m is not None:
            got.add(m.ref)
            bus.ack(m.delivery_id)
    assert got == {f"e{i}" for i in range(50)}
    assert bus.stats["dropped"] > 0 and bus.stats["duplicated"] > 0


def test_bus_over_tcp(tmp_path):
    local = DurableBus(tmp_path / "t.journal")
    srv = BusServer(local).start()
    try:
        c = BusClient(*srv.address)
        c.publish("weights_publish", "0:1")
        m = c.receive("weights_publish", timeout=1.0)
        assert m.ref == "0:1" and len(c.unacked()) == 1
        c.ack(m.delivery_id)
        assert c.unacked() == [] and c.receive(timeout=0.0) is None
        with pytest.raises(ConnectionError):
            c.publish("bogus", "x")
        c.close()
    finally:
        srv.stop()
        local.close()


# ---- coordinator ----------------------------------------------------------------

def test_coordinator_commit_dedup_and_requeue(tmp_path):
    store = EpisodeStore(tmp_path)
    bus = DurableBus(tmp_path / "n.journal", redeliver_after=0.01)
    coord = Coordinator(tmp_path, store, bus, window=0.01)
    assert coord.step() is None                     # nothing new, no version
    store.put(episode("e1"))
    bus.publish("episode_notify", "e1")
    bus.publish("episode_notify", "e1")
    bus.publish("episode_notify", "ghost")          # no upload yet
    snap = coord.step(0.05)
    assert snap.version == 1 and snap.records == ("e1",)
    assert [m.ref for m in bus.unacked()] == ["ghost"]
    bus.publish("episode_notify", "e1")             # duplicate after commit
    time.sleep(0.02)
    assert coord.step(0.05) is None and read_current(tmp_path).version == 1
    store.put(episode("ghost", 1))
    time.sleep(0.02)
    assert coord.step(0.05).records == ("e1", "ghost")
    assert bus.unacked() == [] and audit(tmp_path, store).ok


@pytest.mark.parametrize("point", [KillPoint.POST_NOTIFY_PRE_COMMIT, KillPoint.MID_COMMIT])
def test_coordinator_crash_keeps_previous_version(tmp_path, point):
    store = EpisodeStore(tmp_path)
    bus = DurableBus(tmp_path / "n.journal", redeliver_after=0.01)
    kill = KillSwitch({point: [2]})
    coord = Coordinator(tmp_path, store, bus, window=0.01, kill=kill)
    store.put(episode("e1"))
    bus.publish("episode_notify", "e1")
    coord.step(0.05)
    store.put(episode("e2", 1))
    bus.publish("episode_notify", "e2")
    with pytest.raises(Killed):
        coord.step(0.05)
    assert read_current(tmp_path).records == ("e1",)
    bus.close()
    bus = DurableBus(tmp_path / "n.journal", redeliver_after=0.01)      # process restart
    coord = Coordinator(tmp_path, store, bus, window=0.01, kill=kill)
    snap = coord.step(0.05)
    assert snap.version == 2 and snap.records == ("e1", "e2")
    assert check_snapshot_chain(tmp_path) == [] and audit(tmp_path, store).ok


def test_actor_crash_before_notify_is_ingested_once(tmp_path):
    store = EpisodeStore(tmp_path)
    A.write_weights(tmp_path, small_net(), 0)
    bus = DurableBus(tmp_path / "n.journal", redeliver_after=0.01)
    kill = KillSwitch({KillPoint.POST_PAYLOAD_PRE_NOTIFY: [1, 3]})
    actor = A.Actor(0, [SPEC], tmp_path, store, bus, DurableBus(tmp_path / "w.journal"),
                    kill=kill, max_episodes=4)
    actor.loop(threading.Event())
    assert actor.crashes == 2
    coord = Coordinator(tmp_path, store, bus, window=0.01)
    while bus.unacked():
        coord.step(0.05)
    rep = audit(tmp_path, store)
    assert rep.ok and rep.completed == 4 and rep.committed == 4


# ---- readers ------------------------------------------------------------------

def _race(tmp_path, readers, rounds, restart_at=None):
    store = EpisodeStore(tmp_path)
    bus = DurableBus(tmp_path / "n.journal", redeliver_after=0.01)
    coord = Coordinator(tmp_path, store, bus, window=0.0)
    group = BarrierGroup(tmp_path, readers, stop_when=lambda n: n >= rounds)
    done = threading.Event()

    def committer():
        k = 0
        while not done.is_set():
            eid = f"e{k:05d}"
            store.put(episode(eid, k % 7))
            bus.publish("episode_notify", eid)
            coord.step(0.0)
            k += 1

    def reader(i):
        while True:
            group.sync(i)
            if restart_at is not None and i == 0 and len(group.rounds) == restart_at:
                group.restart_reader(0)
            if group.stop_now:
                return

    t = threading.Thread(target=committer)
    t.start()
    ts = [threading.Thread(target=reader, args=(i,)) for i in range(readers)]
    for x in ts:
        x.start()
    for x in ts:
        x.join(timeout=120)
    done.set()
    t.join()
    group.finish()
    return group


def test_barrier_consistent_over_1000_rounds_with_racing_commits(tmp_path):
    group = _race(tmp_path, 3, 1000, restart_at=500)
    assert len(group.rounds) >= 1000
    assert group.consistent() and group.monotone() and group.aborts == 0
    versions = [next(iter(r.values())) for r in group.rounds]
    assert versions[-1] > versions[0]


def test_single_reader_trivially_consistent(tmp_path):
    group = _race(tmp_path, 1, 50)
    assert group.consistent() and group.monotone()


def test_restarted_reader_rejoins_at_current_version(tmp_path):
    store = EpisodeStore(tmp_path)
    bus = DurableBus(tmp_path / "n.journal")
    coord = Coordinator(tmp_path, store, bus, window=0.0)
    group = BarrierGroup(tmp_path, 1)
    store.put(episode("e1"))
    bus.publish("episode_notify", "e1")
    coord.step(0.0)
    assert group.sync(0).version == 1
    group.restart_reader(0)
    store.put(episode("e2", 1))
    bus.publish("episode_notify", "e2")
    coord.step(0.0)
    assert group.sync(0).version == 2 and group.readers[0].history == [1, 2]


# ---- weights pub-sub ------------------------------------------------------------

def _actor(tmp_path, aid=0):
    return A.Actor(aid, [SPEC], tmp_path, EpisodeStore(tmp_path), DurableBus(tmp_path / "n.journal"),
                   DurableBus(tmp_path / f"w{aid}.journal", redeliver_after=0.01))


def test_paused_actor_receives_on_resume_and_versions_are_monotone(tmp_path):
    A.write_weights(tmp_path, small_net(), 0)
    actor = _actor(tmp_path)
    actor.paused.set()
    # delivery attempted while the actor is paused: lost in flight, never acked
    A.publish_weights(tmp_path, small_net(1), 1, {0: actor.weights_bus})
    assert actor.weights_bus.receive() is not None
    A.publish_weights(tmp_path, small_net(2), 2, {0: actor.weights_bus})
    actor.paused.clear()
    time.sleep(0.02)
    assert actor.fetch_policy() == 2
    assert sorted(actor.received) == [1, 2] and actor.applied == [0, 2]
    # a stale redelivery of an older version never moves the actor back
    A.publish_weights(tmp_path, small_net(1), 1, {0: actor.weights_bus})
    assert actor.fetch_policy() == 2 and actor.applied_monotone()
    assert np.array_equal(actor.policy.params.values, small_net(2).params.values)


def test_publish_to_zero_actors(tmp_path):
    events = EventLog()
    assert A.publish_weights(tmp_path, small_net(), 1, {}, events) == 0
    assert A.weights_path(tmp_path, 1).exists()
    assert events.first("publish") == {"1": events.events[0][2]}


# ---- latency and audit ----------------------------------------------------------

def test_percentiles_nearest_rank():
    xs = list(range(1, 101))
    assert percentile(xs, 50) == 50 and percentile(xs, 99) == 99
    assert percentile([3.5], 50) == percentile([3.5], 99) == 3.5
    assert np.isnan(percentile([], 50))


def test_latency_report_from_events():
    log = EventLog()
    for i in range(1, 101):
        log.record("episode_done", f"e{i}", 0.0)
        log.record("available", f"e{i}", float(i))
        log.record("available", f"e{i}", 1000.0)     # later duplicates ignored
    log.record("publish", "1", 10.0)
    log.record("received", "1:0", 12.5)
    rep = latency_report(log)
    assert rep["episode_to_available"] == {"count": 100, "p50": 50.0, "p99": 99.0}
    assert rep["publish_to_received"] == {"count": 1, "p50": 2.5, "p99": 2.5}


def test_audit_flags_missing_and_corrupted(tmp_path):
    store = EpisodeStore(tmp_path)
    bus = DurableBus(tmp_path / "n.journal")
    coord = Coordinator(tmp_path, store, bus, window=0.0)
    for i in range(3):
        store.put(episode(f"e{i}", i))
        bus.publish("episode_notify", f"e{i}")
    coord.step(0.0)
    assert audit(tmp_path, store).ok
    store.put(episode("late", 9))
    rep = audit(tmp_path, store)
    assert rep.missing == ["late"] and not rep.ok and rep.accounted_fraction == 0.75
    store.marker_path("e1").write_text('{"sha256": "0"}')
    assert audit(tmp_path, store).invalid == ["e1"]


# ---- end to end -----------------------------------------------------------------

def test_fleetbench_without_chaos(tmp_path):
    rep = run_fleetbench(FleetConfig(actors=2, episodes_per_actor=10, readers=2, min_barriers=20,
                                     publish_every=0.05, window=0.05), tmp_path)
    assert rep.ok and rep.audit.completed == rep.audit.committed == 20
    assert rep.latency["episode_to_available"]["count"] == 20
    assert rep.latency["publish_to_received"]["count"] > 0


def test_fleetbench_with_chaos_over_tcp(tmp_path):
    cfg = FleetConfig.full_chaos(actors=3, episodes_per_actor=8, readers=3, min_barriers=30,
                                 publish_every=0.05, window=0.05, redeliver_after=0.05,
                                 bus_mode="tcp", kill_period=3)
    rep = run_fleetbench(cfg, tmp_path)
    assert rep.ok, rep.violations()
    assert rep.audit.committed == 24 and rep.kills
    assert rep.bus_stats["dropped"] + rep.bus_stats["duplicated"] > 0
