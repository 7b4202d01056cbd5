"""Simulated fleet data plane: episode store, bus, coordinator, readers, actors."""

from fleetrl.fleet.audit import AuditReport, audit
from fleetrl.fleet.bench import BenchReport, FleetConfig, run_fleetbench
from fleetrl.fleet.bus import BusClient, BusFaults, BusMessage, BusServer, DurableBus
from fleetrl.fleet.coordinator import (Coordinator, Killed, KillPoint, KillSwitch, SnapshotVersion,
                                       read_current, read_version)
from fleetrl.fleet.latency import EventLog, latency_report, percentile
from fleetrl.fleet.readers import BarrierGroup, Prefetcher, SnapshotReader
from fleetrl.fleet.runtime import AsyncFleet
from fleetrl.fleet.store import EpisodeStore
from fleetrl.fleet.sync import SyncFleet
