"""Timestamped event log and latency percentiles for the two data-plane paths."""

from __future__ import annotations

import math
import threading
import time
from typing import Sequence


class EventLog:
    def __init__(self, clock=time.monotonic):
        self.clock = clock
        self.events: list[tuple[str, str, float]] = []
        self._lock = threading.Lock()

    def record(self, kind: str, key: str, t: float | None = None) -> None:
        with self._lock:
            self.events.append((kind, key, self.clock() if t is None else t))

    def first(self, kind: str) -> dict[str, float]:
        out: dict[str, float] = {}
        with self._lock:
            for k, key, t in self.events:
                if k == kind and key not in out:
                    out[key] = t
        return out


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    if not values:
        return float("nan")
    xs = sorted(values)
    rank = max(1, math.ceil(p / 100.0 * len(xs)))
    return xs[min(rank, len(xs)) - 1]


def episode_latencies(log: EventLog) -> list[float]:
    done, avail = log.first("episode_done"), log.first("available")
    return [avail[k] - done[k] for k in done if k in avail]


def publish_latencies(log: EventLog) -> list[float]:
    pub, recv = log.first("publish"), log.first("received")
    out = []
    for key, t in recv.items():
        v = key.split(":")[0]
        if v in pub:
            out.append(t - pub[v])
    return out


def summarize(values: Sequence[float]) -> dict:
    return {"count": len(values), "p50": percentile(values, 50), "p99": percentile(values, 99)}


def latency_report(log: EventLog) -> dict:
    """P50/P99 for episode -> learner-available and publish -> actor-received (seconds)."""
    return {"episode_to_available": summarize(episode_latencies(log)),
            "publish_to_received": summarize(publish_latencies(log))}
