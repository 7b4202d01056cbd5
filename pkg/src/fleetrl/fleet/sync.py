"""Deterministic in-process fleet: actors run in lockstep right after each publish."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from fleetrl import diffcore as dc
from fleetrl import envsim
from fleetrl.envsim import Episode, TaskSpec
from fleetrl.flowpol import FlowPolicy


class SyncFleet:
    """Each publish is followed by one episode per actor with the new policy.

    Actors cycle through ``specs``; the intervention oracle is active with
    ``stall_chunks``.  ``poll`` hands each finished episode out exactly once.
    """

    def __init__(self, specs: Sequence[TaskSpec], num_actors: int = 8, seed: int = 0, *,
                 stall_chunks: float = envsim.STALL_CHUNKS, horizon: int = envsim.HORIZON,
                 n_flow: int = 10):
        if num_actors < 0:
            raise ValueError("num_actors must be >= 0")
        self.specs = list(specs)
        self.num_actors, self.seed = num_actors, seed
        self.stall_chunks, self.horizon, self.n_flow = stall_chunks, horizon, n_flow
        self.policy: dc.DenseNet | None = None
        self.version = 0
        self.applied: dict[int, list[int]] = {a: [] for a in range(num_actors)}
        self.rounds = 0
        self._pending = False
        self.produced: list[Episode] = []

    def publish(self, policy: dc.DenseNet, version: int) -> int:
        if version <= self.version:
            raise ValueError(f"non-monotone publish {version} after {self.version}")
        self.policy = policy.with_params(policy.params.copy())
        self.version = version
        self._pending = True
        return self.num_actors

    def poll(self) -> list[Episode]:
        if not self._pending or self.policy is None or self.num_actors == 0:
            return []
        self._pending = False
        r = self.rounds
        self.rounds += 1
        specs = [self.specs[(r * self.num_actors + a) % len(self.specs)] for a in range(self.num_actors)]
        seeds = [int(s) for s in np.random.default_rng([self.seed, 17, r]).integers(0, 2**31, self.num_actors)]
        pol = FlowPolicy(self.policy, self.horizon, envsim.ACTION_DIM, self.n_flow, self.version)
        eps = envsim.rollout_batch(specs, seeds, pol.chunk_fn(seeds), horizon=self.horizon,
                                   stall_chunks=self.stall_chunks, source="online",
                                   policy_version=self.version, id_prefix=f"on-r{r:05d}")
        for a in range(self.num_actors):
            self.applied[a].append(self.version)
        self.produced.extend(eps)
        return eps
