"""Chunk-level replay: episode slicing, offline/online buffers, 1:1 mixing, n-step windows."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fleetrl.envsim import Episode
from fleetrl.errors import ContractViolation

SOURCES = ("demo", "rollout_success", "rollout_fail", "play", "online_policy", "online_intervention")
SOURCE_CODE = {s: i for i, s in enumerate(SOURCES)}


@dataclass(frozen=True, eq=False)
class ChunkedTransition:
    obs: np.ndarray
    chunk: np.ndarray
    chunk_reward: float
    next_obs: np.ndarray
    terminal: bool
    source: str
    episode_id: str
    chunk_index: int
    task_id: int = 0


@dataclass(frozen=True, eq=False)
class NStepSample:
    obs: np.ndarray
    chunk: np.ndarray
    rewards: list[float]
    bootstrap_obs: np.ndarray | None
    effective_n: int

    def discounted_return(self, gamma: float, horizon: int) -> float:
        return sum(gamma ** (i * horizon) * r for i, r in enumerate(self.rewards))

    def target(self, gamma: float, horizon: int, bootstrap_value: float) -> float:
        y = self.discounted_return(gamma, horizon)
        if self.bootstrap_obs is not None:
            y += gamma ** (self.effective_n * horizon) * bootstrap_value
        return y


def _transition_source(ep: Episode, k: int) -> str:
    if ep.source == "demo":
        return "demo"
    if ep.source == "rollout":
        return "rollout_success" if ep.success else "rollout_fail"
    if ep.source == "play":
        return "play"
    if ep.source == "online":
        hit = k < len(ep.intervention) and bool(ep.intervention[k])
        return "online_intervention" if hit else "online_policy"
    raise ContractViolation(f"unknown episode source {ep.source!r}")


def episode_to_transitions(ep: Episode, horizon: int, gamma: float) -> list[ChunkedTransition]:
    """Non-overlapping stride-H chunks; the last partial chunk is padded and terminal."""
    T = ep.length
    if T < 1:
        raise ContractViolation("empty episode")
    if horizon < 1:
        raise ContractViolation("horizon must be >= 1")
    n_chunks = -(-T // horizon)
    disc = np.array([gamma ** i for i in range(horizon)])
    out = []
    for k in range(n_chunks):
        lo, hi = k * horizon, min((k + 1) * horizon, T)
        acts = ep.actions[lo:hi]
        rew = np.zeros(horizon)
        rew[:hi - lo] = ep.rewards[lo:hi]
        if hi - lo < horizon:
            acts = np.concatenate([acts, np.repeat(acts[-1:], horizon - (hi - lo), axis=0)])
        out.append(ChunkedTransition(
            obs=ep.obs[lo].copy(), chunk=acts.copy(), chunk_reward=float(np.dot(disc, rew)),
            next_obs=ep.obs[hi].copy(), terminal=(k == n_chunks - 1),
            source=_transition_source(ep, k), episode_id=ep.episode_id, chunk_index=k,
            task_id=ep.task_id,
        ))
    return out


class _Grow:
    """Append-only growable array."""

    def __init__(self, tail_shape, dtype=np.float64):
        self.data = np.zeros((16,) + tuple(tail_shape), dtype=dtype)
        self.n = 0

    def extend(self, rows: np.ndarray) -> None:
        need = self.n + len(rows)
        if need > len(self.data):
            cap = max(need, 2 * len(self.data))
            new = np.zeros((cap,) + self.data.shape[1:], dtype=self.data.dtype)
            new[:self.n] = self.data[:self.n]
            self.data = new
        self.data[self.n:need] = rows
        self.n = need

    def view(self, n: int | None = None) -> np.ndarray:
        v = self.data[:self.n if n is None else n]
        v = v.view()
        v.flags.writeable = False
        return v


class ReplayBuffer:
    """Append-only chunk store (``B_off`` or ``B_on``).

    Transitions of one episode are stored contiguously in chunk order, so
    the chunk ``k`` steps after index ``i`` lives at ``i + k`` whenever it
    belongs to the same episode.
    """

    def __init__(self, kind: str, obs_dim: int, horizon: int, action_dim: int = 2,
                 gamma: float = 0.9999):
        if kind not in ("offline", "online"):
            raise ContractViolation(f"unknown buffer kind {kind!r}")
        self.kind = kind
        self.obs_dim, self.horizon, self.action_dim, self.gamma = obs_dim, horizon, action_dim, gamma
        self._obs = _Grow((obs_dim,))
        self._next = _Grow((obs_dim,))
        self._chunk = _Grow((horizon, action_dim))
        self._reward = _Grow(())
        self._terminal = _Grow((), bool)
        self._source = _Grow((), np.int8)
        self._task = _Grow((), np.int16)
        self._ep = _Grow((), np.int64)
        self._chunk_idx = _Grow((), np.int32)
        self.episode_ids: list[str] = []
        self._ep_lookup: dict[str, int] = {}
        self.by_source: dict[str, list[int]] = {s: [] for s in SOURCES}

    def __len__(self) -> int:
        return self._reward.n

    @property
    def num_episodes(self) -> int:
        return len(self.episode_ids)

    def has_episode(self, episode_id: str) -> bool:
        return episode_id in self._ep_lookup

    def add_episode(self, ep: Episode) -> int:
        """Append an episode's transitions; returns how many were added (0 if seen)."""
        if ep.episode_id in self._ep_lookup:
            return 0
        trs = episode_to_transitions(ep, self.horizon, self.gamma)
        e = len(self.episode_ids)
        self.episode_ids.append(ep.episode_id)
        self._ep_lookup[ep.episode_id] = e
        start = len(self)
        self._obs.extend(np.stack([t.obs for t in trs]))
        self._next.extend(np.stack([t.next_obs for t in trs]))
        self._chunk.extend(np.stack([t.chunk for t in trs]))
        self._reward.extend(np.array([t.chunk_reward for t in trs]))
        self._terminal.extend(np.array([t.terminal for t in trs]))
        self._source.extend(np.array([SOURCE_CODE[t.source] for t in trs], dtype=np.int8))
        self._task.extend(np.full(len(trs), ep.task_id, dtype=np.int16))
        self._ep.extend(np.full(len(trs), e, dtype=np.int64))
        self._chunk_idx.extend(np.arange(len(trs), dtype=np.int32))
        for k, t in enumerate(trs):
            self.by_source[t.source].append(start + k)
        return len(trs)

    def add_episodes(self, eps: Sequence[Episode]) -> int:
        return sum(self.add_episode(ep) for ep in eps)

    # ---- read side -------------------------------------------------------

    @property
    def obs(self):
        return self._obs.view()

    @property
    def next_obs(self):
        return self._next.view()

    @property
    def chunk(self):
        return self._chunk.view()

    @property
    def reward(self):
        return self._reward.view()

    @property
    def terminal(self):
        return self._terminal.view()

    @property
    def source(self):
        return self._source.view()

    @property
    def task(self):
        return self._task.view()

    @property
    def episode_index(self):
        return self._ep.view()

    def transition(self, i: int) -> ChunkedTransition:
        return ChunkedTransition(
            self.obs[i].copy(), self.chunk[i].copy(), float(self.reward[i]), self.next_obs[i].copy(),
            bool(self.terminal[i]), SOURCES[int(self.source[i])],
            self.episode_ids[int(self._ep.data[i])], int(self._chunk_idx.data[i]), int(self.task[i]),
        )

    def index_of(self, episode_id: str, chunk_index: int) -> int:
        e = self._ep_lookup[episode_id]
        first = int(np.searchsorted(self._ep.view(), e))
        return first + chunk_index

    def nstep_arrays(self, n_per_index: np.ndarray, gamma: float | None = None):
        """Vectorised n-step windows for every transition.

        Returns (discounted return, bootstrap obs, bootstrap discount, has
        bootstrap, effective n).  The bootstrap discount is
        gamma**(effective_n * H) where a bootstrap exists and 0 otherwise.
        """
        gamma = self.gamma if gamma is None else gamma
        N = len(self)
        n_per_index = np.broadcast_to(np.asarray(n_per_index, dtype=np.int64), (N,))
        if N and n_per_index.min() < 1:
            raise ContractViolation("n must be >= 1")
        H = self.horizon
        rew, term, ep = self.reward, self.terminal, self.episode_index
        ret = np.zeros(N)
        eff = np.zeros(N, dtype=np.int64)
        alive = np.ones(N, dtype=bool)
        last = np.arange(N)
        idx = np.arange(N)
        for k in range(int(n_per_index.max()) if N else 0):
            j = idx + k
            ok = alive & (k < n_per_index) & (j < N)
            ok[ok] &= ep[j[ok]] == ep[idx[ok]]
            jj = j[ok]
            ret[ok] += gamma ** (k * H) * rew[jj]
            eff[ok] += 1
            last[ok] = jj
            stop = np.zeros(N, dtype=bool)
            stop[ok] = term[jj]
            alive &= ok & ~stop
        has_boot = ~term[last]
        boot_obs = self.next_obs[last].copy()
        boot_obs[~has_boot] = 0.0
        boot_disc = np.where(has_boot, gamma ** (eff * H), 0.0)
        return ret, boot_obs, boot_disc, has_boot, eff

    # ---- persistence -----------------------------------------------------

    def write_index(self, path) -> None:
        """Fixed-width binary index: (episode ordinal u32, chunk u32, source u8) per transition."""
        rec = struct.Struct("<IIB")
        with open(path, "wb") as f:
            f.write(b"FRIX" + struct.pack("<I", len(self)))
            for i in range(len(self)):
                f.write(rec.pack(int(self._ep.data[i]), int(self._chunk_idx.data[i]), int(self._source.data[i])))

    @staticmethod
    def read_index(path) -> np.ndarray:
        raw = Path(path).read_bytes()
        if raw[:4] != b"FRIX":
            raise ContractViolation("not a transition index file")
        n = struct.unpack("<I", raw[4:8])[0]
        dt = np.dtype([("episode", "<u4"), ("chunk", "<u4"), ("source", "u1")])
        return np.frombuffer(raw[8:], dtype=dt, count=n)


def make_nstep(buffer: ReplayBuffer, index: int, n: int, gamma: float, horizon: int) -> NStepSample:
    """Gather up to ``n`` consecutive same-episode chunks starting at ``index``."""
    if n < 1:
        raise ContractViolation("n must be >= 1")
    if not 0 <= index < len(buffer):
        raise ContractViolation("transition not in buffer")
    ep = buffer.episode_index
    rewards = []
    j = index
    boot = None
    for k in range(n):
        rewards.append(float(buffer.reward[j]))
        if buffer.terminal[j]:
            break
        if k == n - 1 or j + 1 >= len(buffer) or ep[j + 1] != ep[index]:
            boot = buffer.next_obs[j].copy()
            break
        j += 1
    return NStepSample(buffer.obs[index].copy(), buffer.chunk[index].copy(), rewards, boot, len(rewards))


@dataclass(frozen=True, eq=False)
class MixedDraw:
    which: np.ndarray   # 0 = offline, 1 = online
    index: np.ndarray

    @property
    def online_fraction(self) -> float:
        return float(self.which.mean()) if len(self.which) else 0.0


def sample_mixed(offline_size: int, online_size: int, batch: int, rng: np.random.Generator) -> MixedDraw:
    """Exactly batch/2 uniform draws from each buffer (with replacement), shuffled.

    Falls back to a single buffer when the other is empty.
    """
    if batch < 1:
        raise ContractViolation("batch must be positive")
    if offline_size == 0 and online_size == 0:
        raise ContractViolation("both buffers are empty")
    if online_size == 0 or offline_size == 0:
        which = np.full(batch, 0 if online_size == 0 else 1, dtype=np.int8)
        size = offline_size or online_size
        return MixedDraw(which, rng.integers(0, size, batch))
    if batch % 2:
        raise ContractViolation("mixed batch size must be even")
    half = batch // 2
    which = np.concatenate([np.zeros(half, np.int8), np.ones(half, np.int8)])
    index = np.concatenate([rng.integers(0, offline_size, half), rng.integers(0, online_size, half)])
    perm = rng.permutation(batch)
    return MixedDraw(which[perm], index[perm])


def sample_mixed_buffers(offline: ReplayBuffer, online: ReplayBuffer, batch: int, seed) -> list[ChunkedTransition]:
    """Transition-level convenience wrapper around ``sample_mixed``."""
    rng = np.random.default_rng(seed)
    draw = sample_mixed(len(offline), len(online), batch, rng)
    bufs = (offline, online)
    return [bufs[w].transition(int(i)) for w, i in zip(draw.which, draw.index)]
