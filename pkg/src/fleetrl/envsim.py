"""Toy waypoint-following tasks with chunked actions and sparse terminal reward.

A point agent moves in the plane by integrating per-step velocity commands.
Each task is an ordered list of waypoints; a waypoint is consumed when the
agent comes within ``eps`` of it, and the episode succeeds (reward 1 on that
step, 0 everywhere else) when the last one is consumed.  Policies act in
chunks of ``horizon`` steps executed open loop.

Two families are provided: Reach-1 (one waypoint, 60 steps) and Chain-5
(five waypoints, 600 steps).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from fleetrl.errors import ContractViolation

DT = 0.05
A_MAX = 1.0
EPS = 0.08
START_RADIUS = 0.2
HORIZON = 30
ACTION_DIM = 2
NUM_TASKS = 2

DEMO_NOISE = 0.3
ROLLOUT_NOISE = 0.5
STALL_CHUNKS = 3


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    waypoints: tuple[tuple[float, float], ...]
    t_max: int
    eps: float = EPS
    start_center: tuple[float, float] = (0.0, 0.0)
    start_radius: float = START_RADIUS
    dt: float = DT
    a_max: float = A_MAX
    name: str = ""

    def __post_init__(self):
        if len(self.waypoints) < 1:
            raise ContractViolation("task needs at least one waypoint")
        if len(set(self.waypoints)) != len(self.waypoints):
            raise ContractViolation("waypoints must be distinct")
        if self.eps <= 0 or self.t_max < 1:
            raise ContractViolation("eps must be positive and t_max >= 1")

    @property
    def num_waypoints(self) -> int:
        return len(self.waypoints)

    @property
    def long_horizon(self) -> bool:
        return self.num_waypoints >= 5


def reach1(task_id: int = 0) -> TaskSpec:
    return TaskSpec(task_id, ((0.7, 0.45),), t_max=60, name="reach1")


def chain5(task_id: int = 1) -> TaskSpec:
    wps = ((0.7, 0.6), (-0.6, 0.7), (-0.7, -0.6), (0.6, -0.7), (0.3, 0.05))
    return TaskSpec(task_id, wps, t_max=600, name="chain5")


def default_tasks() -> list[TaskSpec]:
    return [reach1(0), chain5(1)]


@dataclass(frozen=True, eq=False)
class EnvState:
    position: np.ndarray
    progress: int = 0
    steps: int = 0
    done: bool = False
    succeeded: bool = False


@dataclass(frozen=True, eq=False)
class ChunkOutcome:
    state: EnvState
    rewards: np.ndarray          # length horizon, zero padded after termination
    done: bool
    succeeded: bool
    obs_trace: np.ndarray        # obs before each executed step
    actions: np.ndarray          # clipped commands actually executed


def observation(state: EnvState, spec: TaskSpec, num_tasks: int = NUM_TASKS) -> np.ndarray:
    onehot = np.zeros(num_tasks)
    onehot[spec.task_id] = 1.0
    return np.concatenate([
        state.position,
        onehot,
        [state.progress / spec.num_waypoints, state.steps / spec.t_max],
    ])


def obs_dim(num_tasks: int = NUM_TASKS) -> int:
    return 2 + num_tasks + 2


def reset(spec: TaskSpec, seed) -> EnvState:
    """Start uniformly inside the start disc."""
    rng = np.random.default_rng(seed)
    u, theta = rng.random(), 2.0 * math.pi * rng.random()
    r = spec.start_radius * math.sqrt(u)
    pos = np.array(spec.start_center, dtype=np.float64) + r * np.array([math.cos(theta), math.sin(theta)])
    return EnvState(pos)


def _check_chunk(chunk: np.ndarray, horizon: int | None = None) -> np.ndarray:
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.ndim != 2 or chunk.shape[1] != ACTION_DIM or (horizon and chunk.shape[0] != horizon):
        raise ContractViolation(f"action chunk has shape {chunk.shape}")
    if not np.isfinite(chunk).all():
        raise ContractViolation("action chunk is not finite")
    return chunk


def step_chunk(state: EnvState, spec: TaskSpec, chunk, num_tasks: int = NUM_TASKS) -> ChunkOutcome:
    """Execute a whole chunk open loop (stopping early if the episode ends)."""
    if state.done:
        raise ContractViolation("episode already finished")
    chunk = np.clip(_check_chunk(chunk), -spec.a_max, spec.a_max)
    H = chunk.shape[0]
    rewards = np.zeros(H)
    pos = state.position.copy()
    progress, steps = state.progress, state.steps
    done = succeeded = False
    trace = []
    M = spec.num_waypoints
    for i in range(H):
        trace.append(observation(EnvState(pos.copy(), progress, steps), spec, num_tasks))
        pos = pos + chunk[i] * spec.dt
        steps += 1
        wp = spec.waypoints[progress]
        if math.hypot(pos[0] - wp[0], pos[1] - wp[1]) <= spec.eps:
            progress += 1
            if progress == M:
                rewards[i] = 1.0
                done = succeeded = True
        if not done and steps >= spec.t_max:
            done = True
        if done:
            break
    n = len(trace)
    new_state = EnvState(pos, progress, steps, done, succeeded)
    return ChunkOutcome(new_state, rewards, done, succeeded, np.array(trace), chunk[:n].copy())


# --------------------------------------------------------------------------
# scripted behaviour

def _plan(pos: np.ndarray, progress: int, spec: TaskSpec, horizon: int) -> np.ndarray:
    """Noise-free max-speed chunk through the centres of the remaining waypoints.

    The plan aims at each centre (not the ball edge) so execution noise has
    the full eps margin.
    """
    chunk = np.zeros((horizon, ACTION_DIM))
    pos = pos.copy()
    M = spec.num_waypoints
    reach = spec.a_max * spec.dt
    for i in range(horizon):
        if progress >= M:
            break
        d = np.asarray(spec.waypoints[progress]) - pos
        dist = math.hypot(d[0], d[1])
        if dist > 0:
            chunk[i] = d / dist * spec.a_max * min(1.0, dist / reach)
        pos = pos + chunk[i] * spec.dt
        if dist <= reach:
            progress += 1
    return chunk


def scripted_expert(state: EnvState, spec: TaskSpec, noise_scale: float = 0.0,
                    rng: np.random.Generator | None = None, horizon: int = HORIZON) -> np.ndarray:
    """Max-speed chunk toward the next waypoints plus Gaussian noise, clipped."""
    chunk = _plan(state.position, state.progress, spec, horizon)
    if noise_scale > 0:
        if rng is None:
            raise ContractViolation("noisy expert needs an rng")
        chunk = chunk + noise_scale * rng.standard_normal(chunk.shape)
    return np.clip(chunk, -spec.a_max, spec.a_max)


def expert_step_budget(spec: TaskSpec, start: np.ndarray, slack: float = 0.1) -> int:
    """Straight-line path length over max speed, plus slack."""
    pts = [np.asarray(start)] + [np.asarray(w) for w in spec.waypoints]
    length = sum(float(np.linalg.norm(b - a)) for a, b in zip(pts[:-1], pts[1:]))
    return int(math.ceil(length / (spec.a_max * spec.dt) * (1.0 + slack)))


def _wp_distance(state: EnvState, spec: TaskSpec) -> float:
    if state.progress >= spec.num_waypoints:
        return 0.0
    wp = spec.waypoints[state.progress]
    return math.hypot(state.position[0] - wp[0], state.position[1] - wp[1])


def intervention_oracle(history: Sequence[EnvState], spec: TaskSpec,
                        stall_chunks: float = STALL_CHUNKS, horizon: int = HORIZON) -> np.ndarray | None:
    """Expert chunk if the agent stalled for ``stall_chunks`` chunks, else None.

    Stalled means: no waypoint consumed over the window, and the distance to
    the next waypoint did not shrink.  ``history`` holds the states at chunk
    boundaries, most recent last.
    """
    if not math.isfinite(stall_chunks):
        return None
    D = int(stall_chunks)
    if len(history) < D + 1:
        return None
    now, then = history[-1], history[-1 - D]
    if now.done:
        return None
    if now.progress != then.progress:
        return None
    if _wp_distance(now, spec) < _wp_distance(then, spec):
        return None
    return scripted_expert(now, spec, 0.0, horizon=horizon)


def _play_chunk(state: EnvState, spec: TaskSpec, rng: np.random.Generator, plan: dict,
                horizon: int) -> np.ndarray:
    """Follow the expert for a few waypoints, approach the next one, then wander off.

    Never enters the eps-ball of the waypoint it abandons, so play episodes
    always fail.
    """
    chunk = np.zeros((horizon, ACTION_DIM))
    pos = state.position.copy()
    progress = state.progress
    for i in range(horizon):
        target = np.asarray(spec.waypoints[min(progress, spec.num_waypoints - 1)])
        d = target - pos
        dist = float(np.linalg.norm(d))
        if progress < plan["keep"]:
            v = spec.a_max * d / max(dist, 1e-12)
        elif plan["phase"] == "approach" and dist > plan["stop"]:
            v = spec.a_max * d / dist * min(1.0, (dist - plan["stop"]) / (spec.a_max * spec.dt))
        else:
            plan["phase"] = "wander"
            if rng.random() < 0.1 or plan.get("heading") is None:
                ang = rng.uniform(0, 2 * math.pi)
                plan["heading"] = np.array([math.cos(ang), math.sin(ang)])
            away = -d / max(dist, 1e-12)
            v = plan["heading"] if dist > plan["stop"] + 0.1 else away
            v = 0.6 * spec.a_max * v
        nxt = pos + v * spec.dt
        if progress >= plan["keep"]:
            # hard guard: stay outside the abandoned waypoint's ball
            if np.linalg.norm(target - nxt) <= spec.eps + 0.02:
                v = np.zeros(2)
                nxt = pos
        # keep inside the arena
        if np.abs(nxt).max() > 1.2:
            v = -0.6 * spec.a_max * pos / max(np.linalg.norm(pos), 1e-12)
            nxt = pos + v * spec.dt
        chunk[i] = v
        pos = nxt
        if progress < plan["keep"]:
            wp = spec.waypoints[progress]
            if math.hypot(pos[0] - wp[0], pos[1] - wp[1]) <= spec.eps:
                progress += 1
    return np.clip(chunk, -spec.a_max, spec.a_max)


# --------------------------------------------------------------------------
# episodes

@dataclass(eq=False)
class Episode:
    episode_id: str
    task_id: int
    seed: int
    policy_version: int
    obs: np.ndarray              # (T + 1, obs_dim), last row is the final observation
    actions: np.ndarray          # (T, 2)
    rewards: np.ndarray          # (T,)
    success: bool
    source: str                  # demo | rollout | play | online
    intervention: np.ndarray     # (num_chunks,) bool
    progress: int = 0

    @property
    def length(self) -> int:
        return int(self.actions.shape[0])

    def to_json(self) -> str:
        steps = [{"obs": o.tolist(), "action": a.tolist(), "reward": float(r)}
                 for o, a, r in zip(self.obs[:-1], self.actions, self.rewards)]
        return json.dumps({
            "episode_id": self.episode_id, "task_id": self.task_id, "seed": self.seed,
            "policy_version": self.policy_version, "steps": steps,
            "final_obs": self.obs[-1].tolist(), "success": bool(self.success),
            "source": self.source, "intervention": [bool(x) for x in self.intervention],
            "progress": self.progress,
        })

    @classmethod
    def from_json(cls, line: str) -> "Episode":
        d = json.loads(line)
        steps = d["steps"]
        obs = np.array([s["obs"] for s in steps] + [d["final_obs"]], dtype=np.float64)
        actions = np.array([s["action"] for s in steps], dtype=np.float64).reshape(-1, ACTION_DIM)
        rewards = np.array([s["reward"] for s in steps], dtype=np.float64)
        return cls(d["episode_id"], d["task_id"], d["seed"], d["policy_version"], obs,
                   actions, rewards, d["success"], d["source"],
                   np.array(d["intervention"], dtype=bool), d.get("progress", 0))


def write_episode_log(episodes: Iterable[Episode], path) -> None:
    with open(path, "w") as f:
        for ep in episodes:
            f.write(ep.to_json() + "\n")


def read_episode_log(path) -> list[Episode]:
    with open(path) as f:
        return [Episode.from_json(line) for line in f if line.strip()]


ChunkFn = Callable[[np.ndarray, list[EnvState], list[TaskSpec], list[int]], np.ndarray]


def rollout_batch(specs: Sequence[TaskSpec], seeds: Sequence[int], chunk_fn: ChunkFn,
                  *, horizon: int = HORIZON, stall_chunks: float = math.inf,
                  source: str = "online", policy_version: int = 0, id_prefix: str = "ep",
                  num_tasks: int = NUM_TASKS, on_chunk=None) -> list[Episode]:
    """Run episodes in lockstep, querying ``chunk_fn`` once per chunk for all live ones.

    ``chunk_fn(obs_batch, states, specs, indices)`` returns (B, horizon, 2).  With a
    finite ``stall_chunks`` the intervention oracle may override chunks.
    ``on_chunk(i, state)`` is called with each episode's state at chunk
    boundaries (used for value diagnostics).
    """
    n = len(specs)
    states = [reset(spec, seed) for spec, seed in zip(specs, seeds)]
    obs_l = [[] for _ in range(n)]
    act_l = [[] for _ in range(n)]
    rew_l = [[] for _ in range(n)]
    interv = [[] for _ in range(n)]
    history = [[s] for s in states]
    live = list(range(n))
    while live:
        if on_chunk is not None:
            for i in live:
                on_chunk(i, states[i])
        obs = np.stack([observation(states[i], specs[i], num_tasks) for i in live])
        chunks = np.asarray(chunk_fn(obs, [states[i] for i in live], [specs[i] for i in live], live))
        nxt = []
        for j, i in enumerate(live):
            chunk = chunks[j]
            override = intervention_oracle(history[i], specs[i], stall_chunks, horizon)
            if override is not None:
                chunk = override
            out = step_chunk(states[i], specs[i], chunk, num_tasks)
            obs_l[i].append(out.obs_trace)
            act_l[i].append(out.actions)
            rew_l[i].append(out.rewards[:len(out.actions)])
            interv[i].append(override is not None)
            states[i] = out.state
            history[i].append(out.state)
            if not out.done:
                nxt.append(i)
        live = nxt
    episodes = []
    for i in range(n):
        final = observation(states[i], specs[i], num_tasks)
        episodes.append(Episode(
            f"{id_prefix}-{i}", specs[i].task_id, int(seeds[i]), policy_version,
            np.concatenate(obs_l[i] + [final[None]]), np.concatenate(act_l[i]),
            np.concatenate(rew_l[i]), states[i].succeeded, source, np.array(interv[i]),
            states[i].progress,
        ))
    return episodes


def expert_chunk_fn(noise_scale: float, seeds: Sequence[int], horizon: int = HORIZON) -> ChunkFn:
    """Batched expert policy with one noise stream per episode index."""
    rngs = [np.random.default_rng([int(s), 7]) for s in seeds]

    def fn(obs, states, specs, idx):
        return np.stack([scripted_expert(st, sp, noise_scale, rngs[i], horizon)
                         for st, sp, i in zip(states, specs, idx)])

    return fn


def run_episode(spec: TaskSpec, seed: int, chunk_fn: Callable[[np.ndarray, EnvState], np.ndarray],
                **kw) -> Episode:
    """Single-episode convenience wrapper around ``rollout_batch``."""
    return rollout_batch([spec], [seed], lambda o, s, p, i: chunk_fn(o[0], s[0])[None], **kw)[0]


def expert_episode(spec: TaskSpec, seed: int, noise_scale: float, *, source: str = "demo",
                   horizon: int = HORIZON, episode_id: str | None = None) -> Episode:
    rng = np.random.default_rng([seed, 7])
    ep = run_episode(spec, seed, lambda o, s: scripted_expert(s, spec, noise_scale, rng, horizon),
                     horizon=horizon, source=source)
    ep.episode_id = episode_id or f"{source}-{spec.task_id}-{seed}"
    return ep


def play_episode(spec: TaskSpec, seed: int, *, horizon: int = HORIZON,
                 episode_id: str | None = None) -> Episode:
    rng = np.random.default_rng([seed, 11])
    plan = {"keep": int(rng.integers(0, spec.num_waypoints)), "phase": "approach",
            "stop": float(rng.uniform(0.15, 0.4)), "heading": None}
    ep = run_episode(spec, seed, lambda o, s: _play_chunk(s, spec, rng, plan, horizon),
                     horizon=horizon, source="play")
    ep.episode_id = episode_id or f"play-{spec.task_id}-{seed}"
    return ep


@dataclass(frozen=True)
class SourceCounts:
    demo: int = 0
    rollout: int = 0
    play: int = 0


def generate_offline_buffer(specs: Sequence[TaskSpec], counts, seed: int,
                            *, demo_noise: float = DEMO_NOISE, rollout_noise: float = ROLLOUT_NOISE,
                            horizon: int = HORIZON) -> list[Episode]:
    """Demonstrations (successes only), rollouts (both outcomes), play (failures).

    ``counts`` is one ``SourceCounts`` for every task or a dict keyed by task id.
    """
    episodes: list[Episode] = []
    ss = np.random.SeedSequence(seed)
    for spec in specs:
        c = counts[spec.task_id] if isinstance(counts, dict) else counts
        if min(c.demo, c.rollout, c.play) < 0:
            raise ContractViolation("negative episode count")
        task_seq = np.random.default_rng(ss.spawn(1)[0])
        # demos: regenerate until enough successes
        got = 0
        while got < c.demo:
            s = int(task_seq.integers(2**31))
            ep = expert_episode(spec, s, demo_noise, source="demo", horizon=horizon)
            if ep.success:
                episodes.append(ep)
                got += 1
        for _ in range(c.rollout):
            s = int(task_seq.integers(2**31))
            episodes.append(expert_episode(spec, s, rollout_noise, source="rollout", horizon=horizon))
        for _ in range(c.play):
            s = int(task_seq.integers(2**31))
            ep = play_episode(spec, s, horizon=horizon)
            assert not ep.success
            episodes.append(ep)
    for k, ep in enumerate(episodes):
        ep.episode_id = f"off-{k:06d}-{ep.source}-t{ep.task_id}"
    return episodes


def source_summary(episodes: Sequence[Episode], dt: float = DT) -> dict:
    """Step counts ("hours-equivalent") and fractions per offline source."""
    keys = ["demo", "rollout_success", "rollout_fail", "play"]
    steps = dict.fromkeys(keys, 0)
    eps_n = dict.fromkeys(keys, 0)
    for ep in episodes:
        if ep.source == "rollout":
            k = "rollout_success" if ep.success else "rollout_fail"
        elif ep.source in steps:
            k = ep.source
        else:
            continue
        steps[k] += ep.length
        eps_n[k] += 1
    total = sum(steps.values())
    frac = {k: (v / total if total else 0.0) for k, v in steps.items()}
    return {
        "episodes": eps_n,
        "steps": steps,
        "hours_equiv": {k: v * dt / 3600.0 for k, v in steps.items()},
        "fraction": frac,
        "fraction_by_kind": {
            "demo": frac["demo"],
            "rollout": frac["rollout_success"] + frac["rollout_fail"],
            "play": frac["play"],
        },
        "total_steps": total,
    }
