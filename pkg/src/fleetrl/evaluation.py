"""Paired-seed policy evaluation and per-chunk value diagnostics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from fleetrl import diffcore as dc
from fleetrl import divl, envsim
from fleetrl.envsim import Episode, TaskSpec
from fleetrl.flowpol import FlowPolicy

QUANTILE_LEVELS = (0.25, 0.5, 0.75)


def eval_seeds(seed: int, n: int) -> list[int]:
    """Episode seeds shared by every policy evaluated with ``seed`` (paired evaluation)."""
    return [int(s) for s in np.random.default_rng([seed, 101]).integers(0, 2**31, size=n)]


@dataclass
class TaskReport:
    task_id: int
    name: str
    episodes: int
    success_rate: float
    score: float            # mean waypoint-completion fraction
    mean_length: float
    successes: list[bool] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "name": self.name, "episodes": self.episodes,
                "success_rate": self.success_rate, "score": self.score,
                "mean_length": self.mean_length}


def summarize(spec: TaskSpec, episodes: Sequence[Episode]) -> TaskReport:
    n = len(episodes)
    if n == 0:
        return TaskReport(spec.task_id, spec.name, 0, float("nan"), float("nan"), float("nan"))
    succ = [bool(e.success) for e in episodes]
    return TaskReport(
        spec.task_id, spec.name, n, float(np.mean(succ)),
        float(np.mean([e.progress / spec.num_waypoints for e in episodes])),
        float(np.mean([e.length for e in episodes])), succ)


ChunkFnFactory = Callable[[Sequence[int]], envsim.ChunkFn]


def policy_factory(field_net: dc.DenseNet, horizon: int = envsim.HORIZON, n_flow: int = 10) -> ChunkFnFactory:
    return FlowPolicy(field_net, horizon, envsim.ACTION_DIM, n_flow).chunk_fn


def expert_factory(noise_scale: float = 0.0, horizon: int = envsim.HORIZON) -> ChunkFnFactory:
    return lambda seeds: envsim.expert_chunk_fn(noise_scale, seeds, horizon)


def evaluate(factory: ChunkFnFactory, specs: Sequence[TaskSpec], episodes: int, seed: int, *,
             horizon: int = envsim.HORIZON, on_chunk=None) -> tuple[list[TaskReport], dict[int, list[Episode]]]:
    """Run ``episodes`` per task on the shared seed list; all tasks batched together."""
    seeds = eval_seeds(seed, episodes)
    all_specs = [s for s in specs for _ in seeds]
    all_seeds = [x for _ in specs for x in seeds]
    if not all_specs:
        return [summarize(s, []) for s in specs], {s.task_id: [] for s in specs}
    eps = envsim.rollout_batch(all_specs, all_seeds, factory(all_seeds), horizon=horizon,
                               source="eval", id_prefix="eval", on_chunk=on_chunk)
    by_task = {s.task_id: eps[k * episodes:(k + 1) * episodes] for k, s in enumerate(specs)}
    return [summarize(s, by_task[s.task_id]) for s in specs], by_task


def write_report(reports: Sequence[TaskReport], out_dir, stem: str = "eval") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r.to_dict() for r in reports]
    (out / f"{stem}.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    with open(out / f"{stem}.csv", "w", newline="") as f:
        w = csv.DictWriter(f, ["task_id", "name", "episodes", "success_rate", "score", "mean_length"])
        w.writeheader()
        for r in rows:
            w.writerow(r)


# --------------------------------------------------------------------------
# value trajectories

@dataclass(frozen=True, eq=False)
class ValueTrajectory:
    episode_id: str
    success: bool
    quantiles: np.ndarray    # (num_chunks, len(QUANTILE_LEVELS))
    probs: np.ndarray        # (num_chunks, K)

    def median(self) -> np.ndarray:
        return self.quantiles[:, QUANTILE_LEVELS.index(0.5)]


def value_trajectory(value_net: dc.DenseNet, ep: Episode, horizon: int = envsim.HORIZON,
                     support: divl.ValueSupport = divl.DEFAULT_SUPPORT) -> ValueTrajectory:
    """Value distribution at the start of every chunk the episode executed."""
    starts = np.arange(0, ep.length, horizon)
    probs = divl.softmax(dc.forward(value_net, ep.obs[starts]))
    qs = np.stack([divl.quantile(probs, t, support) for t in QUANTILE_LEVELS], axis=1)
    return ValueTrajectory(ep.episode_id, bool(ep.success), qs, probs)


def write_value_csv(trajs: Sequence[ValueTrajectory], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        K = trajs[0].probs.shape[1] if trajs else 0
        w.writerow(["episode_id", "success", "chunk"] + [f"q{t}" for t in QUANTILE_LEVELS]
                   + [f"p{k}" for k in range(K)])
        for tr in trajs:
            for c in range(len(tr.quantiles)):
                w.writerow([tr.episode_id, int(tr.success), c] + [repr(float(v)) for v in tr.quantiles[c]]
                           + [repr(float(v)) for v in tr.probs[c]])


def trajectory_diagnostic(trajs: Sequence[ValueTrajectory], max_successes: int = 10) -> dict:
    """Rising-median check on successes and final-median gap to failures."""
    succ = [t for t in trajs if t.success][:max_successes]
    fail = [t for t in trajs if not t.success]
    rising = sum(bool(t.median()[-1] > t.median()[0]) for t in succ)
    s_final = float(np.mean([t.median()[-1] for t in succ])) if succ else float("nan")
    f_final = float(np.mean([t.median()[-1] for t in fail])) if fail else float("nan")
    return {"successes": len(succ), "rising": rising, "failures": len(fail),
            "success_final_median": s_final, "failure_final_median": f_final}
