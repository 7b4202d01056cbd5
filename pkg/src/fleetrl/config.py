"""Run configuration: everything a CLI command needs, serialisable to JSON."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from fleetrl import envsim
from fleetrl.envsim import SourceCounts, TaskSpec
from fleetrl.errors import ConfigError
from fleetrl.fleet.bench import FleetConfig
from fleetrl.learner import LearnerConfig

TASK_BUILDERS = {"reach1": envsim.reach1, "chain5": envsim.chain5}

# Step mix of roughly 52% demos, 19% rollouts, 29% play with the default noise levels.
DEFAULT_COUNTS = {
    "reach1": SourceCounts(demo=400, rollout=100, play=100),
    "chain5": SourceCounts(demo=200, rollout=32, play=43),
}


@dataclass
class DataConfig:
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    demo_noise: float = envsim.DEMO_NOISE
    rollout_noise: float = envsim.ROLLOUT_NOISE

    def __post_init__(self):
        self.counts = {k: v if isinstance(v, SourceCounts) else SourceCounts(**v)
                       for k, v in self.counts.items()}

    def to_dict(self) -> dict:
        return {"counts": {k: dataclasses.asdict(v) for k, v in self.counts.items()},
                "demo_noise": self.demo_noise, "rollout_noise": self.rollout_noise}


@dataclass
class Ablation:
    constant_tau: float | None = None    # e.g. 0.52 with alpha = 0
    value_mode: str = "divl"             # divl | expectile
    anchored: bool = False               # QAM terminal gradient at replay actions


@dataclass
class OnlineFleetConfig:
    mode: str = "sync"                   # sync (deterministic lockstep) | async (threads + store + bus)
    actors: int = 8
    stall_chunks: float = envsim.STALL_CHUNKS
    window: float = 0.2


@dataclass
class RunConfig:
    tasks: tuple = ("reach1", "chain5")
    data: DataConfig = field(default_factory=DataConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    online: OnlineFleetConfig = field(default_factory=OnlineFleetConfig)
    fleet: FleetConfig = field(default_factory=FleetConfig.full_chaos)
    ablation: Ablation = field(default_factory=Ablation)
    eval_episodes: int = 100
    out: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        self.validate()

    def validate(self) -> None:
        unknown = [t for t in self.tasks if t not in TASK_BUILDERS]
        if unknown:
            raise ConfigError(f"unknown tasks {unknown}; choose from {sorted(TASK_BUILDERS)}")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("task list has duplicates")
        missing = [t for t in self.tasks if t not in self.data.counts]
        if missing:
            raise ConfigError(f"no data counts for tasks {missing}")
        if self.online.mode not in ("sync", "async"):
            raise ConfigError(f"unknown online fleet mode {self.online.mode!r}")
        if self.eval_episodes < 0:
            raise ConfigError("eval_episodes must be >= 0")
        self.learner_config()   # ablation values go through LearnerConfig validation

    def specs(self) -> list[TaskSpec]:
        """Task specs with ids fixed by the global task table, not by list position."""
        ids = {name: k for k, name in enumerate(TASK_BUILDERS)}
        return [TASK_BUILDERS[t](ids[t]) for t in self.tasks]

    def counts_by_id(self) -> dict[int, SourceCounts]:
        return {s.task_id: self.data.counts[s.name] for s in self.specs()}

    def learner_config(self) -> LearnerConfig:
        return dataclasses.replace(self.learner, constant_tau=self.ablation.constant_tau,
                                   value_mode=self.ablation.value_mode,
                                   anchored=self.ablation.anchored, seed=self.seed)

    def fleet_config(self) -> FleetConfig:
        return dataclasses.replace(self.fleet, seed=self.seed)

    def to_dict(self) -> dict:
        return {
            "tasks": list(self.tasks), "data": self.data.to_dict(),
            "learner": self.learner.to_dict(), "online": dataclasses.asdict(self.online),
            "fleet": self.fleet.to_dict(), "ablation": dataclasses.asdict(self.ablation),
            "eval_episodes": self.eval_episodes, "out": self.out, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        d = dict(d)
        try:
            if "data" in d:
                d["data"] = DataConfig(**d["data"])
            if "learner" in d:
                d["learner"] = LearnerConfig.from_dict(d["learner"])
            if "online" in d:
                d["online"] = OnlineFleetConfig(**d["online"])
            if "fleet" in d:
                d["fleet"] = FleetConfig(**d["fleet"])
            if "ablation" in d:
                d["ablation"] = Ablation(**d["ablation"])
            return cls(**d)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"bad config: {e}") from e

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
