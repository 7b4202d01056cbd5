"""Composite DIVL + QAM update and the SFT -> offline -> online pipeline."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fleetrl import diffcore as dc
from fleetrl import divl, flowpol
from fleetrl.envsim import Episode, TaskSpec, obs_dim as env_obs_dim
from fleetrl.errors import ConfigError, ContractViolation, NumericError
from fleetrl.replay import SOURCE_CODE, ReplayBuffer, sample_mixed

log = logging.getLogger(__name__)

STAGES = ("offline", "online")


def _sched_dict(s: divl.TauSchedule) -> dict:
    return dataclasses.asdict(s)


@dataclass
class LearnerConfig:
    gamma: float = 0.9999
    horizon: int = 30
    action_dim: int = 2
    num_tasks: int = 2
    batch_size: int = 256
    n_off: int = 3000
    n_on: int = 1500
    n_sync: int = 50
    ema_rate: float = 0.005
    lam: float = 0.01
    offline_sched: divl.TauSchedule = divl.OFFLINE_SCHEDULE
    online_sched: divl.TauSchedule = divl.ONLINE_SCHEDULE
    n_offline_short: int = 1
    n_offline_long: int = 10
    n_online: int = 1
    lr_value: float = 1e-3
    lr_critic: float = 1e-3
    lr_policy: float = 3e-4
    lr_sft: float = 3e-3
    sft_passes: int = 0
    sft_min_steps: int = 40000
    n_flow: int = flowpol.N_FLOW
    field_hidden: tuple = (256, 256)
    critic_hidden: tuple = (128, 128)
    value_hidden: tuple = (128, 128)
    pool_heads: int = 6
    value_mode: str = "divl"            # divl | expectile
    constant_tau: float | None = None   # constant-tau ablation (alpha = 0 both stages)
    anchored: bool = False              # QAM terminal gradient at replay actions
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        for k in ("offline_sched", "online_sched"):
            v = getattr(self, k)
            if isinstance(v, dict):
                setattr(self, k, divl.TauSchedule(**v))
        for k in ("field_hidden", "critic_hidden", "value_hidden"):
            setattr(self, k, tuple(getattr(self, k)))
        self.validate()

    def validate(self) -> None:
        pos = ["gamma", "horizon", "action_dim", "batch_size", "n_sync", "ema_rate", "lam",
               "n_offline_short", "n_offline_long", "n_online", "lr_value", "lr_critic",
               "lr_policy", "lr_sft", "n_flow", "checkpoint_every"]
        for k in pos:
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive, got {getattr(self, k)!r}")
        if min(self.n_off, self.n_on, self.sft_passes, self.sft_min_steps) < 0:
            raise ConfigError("step budgets must be non-negative")
        if self.value_mode not in ("divl", "expectile"):
            raise ConfigError(f"unknown value_mode {self.value_mode!r}")
        if self.constant_tau is not None and not 0.0 < self.constant_tau < 1.0:
            raise ConfigError("constant_tau must lie in (0, 1)")
        if self.batch_size % 2:
            raise ConfigError("batch_size must be even for 1:1 mixing")

    def schedule(self, stage: str) -> divl.TauSchedule:
        base = self.offline_sched if stage == "offline" else self.online_sched
        if self.constant_tau is not None:
            return divl.TauSchedule(self.constant_tau, 0.0, min(base.tau_min, self.constant_tau),
                                    max(base.tau_max, self.constant_tau))
        return base

    def n_for(self, stage: str, long_horizon: np.ndarray) -> np.ndarray:
        if stage == "online":
            return np.full(len(long_horizon), self.n_online)
        return np.where(long_horizon, self.n_offline_long, self.n_offline_short)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["offline_sched"] = _sched_dict(self.offline_sched)
        d["online_sched"] = _sched_dict(self.online_sched)
        for k in ("field_hidden", "critic_hidden", "value_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown learner config keys: {sorted(extra)}")
        return cls(**d)


# --------------------------------------------------------------------------
# state

@dataclass(eq=False)
class LearnerState:
    policy: dc.DenseNet            # theta
    ref: dc.DenseNet               # beta, frozen after SFT
    critics: divl.CriticPair       # phi
    targets: divl.CriticPair       # phi-bar
    value: dc.DenseNet             # psi
    opt_policy: dc.AdamState
    opt_q1: dc.AdamState
    opt_q2: dc.AdamState
    opt_value: dc.AdamState
    step: int = 0
    stage: str = "offline"
    policy_version: int = 0

    def copy(self) -> "LearnerState":
        return dataclasses.replace(
            self, opt_policy=self.opt_policy.copy(), opt_q1=self.opt_q1.copy(),
            opt_q2=self.opt_q2.copy(), opt_value=self.opt_value.copy())


def init_state(cfg: LearnerConfig, policy: dc.DenseNet | None = None) -> LearnerState:
    """Fresh networks; ``policy`` (an SFT result) becomes both theta and the frozen beta."""
    od = env_obs_dim(cfg.num_tasks)
    D = cfg.horizon * cfg.action_dim
    ss = np.random.SeedSequence([cfg.seed, 1])
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(5)]
    if policy is None:
        policy = flowpol.init_field(od, D, cfg.field_hidden, seeds[0])
    pool = dc.PoolSpec(od, cfg.horizon, cfg.action_dim, cfg.pool_heads)
    q1 = dc.init_net((pool.out_dim, *cfg.critic_hidden, 1), seeds[1], pool=pool)
    q2 = dc.init_net((pool.out_dim, *cfg.critic_hidden, 1), seeds[2], pool=pool)
    out = divl.DEFAULT_SUPPORT.K if cfg.value_mode == "divl" else 1
    value = dc.init_net((od, *cfg.value_hidden, out), seeds[3], out_scale=0.1)
    critics = divl.CriticPair(q1, q2)
    targets = divl.CriticPair(q1.with_params(q1.params.copy()), q2.with_params(q2.params.copy()))
    ref = policy.with_params(policy.params.copy())
    return LearnerState(
        policy, ref, critics, targets, value,
        dc.AdamState.fresh(policy.params), dc.AdamState.fresh(q1.params),
        dc.AdamState.fresh(q2.params), dc.AdamState.fresh(value.params))


# --------------------------------------------------------------------------
# batches

@dataclass(frozen=True, eq=False)
class Batch:
    obs: np.ndarray          # (B, obs_dim)
    chunk: np.ndarray        # (B, H, A)
    ret: np.ndarray          # n-step discounted return
    boot_obs: np.ndarray
    boot_disc: np.ndarray    # gamma^(n_eff H), 0 without bootstrap
    source: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)


class NStepTable:
    """n-step windows for a buffer, extended lazily as the buffer grows."""

    def __init__(self, buffer: ReplayBuffer, cfg: LearnerConfig, stage: str, long_tasks: set[int]):
        self.buffer, self.cfg, self.stage, self.long_tasks = buffer, cfg, stage, long_tasks
        self._n = -1
        self.tables = None

    def refresh(self):
        if self._n != len(self.buffer):
            long = np.isin(self.buffer.task, list(self.long_tasks))
            n = self.cfg.n_for(self.stage, long)
            self.tables = self.buffer.nstep_arrays(n, self.cfg.gamma)
            self._n = len(self.buffer)
        return self.tables

    def gather(self, idx: np.ndarray) -> Batch:
        ret, boot_obs, boot_disc, _, _ = self.refresh()
        b = self.buffer
        return Batch(b.obs[idx], b.chunk[idx], ret[idx], boot_obs[idx], boot_disc[idx], b.source[idx])


def concat_batches(parts: list[Batch], order: np.ndarray | None = None) -> Batch:
    fields = {f.name: np.concatenate([getattr(p, f.name) for p in parts]) for f in dataclasses.fields(Batch)}
    if order is not None:
        fields = {k: v[order] for k, v in fields.items()}
    return Batch(**fields)


def draw_batch(tables: list[NStepTable], batch: int, rng: np.random.Generator) -> Batch:
    """1:1 offline/online mix (single-buffer fallback while one side is empty)."""
    sizes = [len(t.buffer) for t in tables] + [0] * (2 - len(tables))
    draw = sample_mixed(sizes[0], sizes[1], batch, rng)
    parts, pos = [], []
    for w in (0, 1):
        sel = np.flatnonzero(draw.which == w)
        if len(sel):
            parts.append(tables[w].gather(draw.index[sel]))
            pos.append(sel)
    order = np.argsort(np.concatenate(pos), kind="stable")
    return concat_batches(parts, order)


# --------------------------------------------------------------------------
# one composite update

def _check(name: str, x: float) -> float:
    if not math.isfinite(x):
        raise NumericError(f"non-finite {name}", where=name)
    return x


def learner_step(state: LearnerState, batch: Batch, cfg: LearnerConfig, stage: str | None = None
                 ) -> tuple[LearnerState, dict]:
    """value -> target -> critic -> EMA -> policy, on one minibatch.  Pure."""
    if len(batch) == 0:
        raise ContractViolation("empty minibatch")
    stage = stage or state.stage
    if stage not in STAGES:
        raise ContractViolation(f"unknown stage {stage!r}")
    sched = cfg.schedule(stage)
    sup = divl.DEFAULT_SUPPORT
    obs, chunk = batch.obs, batch.chunk

    # (1) value from min EMA-critic value of the replay action
    v_targets = divl.q_min(state.targets, obs, chunk)
    if cfg.value_mode == "divl":
        vres = divl.value_loss(state.value, obs, v_targets, sup)
    else:
        vres = divl.expectile_loss(state.value, obs, v_targets, sched.tau_base)
    _check("value loss", vres.loss)
    vp, opt_v = dc.opt_step(state.value.params, vres.grads, state.opt_value, cfg.lr_value)
    value = state.value.with_params(vp)

    # (2) critic target
    if cfg.value_mode == "divl":
        ts = divl.td_target(batch.ret, batch.boot_obs, batch.boot_disc, value, sched, sup)
        y = ts.y
        has = batch.boot_disc > 0
        tau_m = float(ts.tau[has].mean()) if has.any() else float("nan")
        ent_m = float(ts.entropy[has].mean()) if has.any() else float("nan")
        q_m = float(ts.quantile[has].mean()) if has.any() else float("nan")
    else:
        boot = dc.forward(value, batch.boot_obs)[:, 0]
        y = batch.ret + batch.boot_disc * boot
        tau_m, ent_m, q_m = sched.tau_base, float("nan"), float(boot[batch.boot_disc > 0].mean()) \
            if (batch.boot_disc > 0).any() else float("nan")

    # (3) critics
    closs, g1, g2 = divl.critic_loss(state.critics, obs, chunk, y)
    _check("critic loss", closs)
    p1, o1 = dc.opt_step(state.critics.q1.params, g1, state.opt_q1, cfg.lr_critic)
    p2, o2 = dc.opt_step(state.critics.q2.params, g2, state.opt_q2, cfg.lr_critic)
    critics = state.critics.replace(p1, p2)

    # (4) EMA targets
    targets = state.targets.replace(
        dc.ema_update(state.targets.q1.params, p1, cfg.ema_rate),
        dc.ema_update(state.targets.q2.params, p2, cfg.ema_rate))

    # (5) policy via QAM against the freshly updated critics
    def action_grad(o, a_flat):
        _, g = divl.q_min_action_grad(critics, o, a_flat.reshape(len(o), cfg.horizon, cfg.action_dim))
        return g.reshape(len(o), -1)

    pol_seed = [cfg.seed, STAGES.index(stage), state.step, 5]
    anchor = chunk.reshape(len(obs), -1) if cfg.anchored else None
    policy, opt_p, info = flowpol.policy_update(
        state.policy, state.ref, action_grad, obs, cfg.lam, cfg.n_flow, pol_seed,
        state.opt_policy, cfg.lr_policy, anchor_actions=anchor)
    _check("qam loss", info.loss)

    new = LearnerState(policy, state.ref, critics, targets, value, opt_p, o1, o2, opt_v,
                       state.step + 1, stage, state.policy_version)
    metrics = {
        "step": state.step + 1, "stage": stage, "value_loss": vres.loss, "critic_loss": closs,
        "qam_loss": info.loss, "mean_tau": tau_m, "mean_entropy": ent_m,
        "mean_quantile": q_m, "mean_target": float(np.mean(y)),
        "online_fraction": float(np.mean(batch.source == SOURCE_CODE["online_policy"])
                                 + np.mean(batch.source == SOURCE_CODE["online_intervention"])),
    }
    return new, metrics


# --------------------------------------------------------------------------
# logging and checkpoints

METRIC_FIELDS = ["step", "stage", "value_loss", "critic_loss", "qam_loss", "mean_tau",
                 "mean_entropy", "mean_quantile", "mean_target", "online_fraction",
                 "n", "tau_base", "tau_alpha", "mix", "event"]


class MetricsLog:
    """Append-only CSV; also kept in memory for tests."""

    def __init__(self, path: Path | None = None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists():
                with open(self.path, "w", newline="") as f:
                    csv.DictWriter(f, METRIC_FIELDS).writeheader()

    def write(self, row: dict) -> None:
        row = {k: row.get(k, "") for k in METRIC_FIELDS}
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.DictWriter(f, METRIC_FIELDS).writerow(
                    {k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def event(self, step: int, stage: str, text: str) -> None:
        self.write({"step": step, "stage": stage, "event": text})


def _adam_to_dict(s: dc.AdamState) -> dict:
    lay = (("v", (len(s.m),)),)
    return {"m": dc.params_to_dict(dc.ParamVector(s.m, lay)),
            "v": dc.params_to_dict(dc.ParamVector(s.v, lay)), "step": s.step}


def _adam_from_dict(d: dict) -> dc.AdamState:
    return dc.AdamState(dc.params_from_dict(d["m"]).values.copy(),
                        dc.params_from_dict(d["v"]).values.copy(), int(d["step"]))


def state_to_dict(st: LearnerState) -> dict:
    return {
        "format": "fleetrl.learner/1", "step": st.step, "stage": st.stage,
        "policy_version": st.policy_version,
        "policy": dc.net_to_dict(st.policy), "ref": dc.net_to_dict(st.ref),
        "q1": dc.net_to_dict(st.critics.q1), "q2": dc.net_to_dict(st.critics.q2),
        "q1_target": dc.net_to_dict(st.targets.q1), "q2_target": dc.net_to_dict(st.targets.q2),
        "value": dc.net_to_dict(st.value),
        "opt": {k: _adam_to_dict(getattr(st, k)) for k in ("opt_policy", "opt_q1", "opt_q2", "opt_value")},
    }


def state_from_dict(d: dict) -> LearnerState:
    if d.get("format") != "fleetrl.learner/1":
        raise ContractViolation("not a learner checkpoint")
    n = dc.net_from_dict
    opt = {k: _adam_from_dict(v) for k, v in d["opt"].items()}
    return LearnerState(
        n(d["policy"]), n(d["ref"]), divl.CriticPair(n(d["q1"]), n(d["q2"])),
        divl.CriticPair(n(d["q1_target"]), n(d["q2_target"])), n(d["value"]),
        opt["opt_policy"], opt["opt_q1"], opt["opt_q2"], opt["opt_value"],
        int(d["step"]), d["stage"], int(d["policy_version"]))


def save_state(st: LearnerState, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(state_to_dict(st)))
    tmp.replace(path)


def load_state(path) -> LearnerState:
    return state_from_dict(json.loads(Path(path).read_text()))


def _abort(st: LearnerState, out_dir: Path | None, err: NumericError, batch_step: int):
    if out_dir is not None:
        save_state(st, Path(out_dir) / f"diverged-step{batch_step}.json")
    log.error("aborting at step %d: %s", batch_step, err)


# --------------------------------------------------------------------------
# SFT

def sft_steps_for(cfg: LearnerConfig, num_demo_transitions: int) -> int:
    per_pass = math.ceil(num_demo_transitions / cfg.batch_size) if num_demo_transitions else 0
    return max(cfg.sft_passes * per_pass, cfg.sft_min_steps if num_demo_transitions else 0)


def run_sft(cfg: LearnerConfig, buffer: ReplayBuffer, log_: MetricsLog | None = None) -> dc.DenseNet:
    """Flow-matching behaviour cloning on the demonstration subset of ``buffer``."""
    demo = np.array(buffer.by_source["demo"], dtype=np.int64)
    if len(demo) == 0:
        raise ConfigError("offline buffer has no demonstration transitions")
    od = buffer.obs_dim
    D = cfg.horizon * cfg.action_dim
    seed0 = int(np.random.SeedSequence([cfg.seed, 1]).spawn(5)[0].generate_state(1)[0])
    field_ = flowpol.init_field(od, D, cfg.field_hidden, seed0)
    opt = dc.AdamState.fresh(field_.params)
    rng = np.random.default_rng([cfg.seed, 2])
    total = sft_steps_for(cfg, len(demo))
    obs, chunk = buffer.obs, buffer.chunk
    step = 0
    while step < total:
        order = rng.permutation(demo)
        for s in range(0, len(order), cfg.batch_size):
            if step >= total:
                break
            idx = order[s:s + cfg.batch_size]
            res = flowpol.sft_loss(field_, obs[idx], chunk[idx].reshape(len(idx), -1), [cfg.seed, 3, step])
            _check("sft loss", res.loss)
            lr = dc.cosine_lr(cfg.lr_sft, step, total)
            p, opt = dc.opt_step(field_.params, res.grads, opt, lr)
            field_ = field_.with_params(p)
            step += 1
            if log_ is not None and (step % 50 == 0 or step == total):
                log_.write({"step": step, "stage": "sft", "value_loss": "", "qam_loss": res.loss})
    return field_


# --------------------------------------------------------------------------
# stages

def _stage_row(cfg: LearnerConfig, stage: str, metrics: dict, mix: str) -> dict:
    s = cfg.schedule(stage)
    n = cfg.n_online if stage == "online" else f"{cfg.n_offline_short}/{cfg.n_offline_long}"
    return {**metrics, "n": n, "tau_base": s.tau_base, "tau_alpha": s.alpha, "mix": mix}


def long_task_ids(specs) -> set[int]:
    return {s.task_id for s in specs if s.long_horizon}


def run_offline(cfg: LearnerConfig, buffer: ReplayBuffer, specs: list[TaskSpec], *,
                out_dir: Path | None = None, metrics: MetricsLog | None = None,
                sft_policy: dc.DenseNet | None = None) -> LearnerState:
    """SFT on demos, freeze beta, then ``n_off`` offline DIVL + QAM steps."""
    present = {s.split("_")[0] for s, ix in buffer.by_source.items() if ix}
    if "demo" not in present:
        raise ConfigError("offline buffer has no demonstrations")
    missing = {"demo", "rollout", "play"} - present
    if missing:
        log.warning("offline buffer lacks sources %s", sorted(missing))
    metrics = metrics or MetricsLog(Path(out_dir) / "metrics.csv" if out_dir else None)
    if sft_policy is None:
        sft_policy = run_sft(cfg, buffer, metrics)
    st = init_state(cfg, sft_policy)
    if out_dir is not None:
        save_state(st, Path(out_dir) / "checkpoint-sft.json")
    metrics.event(0, "offline", "stage=offline")
    table = NStepTable(buffer, cfg, "offline", long_task_ids(specs))
    rng = np.random.default_rng([cfg.seed, 4])
    for _ in range(cfg.n_off):
        batch = draw_batch([table], cfg.batch_size, rng)
        try:
            st, m = learner_step(st, batch, cfg, "offline")
        except NumericError as e:
            _abort(st, out_dir, e, st.step + 1)
            raise
        metrics.write(_stage_row(cfg, "offline", m, "offline"))
        if out_dir is not None and st.step % cfg.checkpoint_every == 0:
            save_state(st, Path(out_dir) / f"checkpoint-{st.step:06d}.json")
    if out_dir is not None:
        save_state(st, Path(out_dir) / "checkpoint-offline.json")
    return st


def run_online(st: LearnerState, cfg: LearnerConfig, offline: ReplayBuffer, specs: list[TaskSpec],
               fleet, *, out_dir: Path | None = None, metrics: MetricsLog | None = None,
               online: ReplayBuffer | None = None, publish_retries: int = 8) -> tuple[LearnerState, ReplayBuffer]:
    """Central online loop: ingest fleet episodes, 1:1 mixed updates, publish every ``n_sync`` steps.

    ``fleet`` needs ``publish(policy, version)`` and ``poll() -> list[Episode]``.
    """
    metrics = metrics or MetricsLog(Path(out_dir) / "metrics.csv" if out_dir else None)
    st = dataclasses.replace(st, stage="online")
    online = online or ReplayBuffer("online", offline.obs_dim, cfg.horizon, cfg.action_dim, cfg.gamma)
    long = long_task_ids(specs)
    tables = [NStepTable(offline, cfg, "online", long), NStepTable(online, cfg, "online", long)]
    metrics.event(st.step, "online", "stage=online")
    rng = np.random.default_rng([cfg.seed, 6])

    def publish():
        nonlocal st
        version = st.policy_version + 1
        delay = 0.05
        for attempt in range(publish_retries):
            try:
                fleet.publish(st.policy, version)
                break
            except (OSError, ConnectionError) as e:
                log.warning("publish v%d failed (%s); retry %d", version, e, attempt + 1)
                time.sleep(delay)
                delay *= 2
        else:
            raise ConnectionError(f"could not publish policy version {version}")
        st = dataclasses.replace(st, policy_version=version)
        metrics.event(st.step, "online", f"publish v{version}")

    publish()
    for k in range(cfg.n_on):
        for ep in fleet.poll():
            online.add_episode(ep)
        batch = draw_batch(tables, cfg.batch_size, rng)
        try:
            st, m = learner_step(st, batch, cfg, "online")
        except NumericError as e:
            _abort(st, out_dir, e, st.step + 1)
            raise
        mix = "offline+online" if len(online) else "offline"
        metrics.write(_stage_row(cfg, "online", m, mix))
        if (k + 1) % cfg.n_sync == 0:
            publish()
        if out_dir is not None and st.step % cfg.checkpoint_every == 0:
            save_state(st, Path(out_dir) / f"checkpoint-{st.step:06d}.json")
    if out_dir is not None:
        save_state(st, Path(out_dir) / "checkpoint-online.json")
    return st, online
