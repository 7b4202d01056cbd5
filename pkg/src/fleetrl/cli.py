"""Command line entry point: gendata, train, eval, fleetbench.

Exit codes: 0 success, 1 contract or configuration error, 2 reliability
gate failure, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from fleetrl import diffcore as dc
from fleetrl import envsim, evaluation, learner
from fleetrl.config import RunConfig
from fleetrl.errors import ConfigError, ContractViolation, NumericError, ReliabilityError
from fleetrl.fleet.audit import audit
from fleetrl.fleet.bench import run_fleetbench
from fleetrl.fleet.runtime import AsyncFleet
from fleetrl.fleet.store import EpisodeStore, sha256
from fleetrl.fleet.sync import SyncFleet
from fleetrl.replay import ReplayBuffer

log = logging.getLogger("fleetrl")

EXIT_OK, EXIT_CONFIG, EXIT_RELIABILITY, EXIT_NUMERIC = 0, 1, 2, 3

OFFLINE_LOG = "offline.jsonl"
SFT_POLICY = "sft/policy.json"
OFFLINE_CKPT = "offline/checkpoint-offline.json"
ONLINE_CKPT = "online/checkpoint-online.json"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing prerequisite {what}: {path}")
    return path


def _lineage(out: Path, stage: str, parents: dict[str, Path], produced: Path) -> None:
    """Append one line per stage run: which artifacts it consumed and produced (with hashes)."""
    rec = {"stage": stage, "time": time.time(),
           "parents": {k: {"path": str(p), "sha256": sha256(p.read_bytes())} for k, p in parents.items()},
           "produced": {"path": str(produced), "sha256": sha256(produced.read_bytes())}}
    with open(out / "lineage.jsonl", "a") as f:
        f.write(json.dumps(rec, sort_keys=True) + "\n")


def _offline_buffer(cfg: RunConfig, out: Path) -> ReplayBuffer:
    eps = envsim.read_episode_log(_require(out / OFFLINE_LOG, "offline data (run gendata)"))
    lc = cfg.learner_config()
    buf = ReplayBuffer("offline", envsim.obs_dim(), lc.horizon, lc.action_dim, lc.gamma)
    buf.add_episodes(eps)
    return buf


# --------------------------------------------------------------------------
# commands

def cmd_gendata(cfg: RunConfig, out: Path) -> dict:
    eps = envsim.generate_offline_buffer(cfg.specs(), cfg.counts_by_id(), cfg.seed,
                                         demo_noise=cfg.data.demo_noise,
                                         rollout_noise=cfg.data.rollout_noise)
    out.mkdir(parents=True, exist_ok=True)
    envsim.write_episode_log(eps, out / OFFLINE_LOG)
    summary = envsim.source_summary(eps)
    (out / "data_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def cmd_train(cfg: RunConfig, out: Path, stage: str) -> Path:
    lc = cfg.learner_config()
    specs = cfg.specs()
    if stage == "sft":
        buf = _offline_buffer(cfg, out)
        metrics = learner.MetricsLog(out / "sft" / "metrics.csv")
        policy = learner.run_sft(lc, buf, metrics)
        path = out / SFT_POLICY
        dc.save_net(policy, path)
        _lineage(out, "sft", {"data": out / OFFLINE_LOG}, path)
        return path
    if stage == "offline":
        buf = _offline_buffer(cfg, out)
        sft = dc.load_net(_require(out / SFT_POLICY, "SFT policy (run train --stage sft)"))
        st = learner.run_offline(lc, buf, specs, out_dir=out / "offline", sft_policy=sft)
        path = out / OFFLINE_CKPT
        _lineage(out, "offline", {"data": out / OFFLINE_LOG, "sft": out / SFT_POLICY}, path)
        return path
    if stage == "online":
        buf = _offline_buffer(cfg, out)
        st = learner.load_state(_require(out / OFFLINE_CKPT, "offline checkpoint (run train --stage offline)"))
        if cfg.online.mode == "sync":
            fleet = SyncFleet(specs, cfg.online.actors, cfg.seed, stall_chunks=cfg.online.stall_chunks,
                              horizon=lc.horizon, n_flow=lc.n_flow)
        else:
            fleet = AsyncFleet(out / "online" / "fleet", specs, st.policy, num_actors=cfg.online.actors,
                               seed=cfg.seed, window=cfg.online.window,
                               stall_chunks=cfg.online.stall_chunks, n_flow=lc.n_flow).start()
        try:
            st, online = learner.run_online(st, lc, buf, specs, fleet, out_dir=out / "online")
        finally:
            if isinstance(fleet, AsyncFleet):
                fleet.close()
        path = out / ONLINE_CKPT
        _lineage(out, "online", {"data": out / OFFLINE_LOG, "offline": out / OFFLINE_CKPT}, path)
        return path
    raise ConfigError(f"unknown stage {stage!r}")


def _factory(checkpoint: str, lc: learner.LearnerConfig):
    """A chunk-function factory plus the value net (if any) for a checkpoint spec.

    ``expert`` or ``expert:<noise>`` selects the scripted expert; otherwise a
    learner checkpoint or a bare policy net file.
    """
    if checkpoint.startswith("expert"):
        _, _, noise = checkpoint.partition(":")
        return evaluation.expert_factory(float(noise or 0.0), lc.horizon), None
    path = _require(Path(checkpoint), "checkpoint")
    d = json.loads(path.read_text())
    if d.get("format") == "fleetrl.learner/1":
        st = learner.state_from_dict(d)
        return evaluation.policy_factory(st.policy, lc.horizon, lc.n_flow), st.value
    try:
        net = dc.net_from_dict(d)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{path} is neither a learner checkpoint nor a policy net") from e
    return evaluation.policy_factory(net, lc.horizon, lc.n_flow), None


def cmd_eval(cfg: RunConfig, out: Path, checkpoint: str, episodes: int | None = None) -> list:
    lc = cfg.learner_config()
    factory, value_net = _factory(checkpoint, lc)
    n = cfg.eval_episodes if episodes is None else episodes
    reports, by_task = evaluation.evaluate(factory, cfg.specs(), n, cfg.seed, horizon=lc.horizon)
    evaluation.write_report(reports, out)
    if value_net is not None:
        trajs = [evaluation.value_trajectory(value_net, ep, lc.horizon)
                 for eps in by_task.values() for ep in eps]
        if trajs:
            evaluation.write_value_csv(trajs, out / "value_trajectories.csv")
    return reports


def cmd_fleetbench(cfg: RunConfig, out: Path) -> dict:
    rep = run_fleetbench(cfg.fleet_config(), out)
    d = rep.to_dict()
    (out / "fleetbench.json").write_text(json.dumps(d, indent=2, sort_keys=True, default=str))
    if not rep.ok:
        raise ReliabilityError("; ".join(rep.violations()))
    return d


def cmd_audit(root: Path) -> dict:
    rep = audit(root, EpisodeStore(root))
    if not rep.ok:
        raise ReliabilityError(f"audit failed: {json.dumps(rep.to_dict(), sort_keys=True)}")
    return rep.to_dict()


# --------------------------------------------------------------------------
# argument handling

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fleetrl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="RunConfig JSON (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", type=Path, help="output directory (overrides the config)")
        return sp

    common(sub.add_parser("gendata", help="generate the offline dataset"))
    tr = common(sub.add_parser("train", help="run one training stage"))
    tr.add_argument("--stage", required=True, choices=["sft", "offline", "online"])
    ev = common(sub.add_parser("eval", help="paired-seed evaluation of a checkpoint"))
    ev.add_argument("--checkpoint", required=True, help="checkpoint path, or expert[:noise]")
    ev.add_argument("--episodes", type=int, help="episodes per task (overrides the config)")
    fb = common(sub.add_parser("fleetbench", help="fleet reliability and latency benchmark"))
    fb.add_argument("--no-chaos", action="store_true", help="disable kill points and bus faults")
    fb.add_argument("--bus", choices=["local", "tcp"], help="bus transport (overrides the config)")
    fb.add_argument("--audit", type=Path, metavar="ROOT", help="only audit an existing fleet root")
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = str(args.out)
    if getattr(args, "no_chaos", False):
        cfg.fleet = dataclasses.replace(cfg.fleet, chaos=False, drop_rate=0.0, duplicate_rate=0.0,
                                        store_failures=0)
    if getattr(args, "bus", None):
        cfg.fleet = dataclasses.replace(cfg.fleet, bus_mode=args.bus)
    cfg.validate()
    return cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fleetbench" and args.audit is not None:
            print(json.dumps(cmd_audit(args.audit), indent=2, sort_keys=True))
            return EXIT_OK
        cfg = load_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / f"config-{args.command}.json")
        if args.command == "gendata":
            s = cmd_gendata(cfg, out)
            print(json.dumps({"total_steps": s["total_steps"], "fraction_by_kind": s["fraction_by_kind"]},
                             sort_keys=True))
        elif args.command == "train":
            print(cmd_train(cfg, out, args.stage))
        elif args.command == "eval":
            for r in cmd_eval(cfg, out, args.checkpoint, args.episodes):
                print(f"{r.name}: success {r.success_rate:.3f} score {r.score:.3f} "
                      f"length {r.mean_length:.1f} ({r.episodes} episodes)")
        elif args.command == "fleetbench":
            d = cmd_fleetbench(cfg, out)
            print(json.dumps({"ok": d["ok"], "audit": d["audit"], "barriers": d["barriers"],
                              "latency": d["latency"]}, indent=2, sort_keys=True))
    except ReliabilityError as e:
        print(f"reliability gate failed: {e}", file=sys.stderr)
        return EXIT_RELIABILITY
    except NumericError as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractViolation) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
