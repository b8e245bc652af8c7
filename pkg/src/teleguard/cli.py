"""Single entry point: dataset generation, training, evaluation, serving.

Every run writes ``manifest.json`` (resolved configuration plus SHA-256 of
file inputs) into the output directory, so any result is reproducible from
the manifest alone.  Exit codes: 0 success, 1 validation error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .actor import ActorModel, train_actor
from .config import apply_overrides, build_configs, dump_config, parse_kv_text
from .critic import CriticModel, train_critic
from .data import (
    DatasetFormatError,
    TransitionDataset,
    class_counts,
    load_trajectories,
    record_episode,
    save_trajectories,
)
from .env import ConfigError, World, action_dim, observation_dim
from .evaluation import ExperimentSpec, render_report, run_experiment, score_separation
from .nn import CheckpointError
from .operators import OPERATOR_KINDS, standard_operator_config
from .loop import ASSIST_MODES

log = logging.getLogger("teleguard")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

# seed offsets per operator kind when generating data
KIND_SEED_BLOCK = 10_000


class CliError(Exception):
    """Validation problem: maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _setup_logging() -> None:
    level_name = os.environ.get("TELEGUARD_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        raise CliError(f"TELEGUARD_LOG must be one of {sorted(levels)}")
    logging.basicConfig(
        level=levels[level_name],
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_mapping(args) -> dict:
    mapping = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                mapping = parse_kv_text(f.read())
        except FileNotFoundError as e:
            raise CliError(f"config file not found: {e.filename}") from e
    mapping = apply_overrides(mapping, args.set)
    if args.seed is not None:
        for key in ("world.seed", "operator.seed", "critic.seed", "actor.seed"):
            mapping.setdefault(key, str(args.seed))
    return mapping


def _resolve(args) -> dict:
    return build_configs(_load_mapping(args))


def _write_manifest(args, out_dir: Path, configs: dict, inputs: dict, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": __version__,
        "command": args.command,
        "seed": args.seed,
        "overrides": list(args.set or []),
        "config_file": str(args.config) if args.config else None,
        "resolved_config": dump_config(configs),
        "inputs": {name: _sha256(p) for name, p in inputs.items()},
        "extra": extra or {},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="ascii")
    log.info("wrote %s", path)


def _out_dir(args) -> Path:
    return Path(args.out)


def cmd_gen_data(args) -> int:
    configs = _resolve(args)
    world_cfg = configs["world"]
    world = World(world_cfg)
    out = _out_dir(args)
    horizon = configs["critic"].horizon
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    for k in kinds:
        if k not in OPERATOR_KINDS:
            raise CliError(f"unknown operator kind {k!r} in --kinds")
    trajectories = []
    for kind in kinds:
        kind_idx = OPERATOR_KINDS.index(kind)  # seed block stable under --kinds
        op_cfg = standard_operator_config(kind, seed=configs["operator"].seed + kind_idx)
        for e in range(args.episodes):
            episode_seed = kind_idx * KIND_SEED_BLOCK + e
            from .operators import make_operator

            op = make_operator(op_cfg, world_cfg, episode_seed)
            trajectories.append(record_episode(world, op, episode_seed, horizon=horizon))
    counts = class_counts(trajectories)
    out.mkdir(parents=True, exist_ok=True)
    data_path = out / "dataset.tgd"
    save_trajectories(data_path, trajectories)
    _write_manifest(args, out, configs, {}, extra={"episodes_per_kind": args.episodes,
                                                   "class_counts": counts})
    print(f"wrote {data_path}: {len(trajectories)} trajectories, "
          f"{counts['success']} success / {counts['failure']} failure")
    if args.episodes == 0:
        log.warning("generated an empty dataset (0 episodes per kind)")
        return EXIT_OK
    if counts["success"] == 0:
        print("error: dataset contains zero successful episodes", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _load_dataset(path, horizon) -> TransitionDataset:
    try:
        trajectories = load_trajectories(path)
    except FileNotFoundError as e:
        raise CliError(f"dataset not found: {e.filename}") from e
    if not trajectories:
        raise CliError(f"dataset at {path} is empty")
    return TransitionDataset(trajectories, horizon=horizon)


def _check_dataset_dims(dataset: TransitionDataset, world_cfg) -> None:
    want = (observation_dim(world_cfg), action_dim(world_cfg))
    got = (dataset.obs_dim, dataset.act_dim)
    if want != got:
        raise CliError(
            f"dataset dims {got} do not match world config {want}; "
            "check num_arms and the config file"
        )


def cmd_train_critic(args) -> int:
    configs = _resolve(args)
    dataset = _load_dataset(args.data, configs["critic"].horizon)
    _check_dataset_dims(dataset, configs["world"])
    out = _out_dir(args)
    history: list = []
    model = train_critic(dataset, configs["critic"], history=history)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "critic.ckpt"
    model.save(ckpt)
    with open(out / "critic_history.jsonl", "w", encoding="ascii") as f:
        for rec in history:
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    _write_manifest(args, out, configs, {"dataset": args.data})
    print(f"wrote {ckpt} (q_min={model.q_min:.4f} q_max={model.q_max:.4f} tau={model.tau:.4f})")
    return EXIT_OK


def cmd_train_actor(args) -> int:
    configs = _resolve(args)
    dataset = _load_dataset(args.data, configs["critic"].horizon)
    _check_dataset_dims(dataset, configs["world"])
    critic = _load_critic(args.critic)
    out = _out_dir(args)
    history: list = []
    model = train_actor(dataset, critic, configs["actor"], history=history)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "actor.ckpt"
    model.save(ckpt)
    with open(out / "actor_history.jsonl", "w", encoding="ascii") as f:
        for rec in history:
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    _write_manifest(args, out, configs, {"dataset": args.data, "critic": args.critic})
    print(f"wrote {ckpt}")
    return EXIT_OK


def _load_critic(path) -> CriticModel:
    if path is None:
        raise CliError("a critic checkpoint is required (--critic PATH)")
    try:
        return CriticModel.load(path)
    except FileNotFoundError as e:
        raise CliError(f"critic checkpoint not found: {e.filename}") from e
    except (CheckpointError, ValueError) as e:
        raise CliError(f"bad critic checkpoint: {e}") from e


def _load_actor(path) -> ActorModel:
    if path is None:
        raise CliError("an actor checkpoint is required (--actor PATH)")
    try:
        return ActorModel.load(path)
    except FileNotFoundError as e:
        raise CliError(f"actor checkpoint not found: {e.filename}") from e
    except (CheckpointError, ValueError) as e:
        raise CliError(f"bad actor checkpoint: {e}") from e


def cmd_evaluate(args) -> int:
    configs = _resolve(args)
    modes = list(ASSIST_MODES) if args.mode == "all" else [args.mode]
    critic = actor = None
    if any(m == "value" for m in modes):
        critic = _load_critic(args.critic)
        actor = _load_actor(args.actor)
    elif any(m == "static" for m in modes):
        actor = _load_actor(args.actor)
    operator = standard_operator_config(args.operator, seed=configs["operator"].seed)
    reports = {}
    for mode in modes:
        spec = ExperimentSpec(
            operator=operator,
            mode=mode,
            episodes=args.episodes,
            base_seed=args.eval_seed,
            world=configs["world"],
            assist=configs["assist"],
        )
        reports[mode] = run_experiment(
            spec,
            critic=critic if mode == "value" else None,
            actor=actor if mode != "off" else None,
        )
        agg = reports[mode].aggregates
        print(f"{mode}: success {agg['success_count']}/{agg['episodes']} "
              f"rate={agg['success_rate']:.3f} ci95={agg['success_rate_ci95']}")
    separation = None
    if args.data and critic is not None:
        dataset = _load_dataset(args.data, critic.horizon)
        separation = score_separation(dataset, critic)
        print(f"score separation: AUC={separation['auc_failure_head']:.3f} "
              f"Qt(success)={separation['mean_q_tilde_success']:.3f} "
              f"Qt(failure tail)={separation['mean_q_tilde_failure_tail']:.3f}")
    out = _out_dir(args)
    files = render_report(reports, out, separation)
    inputs = {}
    if args.critic:
        inputs["critic"] = args.critic
    if args.actor:
        inputs["actor"] = args.actor
    if args.data:
        inputs["dataset"] = args.data
    _write_manifest(args, out, configs, inputs,
                    extra={"episodes": args.episodes, "operator": args.operator,
                           "modes": modes, "eval_seed": args.eval_seed})
    for f in files:
        log.info("wrote %s", f)
    if len(modes) == 3:
        sr = {m: reports[m].aggregates["success_rate"] for m in modes}
        ordered = sr["value"] > sr["static"] > sr["off"]
        lo_v = reports["value"].aggregates["success_rate_ci95"][0]
        hi_o = reports["off"].aggregates["success_rate_ci95"][1]
        print(f"headline ordering value>static>off: {'PASS' if ordered else 'FAIL'} "
              f"({sr['value']:.3f} / {sr['static']:.3f} / {sr['off']:.3f}); "
              f"value-vs-off CI gap: {lo_v - hi_o:+.3f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        trajectories = load_trajectories(args.data)
    except FileNotFoundError as e:
        raise CliError(f"dataset not found: {e.filename}") from e
    counts = class_counts(trajectories)
    lengths = [t.length for t in trajectories]
    total = int(np.sum(lengths)) if lengths else 0
    print(f"{args.data}: {len(trajectories)} trajectories, {total} transitions")
    print(f"  success {counts['success']} / failure {counts['failure']}")
    if lengths:
        print(f"  length min/median/max: {int(np.min(lengths))}/"
              f"{int(np.median(lengths))}/{int(np.max(lengths))}")
        kinds = sorted({t.meta.get("operator_kind", "?") for t in trajectories})
        print(f"  operator kinds: {', '.join(kinds)}")
        dims = (trajectories[0].observations.shape[1], trajectories[0].actions.shape[1])
        print(f"  obs_dim/act_dim: {dims[0]}/{dims[1]}, horizon {trajectories[0].horizon}")
    return EXIT_OK


def cmd_merge(args) -> int:
    merged = []
    for p in args.inputs:
        try:
            merged.extend(load_trajectories(p))
        except FileNotFoundError as e:
            raise CliError(f"dataset not found: {e.filename}") from e
    out = Path(args.out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_trajectories(out, merged)
    counts = class_counts(merged)
    print(f"wrote {out}: {len(merged)} trajectories "
          f"({counts['success']} success / {counts['failure']} failure)")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import TeleopService

    configs = _resolve(args)
    critic = _load_critic(args.critic) if args.critic else None
    actor = _load_actor(args.actor) if args.actor else None
    mode = args.mode
    if mode == "value" and (critic is None or actor is None):
        raise CliError("mode=value needs --critic and --actor")
    if mode == "static" and actor is None:
        raise CliError("mode=static needs --actor")
    service = TeleopService(
        world_config=configs["world"],
        assist_config=configs["assist"],
        critic=critic,
        actor=actor,
        mode=mode,
        host=args.host,
        port=args.port,
        lockstep=args.lockstep,
        episode_seed=args.eval_seed,
    )
    print(f"serving on {args.host}:{service.port} (mode={mode}, "
          f"lockstep={args.lockstep}); ctrl-c to stop")
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        service.stop()
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="teleguard", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", required=out_required, default=".",
                       help="output directory (manifest + artifacts)")
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override (repeatable)")

    p = sub.add_parser("gen-data", help="record labeled teleoperation episodes")
    common(p)
    p.add_argument("--episodes", type=int, default=100, help="episodes per operator kind")
    p.add_argument("--kinds", default=",".join(OPERATOR_KINDS),
                   help="comma-separated operator kinds to run")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-critic", help="train the conservative success score")
    common(p)
    p.add_argument("--data", required=True, help="dataset file")
    p.set_defaults(fn=cmd_train_critic)

    p = sub.add_parser("train-actor", help="train the guidance actor against a frozen critic")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--critic", required=True)
    p.set_defaults(fn=cmd_train_actor)

    p = sub.add_parser("evaluate", help="closed-loop experiments and reports")
    common(p)
    p.add_argument("--mode", choices=[*ASSIST_MODES, "all"], default="all")
    p.add_argument("--operator", choices=OPERATOR_KINDS, default="biased")
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--eval-seed", type=int, default=50_000,
                   help="base seed for evaluation episodes")
    p.add_argument("--critic", default=None)
    p.add_argument("--actor", default=None)
    p.add_argument("--data", default=None, help="dataset for score-separation stats")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("inspect", help="summarize a dataset file")
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("merge", help="concatenate dataset files")
    p.add_argument("--out-file", required=True)
    p.add_argument("inputs", nargs="+")
    p.set_defaults(fn=cmd_merge)

    p = sub.add_parser("serve", help="run the real-time teleoperation service")
    common(p, out_required=False)
    p.add_argument("--critic", default=None)
    p.add_argument("--actor", default=None)
    p.add_argument("--mode", choices=ASSIST_MODES, default="value")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8712)
    p.add_argument("--lockstep", action="store_true",
                   help="advance one servo tick per received command (replay/testing)")
    p.add_argument("--eval-seed", type=int, default=0, help="episode seed")
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigError, DatasetFormatError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as e:  # runtime failures keep a distinct exit code
        log.exception("runtime failure")
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
