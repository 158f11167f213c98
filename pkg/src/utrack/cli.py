"""``utrack`` command line: train, curriculum, evaluate, benchmark, rollout, plot.

Grammar::

    utrack <command> [--config PATH] [--seed N] [--out DIR] [args...] [key=value...]

Config files are JSON with a ``schema_version`` and the sections ``env``,
``train``, ``evaluate``, ``benchmark`` plus top-level ``seed`` and ``plan``.
``key=value`` overrides use dotted names (``env.n_agents=2``, ``seed=3``);
values are parsed as JSON when possible, else kept as strings.  Unknown keys
are errors.

Exit codes: 0 ok, 2 usage or configuration error, 3 data or compatibility
error, 1 anything else.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Dict, List, Optional

from . import curriculum, marl, nets, plotting, vecenv
from .env import EnvConfig, TrajectoryRecorder

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "plan": "desk",
    "env": {},
    "train": {},
    "evaluate": {"n_episodes": 100, "sweep": None, "trajectories": 0},
    "benchmark": {"configs": ["1x1", "2x2", "3x3", "4x4", "5x5"], "n_envs": [1, 128, 1024], "n_steps": 20,
                  "policy": "random", "n_workers": 1},
}
_SECTION_KEYS = {
    "evaluate": {"n_episodes", "sweep", "trajectories"},
    "benchmark": {"configs", "n_envs", "n_steps", "policy", "n_workers"},
}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---- configuration ---------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: List[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        parts = key.split(".")
        if parts[0] not in DEFAULT_CONFIG or parts[0] == "schema_version":
            raise ConfigError(f"unknown config key {key!r}")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
        node[parts[-1]] = _parse_value(val)
    return cfg


def load_config(path: Optional[str], overrides: List[str] = (), seed: Optional[int] = None) -> dict:
    """Merge defaults, the optional config file, overrides and ``--seed``;
    validate every section.  Raises ``ConfigError`` naming the offending field."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{p}: top level must be an object")
        if user.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"{p}: schema_version must be {SCHEMA_VERSION}, got {user.get('schema_version')!r}")
        unknown = set(user) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"{p}: unknown config keys {sorted(unknown)}")
        for k, v in user.items():
            if isinstance(cfg.get(k), dict) and isinstance(v, dict):
                cfg[k].update(v)
            else:
                cfg[k] = v
    cfg = apply_overrides(cfg, list(overrides))
    if seed is not None:
        cfg["seed"] = seed
    for sec, keys in _SECTION_KEYS.items():
        bad = set(cfg[sec]) - keys
        if bad:
            raise ConfigError(f"unknown {sec} keys {sorted(bad)}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}")
    env_cfg(cfg)
    train_cfg(cfg)
    return cfg


def env_cfg(cfg: dict) -> EnvConfig:
    try:
        return EnvConfig.from_dict(cfg["env"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"env: {exc}") from None


def train_cfg(cfg: dict) -> marl.TrainConfig:
    d = dict(cfg["train"])
    d["seed"] = cfg["seed"]
    try:
        return marl.TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None


def write_snapshot(out: Path, cfg: dict, command: str) -> Path:
    """Persist the merged config next to the outputs (atomic rename)."""
    out.mkdir(parents=True, exist_ok=True)
    snap = dict(cfg, command=command)
    snap["env"] = env_cfg(cfg).to_dict()
    snap["train"] = train_cfg(cfg).to_dict()
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".config.", suffix=".json")
    with os.fdopen(fd, "w") as fh:
        json.dump(snap, fh, indent=1, sort_keys=True)
    dst = out / "config.json"
    os.replace(tmp, dst)
    return dst


def _say(msg: str):
    print(msg, flush=True)


# ---- commands --------------------------------------------------------------------------------

def cmd_train(args, cfg) -> int:
    out = Path(args.out or "runs/train")
    ec, tc = env_cfg(cfg), train_cfg(cfg)
    write_snapshot(out, cfg, "train")
    learner = None
    if args.init:
        learner, _ = marl.load_learner(args.init, {"actor": {"d": tc.d_model, "heads": tc.n_heads,
                                                             "blocks": tc.n_blocks}})
        learner = marl.Learner.fresh(learner.actor, learner.critic)

    def progress(row):
        ret = row["mean_return"]
        _say(f"update {row['update']}/{tc.n_updates} steps {row['timesteps']} "
             f"return {'-' if ret is None else f'{ret:.2f}'} track_err {row['mean_track_err']:.1f} "
             f"sps {row['sps']:.0f}")

    res = marl.train(ec, tc, learner, out_dir=out, resume=args.resume, on_update=progress)
    _say(f"final checkpoint: {res.checkpoint}")
    return EXIT_OK


def _resolve_plan(cfg, positional) -> curriculum.StagePlan:
    ref = positional[0] if positional else cfg["plan"]
    if isinstance(ref, dict):
        return curriculum.StagePlan.from_dict(ref)
    if ref in curriculum.PLAN_NAMES:
        return curriculum.default_plan(ref)
    p = Path(ref)
    if p.suffix == ".json" or p.exists():
        if not p.is_file():
            raise ConfigError(f"plan file not found: {p}")
        try:
            return curriculum.StagePlan.load(p)
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"{p}: {exc}") from None
    raise ConfigError(f"unknown plan {ref!r}; built-in plans: {', '.join(curriculum.PLAN_NAMES)}")


def cmd_curriculum(args, cfg, positional) -> int:
    try:
        plan = _resolve_plan(cfg, positional)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out or f"runs/curriculum-{plan.name}")
    write_snapshot(out, dict(cfg, plan=plan.to_dict()), "curriculum")
    n = len(plan.stages)
    names = [s.name for s in plan.stages]

    def on_stage(name, msg):
        _say(f"[{names.index(name) + 1}/{n}] {name}: {msg}")

    try:
        done = curriculum.run_curriculum(plan, out, cfg["seed"], on_stage=on_stage, skip_existing=args.resume_stages)
    except curriculum.CurriculumError as exc:
        _say(f"curriculum incomplete: {exc}")
        return EXIT_INTERNAL
    for k, v in done.items():
        _say(f"{k}: {v}")
    return EXIT_OK


def _checkpoint_arg(args, positional) -> Path:
    ref = args.checkpoint or (positional[0] if positional else None)
    if ref is None:
        raise ConfigError("a checkpoint path is required")
    return Path(ref)


def _eval_env(args, cfg, ckpt: Path) -> EnvConfig:
    """Env config: from the config file / overrides when given, else the
    checkpoint's training env with overrides applied."""
    if args.config is None:
        try:
            manifest = json.loads(ckpt.with_suffix(".json").read_text())
        except FileNotFoundError:
            raise DataError(f"checkpoint manifest not found: {ckpt.with_suffix('.json')}") from None
        base = manifest.get("meta", {}).get("env")
        if base:
            merged = dict(base)
            merged.update({k: v for k, v in cfg["env"].items()})
            try:
                return EnvConfig.from_dict(merged)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"env: {exc}") from None
    return env_cfg(cfg)


def _check_dims(args, cfg, ckpt: Path):
    loaded, _, _ = _load(ckpt)
    actor = loaded.get("actor")
    if actor is None:
        raise DataError(f"{ckpt}: no actor parameters")
    if actor.z != 13:
        raise DataError(f"{ckpt}: actor expects {actor.z} token features, the environment emits 13")
    if args.config is not None or cfg["train"]:
        tc = train_cfg(cfg)
        want = {"d": tc.d_model, "heads": tc.n_heads, "blocks": tc.n_blocks}
        have = {"d": actor.d, "heads": actor.heads, "blocks": actor.blocks}
        if want != have:
            raise DataError(f"{ckpt}: actor dims {have} do not match config {want}")
    return actor


def _load(ckpt: Path):
    try:
        return nets.load_checkpoint(ckpt)
    except nets.CheckpointError as exc:
        raise DataError(str(exc)) from None


def _parse_sweep(text: str):
    if "=" not in text:
        raise ConfigError(f"--sweep expects key=v1,v2,..., got {text!r}")
    key, vals = text.split("=", 1)
    return {"key": key, "values": [_parse_value(v) for v in vals.split(",") if v != ""]}


def cmd_evaluate(args, cfg, positional) -> int:
    ckpt = _checkpoint_arg(args, positional)
    actor = _check_dims(args, cfg, ckpt)
    ec = _eval_env(args, cfg, ckpt)
    ev = cfg["evaluate"]
    n = int(args.episodes if args.episodes is not None else ev["n_episodes"])
    if n < 1:
        raise ConfigError("evaluate.n_episodes must be >= 1")
    sweep = _parse_sweep(args.sweep) if args.sweep else ev.get("sweep")
    n_traj = int(args.trajectories if args.trajectories is not None else ev.get("trajectories", 0))
    out = Path(args.out) if args.out else None
    seed = cfg["seed"]
    recs = []
    recorders = [TrajectoryRecorder(i) for i in range(min(n_traj, n))]

    def rec(world, step_out):
        for r in recorders:
            r.record(world, step_out)

    main = {"kind": "summary", "n_episodes": n}
    main.update(marl.evaluate_policy(actor, ec, n, seed=seed, recorder=rec if recorders else None))
    recs.append(main)
    if sweep:
        if sweep["key"] not in EnvConfig.__dataclass_fields__:
            raise ConfigError(f"sweep key {sweep['key']!r} is not an env field")
        for v in sweep["values"]:
            try:
                c = EnvConfig.from_dict({**ec.to_dict(), sweep["key"]: v})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"sweep {sweep['key']}={v!r}: {exc}") from None
            r = {"kind": "sweep", "sweep": sweep["key"], "value": v, "n_episodes": n}
            r.update(marl.evaluate_policy(actor, c, n, seed=seed))
            recs.append(r)
    for r in recs:
        _say(json.dumps(r, sort_keys=True))
    if out is not None:
        write_snapshot(out, cfg, "evaluate")
        (out / "eval.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in recs))
        for i, r in enumerate(recorders):
            r.write(out / f"traj_{i:03d}.csv")
    elif recorders:
        raise ConfigError("--trajectories needs --out")
    return EXIT_OK


def cmd_rollout(args, cfg, positional) -> int:
    ckpt = _checkpoint_arg(args, positional)
    actor = _check_dims(args, cfg, ckpt)
    ec = _eval_env(args, cfg, ckpt)
    n = int(args.episodes if args.episodes is not None else 1)
    out = Path(args.out or "runs/rollout")
    out.mkdir(parents=True, exist_ok=True)
    recorders = [TrajectoryRecorder(i) for i in range(n)]

    def rec(world, step_out):
        for r in recorders:
            r.record(world, step_out)

    metrics = marl.evaluate_policy(actor, ec, n, seed=cfg["seed"], recorder=rec)
    for i, r in enumerate(recorders):
        r.write(out / f"traj_{i:03d}.csv")
        _say(str(out / f"traj_{i:03d}.csv"))
    _say(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def _parse_entity_config(text: str):
    try:
        a, t = text.lower().split("x")
        return int(a), int(t)
    except ValueError:
        raise ConfigError(f"benchmark config {text!r} must look like 2x3 (agents x targets)") from None


def cmd_benchmark(args, cfg) -> int:
    b = dict(cfg["benchmark"])
    if args.envs:
        b["n_envs"] = [int(v) for v in args.envs.split(",")]
    if args.configs:
        b["configs"] = args.configs.split(",")
    if args.steps is not None:
        b["n_steps"] = args.steps
    base = env_cfg(cfg)
    records = []
    for c in b["configs"]:
        na, nt = _parse_entity_config(c)
        ec = base.replace(n_agents=na, n_targets=nt)
        for n in b["n_envs"]:
            r = vecenv.benchmark_sps(ec, int(n), int(b["n_steps"]), policy=b["policy"], seed=cfg["seed"],
                                     n_workers=int(b["n_workers"]))
            records.append(r)
            _say(f"# {r['config']} envs={n} sps={r['sps']:.0f}")
    report = vecenv.format_report(records)
    sys.stdout.write(report)
    if args.out:
        out = Path(args.out)
        write_snapshot(out, cfg, "benchmark")
        (out / "benchmark.jsonl").write_text(report)
    return EXIT_OK


def cmd_plot(args, positional) -> int:
    if not positional:
        raise ConfigError("plot needs at least one trajectory CSV")
    for p in positional:
        if not Path(p).is_file():
            raise ConfigError(f"trajectory CSV not found: {p}")
    try:
        written = plotting.plot_trajectories(positional, args.out or "plots")
    except plotting.TrajectoryFormatError as exc:
        raise ConfigError(str(exc)) from None
    for w in written:
        _say(str(w))
    return EXIT_OK


# ---- entry point -----------------------------------------------------------------------------

COMMANDS = ("train", "curriculum", "evaluate", "benchmark", "rollout", "plot")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="utrack", description="Multi-agent underwater target tracking.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("args", nargs="*", help="positional arguments and key=value overrides")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory (or .svg file for plot)")
    p.add_argument("--checkpoint", help="checkpoint path (evaluate, rollout)")
    p.add_argument("--resume", help="train: resume from a checkpoint written by train")
    p.add_argument("--init", help="train: start from a checkpoint's parameters")
    p.add_argument("--episodes", type=int, help="evaluate/rollout: number of episodes")
    p.add_argument("--sweep", help="evaluate: env sweep, e.g. target_speed_frac=0.3,0.5,0.7")
    p.add_argument("--trajectories", type=int, help="evaluate: write CSVs for the first K episodes")
    p.add_argument("--envs", help="benchmark: comma-separated env counts")
    p.add_argument("--configs", help="benchmark: comma-separated AxT configs")
    p.add_argument("--steps", type=int, help="benchmark: timed steps per row")
    p.add_argument("--resume-stages", action="store_true", help="curriculum: reuse finished stage checkpoints")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_intermixed_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    positional = [a for a in args.args if "=" not in a]
    overrides = [a for a in args.args if "=" in a]
    try:
        if args.command == "plot":
            return cmd_plot(args, positional)
        cfg = load_config(args.config, overrides, args.seed)
        if args.command == "train":
            if positional:
                raise ConfigError(f"unexpected arguments: {positional}")
            return cmd_train(args, cfg)
        if args.command == "curriculum":
            return cmd_curriculum(args, cfg, positional)
        if args.command == "evaluate":
            return cmd_evaluate(args, cfg, positional)
        if args.command == "rollout":
            return cmd_rollout(args, cfg, positional)
        return cmd_benchmark(args, cfg)
    except ConfigError as exc:
        print(f"utrack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, nets.CheckpointError) as exc:
        print(f"utrack: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        print("utrack: interrupted", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostics
        logging.getLogger("utrack").debug("internal error", exc_info=True)
        print(f"utrack: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
