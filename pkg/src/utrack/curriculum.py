"""Staged training: single-agent pretraining, horizon fine-tuning, then
multi-agent branches that fork from the same base checkpoint.

A plan is an ordered list of stages.  Each stage names its parent (or none
for a fresh start), the environment and training overrides it applies on
top of the plan's base configs, and whether the critic is re-initialised
when the parent's parameters are loaded.  Stages are run in order, one
output directory per stage.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

from . import nets
from .env import EnvConfig
from .marl import (EVAL_KEYS, AdamState, Learner, TrainConfig, evaluate_policy, init_learner, load_learner,
                   train)

log = logging.getLogger(__name__)

PLAN_VERSION = 1


@dataclass
class Stage:
    name: str
    parent: Optional[str] = None
    env: Dict = field(default_factory=dict)
    train: Dict = field(default_factory=dict)
    reset_critic: bool = False


@dataclass
class StagePlan:
    name: str
    stages: List[Stage]
    base_env: Dict = field(default_factory=dict)
    base_train: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.stages:
            raise ValueError("a plan needs at least one stage")
        if self.stages[0].parent is not None:
            raise ValueError(f"first stage {self.stages[0].name!r} must start fresh")
        seen = set()
        for s in self.stages:
            if s.name in seen:
                raise ValueError(f"duplicate stage name {s.name!r}")
            if s.parent is not None and s.parent not in seen:
                raise ValueError(f"stage {s.name!r}: parent {s.parent!r} is not an earlier stage")
            seen.add(s.name)
        # fail early on bad overrides
        for s in self.stages:
            self.env_config(s)
            self.train_config(s)

    def stage(self, name: str) -> Stage:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def env_config(self, s: Stage) -> EnvConfig:
        return EnvConfig.from_dict({**self.base_env, **s.env})

    def train_config(self, s: Stage, seed: Optional[int] = None) -> TrainConfig:
        d = {**self.base_train, **s.train}
        if seed is not None:
            d["seed"] = seed
        return TrainConfig.from_dict(d)

    def children(self, name: str) -> List[Stage]:
        return [s for s in self.stages if s.parent == name]

    def to_dict(self) -> dict:
        return {"version": PLAN_VERSION, "name": self.name, "base_env": self.base_env,
                "base_train": self.base_train, "stages": [dataclasses.asdict(s) for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        if d.get("version", PLAN_VERSION) != PLAN_VERSION:
            raise ValueError(f"unsupported plan version {d.get('version')}")
        unknown = set(d) - {"version", "name", "base_env", "base_train", "stages"}
        if unknown:
            raise ValueError(f"unknown plan keys: {sorted(unknown)}")
        stages = []
        for s in d["stages"]:
            bad = set(s) - {f.name for f in dataclasses.fields(Stage)}
            if bad:
                raise ValueError(f"unknown stage keys: {sorted(bad)}")
            stages.append(Stage(**s))
        return cls(d.get("name", "custom"), stages, dict(d.get("base_env", {})), dict(d.get("base_train", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "StagePlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---- built-in plans -------------------------------------------------------------------------

def _full_plan(name: str, pretrain: int, horizon_steps: int, branch_steps: int, n_envs: int) -> StagePlan:
    stages = [Stage("pretrain", None, {"n_agents": 1, "n_targets": 1, "horizon": 128, "target_speed_frac": 0.6,
                                       "reward_mode": "tracking"}, {"total_timesteps": pretrain})]
    prev = "pretrain"
    for h in (256, 512, 1024):
        nm = f"horizon{h}"
        stages.append(Stage(nm, prev, {"n_agents": 1, "n_targets": 1, "horizon": h, "target_speed_frac": 0.6,
                                       "reward_mode": "tracking"}, {"total_timesteps": horizon_steps}))
        prev = nm
    base = prev
    # branch A: n agents follow n moderately fast targets
    prev = base
    for n in range(2, 6):
        nm = f"follow{n}v{n}"
        stages.append(Stage(nm, prev, {"n_agents": n, "n_targets": n, "horizon": 256,
                                       "target_speed_frac": [0.3, 0.5], "reward_mode": "follow"},
                            {"total_timesteps": branch_steps}, reset_critic=prev == base))
        prev = nm
    # branch B: n agents track one very fast target
    prev = base
    for n in range(2, 4):
        nm = f"track{n}v1"
        stages.append(Stage(nm, prev, {"n_agents": n, "n_targets": 1, "horizon": 256, "target_speed_frac": 0.8,
                                       "reward_mode": "tracking"},
                            {"total_timesteps": branch_steps}, reset_critic=prev == base))
        prev = nm
    return StagePlan(name, stages, {}, {"n_envs": n_envs})


def default_plan(scale: str = "desk") -> StagePlan:
    """Built-in plans.

    ``paper``: full-size budgets (pretrain 1e10 steps, 1e8 shared by the three
    horizon stages, 2e9 shared by each branch's stages).
    ``desk``: the same stage graph with 1e7 pretraining and 1e6 per later stage.
    ``desk-2stage``: 1 agent tracking 1 slow target, then 2 agents following
    2 targets with a fresh critic; small enough to run several seeds on a CPU.
    """
    if scale == "paper":
        p = _full_plan("paper", 10 ** 10, 10 ** 8 // 3, 2 * 10 ** 9 // 4, 4096)
        for s in p.stages:
            if s.name.startswith("track"):
                s.train["total_timesteps"] = 2 * 10 ** 9 // 2
        return p
    if scale == "desk":
        return _full_plan("desk", 10 ** 7, 10 ** 6, 10 ** 6, 64)
    if scale == "desk-2stage":
        return StagePlan("desk-2stage", [
            Stage("track1v1", None, {"n_agents": 1, "n_targets": 1, "horizon": 128, "target_speed_frac": 0.3,
                                     "reward_mode": "tracking"}, {"total_timesteps": 256 * 1024}),
            Stage("follow2v2", "track1v1", {"n_agents": 2, "n_targets": 2, "horizon": 128,
                                            "target_speed_frac": [0.3, 0.5], "reward_mode": "follow"},
                  {"total_timesteps": 384 * 1024}, reset_critic=True),
        ], {}, {"n_envs": 32})
    raise KeyError(f"unknown plan {scale!r}; built-in plans: paper, desk, desk-2stage")


PLAN_NAMES = ("paper", "desk", "desk-2stage")


# ---- running -----------------------------------------------------------------------------------

def stage_seed(seed: int, index: int) -> int:
    return int(seed) * 1000 + index


@dataclass
class StageResult:
    name: str
    checkpoint: Path
    metrics: List[dict]


def stage_learner(plan: StagePlan, s: Stage, seed: int, init_checkpoint=None) -> Learner:
    """Parameters a stage starts from: fresh, or the parent's final actor
    (and critic unless ``reset_critic``).  Optimiser moments always restart."""
    cfg = plan.train_config(s, seed)
    fresh = init_learner(cfg)
    if init_checkpoint is None:
        return fresh
    expect = {"actor": {"d": cfg.d_model, "heads": cfg.n_heads, "blocks": cfg.n_blocks}}
    loaded, _ = load_learner(init_checkpoint, expect)
    critic = fresh.critic if s.reset_critic else loaded.critic
    return Learner(loaded.actor, critic, AdamState.zeros(loaded.actor), AdamState.zeros(critic))


def run_stage(plan: StagePlan, name: str, out_dir, seed: int = 0, init_checkpoint=None,
              on_update: Optional[Callable[[dict], None]] = None) -> StageResult:
    idx = [s.name for s in plan.stages].index(name)
    s = plan.stages[idx]
    sd = stage_seed(seed, idx)
    env_cfg = plan.env_config(s)
    cfg = plan.train_config(s, sd)
    learner = stage_learner(plan, s, sd, init_checkpoint)
    res = train(env_cfg, cfg, learner, out_dir=Path(out_dir) / s.name, tag=s.name, on_update=on_update)
    return StageResult(s.name, res.checkpoint, res.metrics)


class CurriculumError(RuntimeError):
    def __init__(self, msg, completed: Dict[str, Path]):
        super().__init__(msg)
        self.completed = completed


def run_curriculum(plan: StagePlan, out_dir, seed: int = 0, on_stage: Optional[Callable[[str, str], None]] = None,
                   on_update: Optional[Callable[[dict], None]] = None, skip_existing: bool = False
                   ) -> Dict[str, Path]:
    """Run every stage in order; returns stage name -> final checkpoint.

    A failing stage stops its descendants only; other branches still run and
    finished checkpoints are kept.  All stage metrics are also appended to
    ``<out_dir>/metrics.jsonl``.  With ``skip_existing``, stages whose final
    checkpoint already exists are reused.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "plan.json")
    consolidated = out / "metrics.jsonl"
    if not skip_existing:
        consolidated.write_text("")
    done: Dict[str, Path] = {}
    failed: Dict[str, str] = {}
    note = on_stage or (lambda name, msg: None)
    for s in plan.stages:
        if s.parent is not None and s.parent not in done:
            failed[s.name] = f"parent {s.parent} unavailable"
            note(s.name, "skipped: " + failed[s.name])
            continue
        final = out / s.name / "checkpoints" / "final.json"
        if skip_existing and final.exists():
            done[s.name] = final
            note(s.name, "reused existing checkpoint")
            continue
        note(s.name, "start")
        try:
            r = run_stage(plan, s.name, out, seed, done.get(s.parent), on_update=on_update)
        except (KeyboardInterrupt, SystemExit):
            raise
        except Exception as exc:
            failed[s.name] = f"{type(exc).__name__}: {exc}"
            note(s.name, "failed: " + failed[s.name])
            log.exception("stage %s failed", s.name)
            continue
        done[s.name] = r.checkpoint
        with open(consolidated, "a") as fh:
            for row in r.metrics:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        note(s.name, f"done -> {r.checkpoint}")
    if failed:
        raise CurriculumError("stages failed: " + "; ".join(f"{k} ({v})" for k, v in failed.items()), done)
    return done


# ---- evaluation ------------------------------------------------------------------------------

def evaluate(checkpoint, env_cfg: EnvConfig, n_episodes: int, seed: int = 12345,
             recorder: Optional[Callable] = None) -> Dict[str, float]:
    """Greedy evaluation of a checkpoint's actor; keys are ``marl.EVAL_KEYS``."""
    loaded, _, _ = nets.load_checkpoint(checkpoint)
    if "actor" not in loaded:
        raise nets.CheckpointError(f"{checkpoint} has no actor parameters")
    actor = loaded["actor"]
    if actor.z != 13:
        raise nets.CheckpointError(f"actor expects {actor.z} token features, environment emits 13")
    return evaluate_policy(actor, env_cfg, n_episodes, seed=seed, recorder=recorder)


def evaluate_sweep(checkpoint, env_cfg: EnvConfig, key: str, values, n_episodes: int,
                   seed: int = 12345) -> List[dict]:
    """One metrics record per value of env field ``key``."""
    out = []
    for v in values:
        cfg = EnvConfig.from_dict({**env_cfg.to_dict(), key: v})
        rec = {"sweep": key, "value": v}
        rec.update(evaluate(checkpoint, cfg, n_episodes, seed))
        out.append(rec)
    return out


__all__ = ["Stage", "StagePlan", "default_plan", "run_stage", "run_curriculum", "evaluate", "evaluate_sweep",
           "EVAL_KEYS", "PLAN_NAMES", "CurriculumError", "stage_seed", "stage_learner"]
