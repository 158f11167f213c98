"""Batched environments with a structure-of-arrays state and auto-reset.

Environments are split into contiguous shards, each stepped by one worker
of a thread pool.  Because every random draw is keyed by (env seed, episode,
step), the result is identical for any shard layout or worker count.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import rng
from .env import (EnvConfig, PhaseTimer, StepOutput, WorldState, _no_timer, advance_world, initial_output,
                  spawn_from_keys)


def env_seeds(master_seed: int, n_envs: int) -> np.ndarray:
    """Independent per-environment stream seeds derived from one master seed."""
    return rng.derive(rng.seed_key(master_seed), np.arange(n_envs, dtype=np.uint64))


def env_seed(master_seed: int, index: int) -> int:
    """Plain-int seed so ``env.spawn(cfg, env_seed(m, i))`` matches ``vreset`` env ``i``."""
    return int(env_seeds(master_seed, index + 1)[index])


@dataclass
class BatchState:
    world: WorldState
    last: StepOutput

    @property
    def n_envs(self) -> int:
        return self.world.n_envs


def vreset(cfg: EnvConfig, n_envs: int, master_seed: int) -> BatchState:
    if n_envs < 1:
        raise ValueError("n_envs must be >= 1")
    seeds = rng.mix(env_seeds(master_seed, n_envs))
    try:
        world = spawn_from_keys(cfg, seeds, np.zeros(n_envs, dtype=np.int64))
    except Exception as exc:
        raise type(exc)(f"vreset: {exc}") from exc
    return BatchState(world, initial_output(world, cfg))


def _concat_outputs(parts: List[StepOutput]) -> StepOutput:
    if len(parts) == 1:
        return parts[0]
    cat = np.concatenate
    return StepOutput(
        cat([p.obs for p in parts]), cat([p.global_state for p in parts]), cat([p.reward for p in parts]),
        cat([p.done for p in parts]), cat([p.action_mask for p in parts]),
        {k: cat([p.info[k] for p in parts]) for k in parts[0].info},
    )


class VecEnv:
    """Many independent environments stepped together.

    ``step`` returns the post-step output; environments that finished are
    respawned (next episode of the same seed stream) before returning, so the
    returned ``obs``/``global_state``/``action_mask`` already belong to the
    new episode while ``reward``, ``done`` and ``info`` describe the finished
    step.  The final observations of finished episodes are kept in
    ``info["final_obs"]`` and ``info["final_global_state"]``.
    """

    def __init__(self, cfg: EnvConfig, n_envs: int, seed: int = 0, n_workers: int = 1,
                 auto_reset: bool = True):
        self.cfg = cfg
        self.n_workers = max(1, int(n_workers))
        self.auto_reset = auto_reset
        self.state = vreset(cfg, n_envs, seed)
        self.timer: Optional[PhaseTimer] = None
        self._pool = ThreadPoolExecutor(self.n_workers) if self.n_workers > 1 else None

    @property
    def n_envs(self) -> int:
        return self.state.n_envs

    @property
    def world(self) -> WorldState:
        return self.state.world

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _shards(self):
        n = self.n_envs
        k = min(self.n_workers, n)
        bounds = np.linspace(0, n, k + 1).astype(int)
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def step(self, actions) -> StepOutput:
        actions = np.asarray(actions)
        shards = self._shards()
        world = self.state.world

        def run(sl):
            sub = world.select(sl) if len(shards) > 1 else world
            out = advance_world(sub, actions[sl], self.cfg, timer=self.timer, env_offset=sl.start)
            return sub, out

        if self._pool is None or len(shards) == 1:
            results = [run(sl) for sl in shards]
        else:
            results = list(self._pool.map(run, shards))
        ph = self.timer or _no_timer
        with ph("gather"):
            if len(shards) > 1:
                for sl, (sub, _) in zip(shards, results):
                    world.assign(sl, sub)
            out = _concat_outputs([r[1] for r in results])
        if self.auto_reset:
            with ph("reset"):
                out = self._auto_reset(out)
        self.state = BatchState(world, out)
        return out

    def _auto_reset(self, out: StepOutput) -> StepOutput:
        done = np.flatnonzero(out.done)
        out.info["final_obs"] = out.obs.copy()
        out.info["final_global_state"] = out.global_state.copy()
        if len(done) == 0:
            return out
        world = self.state.world
        fresh = spawn_from_keys(self.cfg, world.seed[done], world.episode[done] + 1)
        world.assign(done, fresh)
        init = initial_output(fresh, self.cfg)
        out.obs[done] = init.obs
        out.global_state[done] = init.global_state
        out.action_mask[done] = init.action_mask
        return out


def vstep(bs: BatchState, actions, cfg: EnvConfig, n_workers: int = 1):
    """Functional batched step with auto-reset: returns ``(new_state, output)``."""
    venv = VecEnv.__new__(VecEnv)
    venv.cfg = cfg
    venv.n_workers = max(1, int(n_workers))
    venv.auto_reset = True
    venv.timer = None
    venv.state = BatchState(bs.world.copy(), bs.last)
    venv._pool = ThreadPoolExecutor(venv.n_workers) if venv.n_workers > 1 else None
    try:
        out = venv.step(actions)
    finally:
        venv.close()
    return venv.state, out


# ---- throughput benchmark ----------------------------------------------------------

def scripted_actions(mask: np.ndarray, world: WorldState) -> np.ndarray:
    """Cheap heuristic: hold the rudder hard over toward port (keeps agents circling)."""
    want = np.full(mask.shape[:-1], 4)
    return np.clip(want, world.arud - 1, world.arud + 1)


def random_actions(mask: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    noise = gen.random(mask.shape)
    return np.argmax(np.where(mask, noise, -1.0), axis=-1)


def benchmark_sps(cfg: EnvConfig, n_envs: int, n_steps: int, policy: str = "random", warmup: int = 5,
                  seed: int = 0, n_workers: int = 1) -> Dict:
    """Measure environment steps per second for a batch of ``n_envs``.

    SPS counts ``n_steps * n_envs`` environment transitions per wall second;
    warm-up steps are excluded.  The record also carries per-phase wall time
    (step phases plus ``policy``, ``reset`` and ``dispatch``, the batching
    overhead around the phases) and the unaccounted remainder.
    """
    if policy not in ("random", "scripted"):
        raise ValueError("policy must be 'random' or 'scripted'")
    gen = np.random.default_rng(seed)
    with VecEnv(cfg, n_envs, seed=seed, n_workers=n_workers) as venv:
        mask = venv.state.last.action_mask

        def act(mask):
            if policy == "random":
                return random_actions(mask, gen)
            return scripted_actions(mask, venv.world)

        for _ in range(warmup):
            mask = venv.step(act(mask)).action_mask
        timer = PhaseTimer()
        venv.timer = timer
        stepping = 0.0
        t0 = time.perf_counter()
        for _ in range(n_steps):
            with timer("policy"):
                a = act(mask)
            t1 = time.perf_counter()
            mask = venv.step(a).action_mask
            stepping += time.perf_counter() - t1
        wall = time.perf_counter() - t0
    inner = sum(v for k, v in timer.totals.items() if k != "policy")
    # with several workers the inner phases overlap in time, so this can go negative
    timer.totals["dispatch"] = max(stepping - inner, 0.0)
    phases = dict(sorted(timer.totals.items()))
    accounted = sum(phases.values())
    return {
        "config": f"{cfg.n_agents}A,{cfg.n_targets}T",
        "n_envs": n_envs,
        "n_steps": n_steps,
        "n_workers": n_workers,
        "sps": n_steps * n_envs / wall,
        "wall_s": wall,
        "phases_s": phases,
        "other_s": wall - accounted,
    }


def format_report(records: List[Dict]) -> str:
    """One JSON object per line, sorted by config then env count."""
    records = sorted(records, key=lambda r: (r["config"], r["n_envs"]))
    return "\n".join(json.dumps(r, sort_keys=True) for r in records) + "\n"


def default_workers() -> int:
    return os.cpu_count() or 1
