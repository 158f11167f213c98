import json
import os

import numpy as np
import pytest

from utrack import env as E
from utrack import vecenv as V
from utrack.env import EnvConfig
from helpers import sequential_reference


def test_single_env_matches_spawn(small_cfg):
    bs = V.vreset(small_cfg, 1, 42)
    assert bs.world.equals(E.spawn(small_cfg, V.env_seed(42, 0)))


def test_vreset_deterministic_and_distinct(small_cfg):
    a = V.vreset(small_cfg, 4, 9)
    b = V.vreset(small_cfg, 4, 9)
    assert a.world.equals(b.world)
    xs = a.world.tx[:, 0]
    assert len(set(xs.tolist())) == 4


def test_vreset_bad_count(small_cfg):
    with pytest.raises(ValueError):
        V.vreset(small_cfg, 0, 0)


def test_vreset_reports_spawn_error():
    cfg = EnvConfig(n_agents=5, n_targets=5, spawn_min_sep=150, spawn_max_sep=160)
    with pytest.raises(E.SpawnError, match="envs"):
        V.vreset(cfg, 3, 0)


def test_batched_equals_sequential(small_cfg):
    cfg = small_cfg.replace(n_agents=1, n_targets=1, horizon=12)
    n, steps = 4, 30
    ref_worlds, ref_rewards = sequential_reference(cfg, 5, n, steps, 77)
    gen = np.random.default_rng(77)
    with V.VecEnv(cfg, n, seed=5) as venv:
        mask = venv.state.last.action_mask
        rewards = []
        for _ in range(steps):
            out = venv.step(V.random_actions(mask, gen))
            mask = out.action_mask
            rewards.append(out.reward)
        world = venv.world
    np.testing.assert_array_equal(np.array(rewards), ref_rewards)
    for i in range(n):
        assert world.select(slice(i, i + 1)).equals(ref_worlds[i])


def test_thread_count_invariance(small_cfg):
    results = []
    for workers in (1, 3, 8):
        gen = np.random.default_rng(0)
        with V.VecEnv(small_cfg, 8, seed=1, n_workers=workers) as venv:
            mask = venv.state.last.action_mask
            obs = []
            for _ in range(40):
                out = venv.step(V.random_actions(mask, gen))
                mask = out.action_mask
                obs.append(out.obs.copy())
            results.append((venv.world.copy(), np.stack(obs)))
    for w, o in results[1:]:
        assert w.equals(results[0][0])
        assert np.array_equal(o, results[0][1])


def test_auto_reset(small_cfg):
    cfg = small_cfg.replace(horizon=3)
    bs = V.vreset(cfg, 2, 0)
    for k in range(3):
        bs, out = V.vstep(bs, bs.world.arud.copy(), cfg)
    assert out.done.all()
    assert np.all(bs.world.step == 0) and np.all(bs.world.episode == 1)
    fresh = E.spawn(cfg, V.env_seed(0, 1), 1)
    assert bs.world.select(slice(1, 2)).equals(fresh)
    assert "final_obs" in out.info
    assert not np.array_equal(out.info["final_obs"], out.obs)


def test_vstep_is_functional(small_cfg):
    bs = V.vreset(small_cfg, 2, 0)
    snap = bs.world.copy()
    V.vstep(bs, bs.world.arud.copy(), small_cfg)
    assert bs.world.equals(snap)


def test_violation_names_env(small_cfg):
    with V.VecEnv(small_cfg, 4, n_workers=2) as venv:
        a = venv.world.arud.copy()
        a[3, 1] = (a[3, 1] + 3) % 5
        with pytest.raises(E.ContractViolation, match="env 3, agent 1"):
            venv.step(a)


def test_benchmark_accounting():
    rec = V.benchmark_sps(EnvConfig(n_particles=256), 4, 50, warmup=2)
    assert rec["sps"] > 0
    total = sum(rec["phases_s"].values())
    assert abs(total - rec["wall_s"]) <= 0.05 * rec["wall_s"]
    assert {"targets", "agents", "measure", "filter", "comms", "observe", "policy"} <= set(rec["phases_s"])


def test_benchmark_bad_policy():
    with pytest.raises(ValueError):
        V.benchmark_sps(EnvConfig(), 1, 1, policy="greedy")


def test_format_report_sorted():
    recs = [{"config": "2A,2T", "n_envs": 1, "sps": 1.0}, {"config": "1A,1T", "n_envs": 128, "sps": 2.0},
            {"config": "1A,1T", "n_envs": 1, "sps": 3.0}]
    lines = [json.loads(x) for x in V.format_report(recs).splitlines()]
    assert [(r["config"], r["n_envs"]) for r in lines] == [("1A,1T", 1), ("1A,1T", 128), ("2A,2T", 1)]


def test_batching_amortises_cost():
    cfg = EnvConfig(n_particles=256)
    s1 = V.benchmark_sps(cfg, 1, 30)["sps"]
    s16 = V.benchmark_sps(cfg, 16, 30)["sps"]
    assert s16 / s1 >= 0.5 * min(16, os.cpu_count() or 1)


def _rss_bytes():
    with open("/proc/self/statm") as fh:
        return int(fh.read().split()[1]) * os.sysconf("SC_PAGE_SIZE")


@pytest.mark.skipif(not os.path.exists("/proc/self/statm"), reason="needs /proc")
def test_memory_stable():
    cfg = EnvConfig(n_particles=256, horizon=50)
    gen = np.random.default_rng(0)
    with V.VecEnv(cfg, 4) as venv:
        mask = venv.state.last.action_mask
        for _ in range(500):
            mask = venv.step(V.random_actions(mask, gen)).action_mask
        before = _rss_bytes()
        for _ in range(10_000):
            mask = venv.step(V.random_actions(mask, gen)).action_mask
        after = _rss_bytes()
    assert abs(after - before) <= 0.01 * before
