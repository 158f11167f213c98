import json

import numpy as np
import pytest

from utrack import curriculum as C
from utrack import marl, nets
from utrack.curriculum import Stage, StagePlan
from utrack.env import EnvConfig, wrap_angle

TINY_TRAIN = {"n_envs": 4, "rollout_len": 8, "d_model": 16, "n_heads": 2, "n_blocks": 1, "epochs": 1,
              "minibatches": 2, "checkpoint_every": 0}
TINY_ENV = {"horizon": 8, "n_particles": 64}


def tiny_plan(fail_branch_a=False):
    a_env = {"n_agents": 2, "n_targets": 2, "reward_mode": "follow", "target_speed_frac": [0.3, 0.5]}
    if fail_branch_a:
        # passes validation, but no spawn layout exists: fails when the stage starts
        a_env.update(n_agents=5, n_targets=5, spawn_min_sep=150, spawn_max_sep=160)
    return StagePlan("tiny", [
        Stage("base", None, {"n_agents": 1, "n_targets": 1}, {"total_timesteps": 64}),
        Stage("A1", "base", a_env, {"total_timesteps": 32}, reset_critic=True),
        Stage("A2", "A1", {"n_agents": 3, "n_targets": 3, "reward_mode": "follow"}, {"total_timesteps": 32}),
        Stage("B1", "base", {"n_agents": 2, "n_targets": 1}, {"total_timesteps": 32}, reset_critic=True),
    ], dict(TINY_ENV), dict(TINY_TRAIN))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cur")
    seen = []
    done = C.run_curriculum(tiny_plan(), out, seed=3, on_stage=lambda n, m: seen.append((n, m)))
    return out, done, seen


def same_params(a, b):
    return a.tensors.keys() == b.tensors.keys() and all(np.array_equal(a[k], b[k]) for k in a.tensors)


# ---- plans ----------------------------------------------------------------------------------

def test_full_scale_plan_shape():
    p = C.default_plan("paper")
    first = p.env_config(p.stages[0])
    assert p.stages[0].parent is None and first.horizon == 128 and first.target_speed_frac == 0.6
    assert [p.env_config(p.stage(f"horizon{h}")).horizon for h in (256, 512, 1024)] == [256, 512, 1024]
    b = [s for s in p.stages if s.name.startswith("track")]
    assert [p.env_config(s).n_agents for s in b] == [2, 3]
    assert all(p.env_config(s).target_speed_frac == 0.8 and p.env_config(s).n_targets == 1 for s in b)
    a = [s for s in p.stages if s.name.startswith("follow")]
    last = p.env_config(a[-1])
    assert last.n_agents == last.n_targets == 5
    # both branches fork from the horizon-invariant base with a fresh critic
    assert a[0].parent == b[0].parent == "horizon1024"
    assert a[0].reset_critic and b[0].reset_critic
    assert not any(s.reset_critic for s in a[1:] + b[1:])


def test_desk_plan_keeps_structure():
    p, d = C.default_plan("paper"), C.default_plan("desk")
    assert [(s.name, s.parent, s.reset_critic) for s in p.stages] == [(s.name, s.parent, s.reset_critic)
                                                                         for s in d.stages]
    assert [s.env for s in p.stages] == [s.env for s in d.stages]
    assert d.train_config(d.stages[0]).total_timesteps * 1000 == p.train_config(p.stages[0]).total_timesteps


def test_unknown_plan():
    with pytest.raises(KeyError):
        C.default_plan("huge")


@pytest.mark.parametrize("name", C.PLAN_NAMES)
def test_plan_roundtrip(name, tmp_path):
    p = C.default_plan(name)
    assert StagePlan.from_dict(json.loads(json.dumps(p.to_dict()))) == p
    p.save(tmp_path / "plan.json")
    assert StagePlan.load(tmp_path / "plan.json") == p


def test_plan_invariants():
    with pytest.raises(ValueError, match="fresh"):
        StagePlan("x", [Stage("a", "b")])
    with pytest.raises(ValueError, match="duplicate"):
        StagePlan("x", [Stage("a"), Stage("a", "a")])
    with pytest.raises(ValueError, match="parent"):
        StagePlan("x", [Stage("a"), Stage("b", "c")])
    with pytest.raises(ValueError):
        StagePlan("x", [Stage("a", env={"n_agents": 0})])
    with pytest.raises(ValueError, match="n_agent"):
        StagePlan("x", [Stage("a", env={"n_agent": 2})])
    d = tiny_plan().to_dict()
    d["stages"][0]["init"] = "fresh"
    with pytest.raises(ValueError, match="unknown stage keys"):
        StagePlan.from_dict(d)
    d = tiny_plan().to_dict()
    d["version"] = 7
    with pytest.raises(ValueError, match="version"):
        StagePlan.from_dict(d)


def test_stage_seed():
    assert C.stage_seed(0, 0) != C.stage_seed(0, 1) != C.stage_seed(1, 0)


# ---- running --------------------------------------------------------------------------------

def test_one_checkpoint_per_stage(tiny_run):
    out, done, seen = tiny_run
    plan = tiny_plan()
    assert list(done) == [s.name for s in plan.stages]
    assert sorted(p.parent.parent.name for p in out.glob("*/checkpoints/final.json")) == sorted(done)
    assert StagePlan.load(out / "plan.json") == plan
    assert [n for n, m in seen if m == "start"] == list(done)


def test_metrics_tagged(tiny_run):
    out, done, _ = tiny_run
    rows = [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["stage"] for r in rows] == ["base", "base", "A1", "A2", "B1"]


def test_stage_start_params(tiny_run):
    out, done, _ = tiny_run
    plan = tiny_plan()
    base, _ = marl.load_learner(done["base"])
    for name in ("A1", "B1"):
        s = plan.stage(name)
        idx = plan.stages.index(s)
        sd = C.stage_seed(3, idx)
        ln = C.stage_learner(plan, s, sd, done["base"])
        # both branches start from the same base actor
        assert same_params(ln.actor, base.actor)
        # the critic is re-initialised exactly as a fresh learner for this stage seed
        assert same_params(ln.critic, marl.init_learner(plan.train_config(s, sd)).critic)
        assert ln.opt_actor.t == 0 and ln.opt_critic.t == 0
    a1, _ = marl.load_learner(done["A1"])
    ln = C.stage_learner(plan, plan.stage("A2"), C.stage_seed(3, 2), done["A1"])
    assert same_params(ln.actor, a1.actor) and same_params(ln.critic, a1.critic)


def test_rerun_reproduces_checkpoints(tiny_run, tmp_path):
    _, done, _ = tiny_run
    again = C.run_curriculum(tiny_plan(), tmp_path, seed=3)
    for name in done:
        assert marl.checkpoint_hash(again[name]) == marl.checkpoint_hash(done[name])
    other = C.run_curriculum(tiny_plan(), tmp_path / "s4", seed=4)
    assert marl.checkpoint_hash(other["base"]) != marl.checkpoint_hash(done["base"])


def test_branch_isolation(tiny_run):
    out, done, _ = tiny_run
    b_files = {p: p.read_bytes() for p in (out / "B1").rglob("*") if p.is_file()}
    C.run_stage(tiny_plan(), "A1", out, seed=3, init_checkpoint=done["base"])
    assert {p: p.read_bytes() for p in (out / "B1").rglob("*") if p.is_file()} == b_files


def test_failure_halts_branch_only(tmp_path):
    notes = []
    with pytest.raises(C.CurriculumError) as exc:
        C.run_curriculum(tiny_plan(fail_branch_a=True), tmp_path, seed=0, on_stage=lambda n, m: notes.append((n, m)))
    assert sorted(exc.value.completed) == ["B1", "base"]
    assert "A1" in str(exc.value) and "A2" in str(exc.value)
    assert any(n == "A2" and m.startswith("skipped") for n, m in notes)
    for p in exc.value.completed.values():
        assert p.exists()
    assert not (tmp_path / "A2").exists()


def test_skip_existing_reuses(tiny_run):
    out, done, _ = tiny_run
    before = {k: marl.checkpoint_hash(v) for k, v in done.items()}
    notes = []
    again = C.run_curriculum(tiny_plan(), out, seed=3, skip_existing=True, on_stage=lambda n, m: notes.append(m))
    assert {k: marl.checkpoint_hash(v) for k, v in again.items()} == before
    assert all(m == "reused existing checkpoint" for m in notes)


# ---- evaluation -----------------------------------------------------------------------------

def test_evaluate_keys_and_single_episode(tiny_run):
    _, done, _ = tiny_run
    env = EnvConfig(n_agents=1, n_targets=1, horizon=8, n_particles=64)
    m = C.evaluate(done["base"], env, 3)
    assert tuple(m) == marl.EVAL_KEYS
    one = C.evaluate(done["base"], env, 1)
    assert one["distance_std"] == 0.0 and one["track_err_std"] == 0.0
    assert one["collision_pct"] in (0.0, 100.0)


def test_evaluate_is_side_effect_free(tiny_run):
    out, done, _ = tiny_run
    files = {p: (p.read_bytes(), p.stat().st_mtime_ns) for p in out.rglob("*") if p.is_file()}
    env = EnvConfig(n_agents=2, n_targets=2, horizon=8, n_particles=64)
    a = C.evaluate(done["A1"], env, 2)
    b = C.evaluate(done["A1"], env, 2)
    assert a == b
    assert {p: (p.read_bytes(), p.stat().st_mtime_ns) for p in out.rglob("*") if p.is_file()} == files


def test_evaluate_sweep(tiny_run):
    _, done, _ = tiny_run
    env = EnvConfig(n_agents=1, n_targets=1, horizon=8, n_particles=64)
    recs = C.evaluate_sweep(done["base"], env, "target_speed_frac", [0.3, 0.5, 0.7], 2)
    assert [r["value"] for r in recs] == [0.3, 0.5, 0.7]
    assert all(set(marl.EVAL_KEYS) <= set(r) for r in recs)


def test_evaluate_rejects_wrong_feature_width(tmp_path):
    man = nets.save_checkpoint(tmp_path / "ck", {"actor": nets.init_params(9, 16, 2, 1)})
    with pytest.raises(nets.CheckpointError, match="13"):
        C.evaluate(man, EnvConfig(), 1)


def orbit_policy(radius):
    """Circle the current target estimate at ``radius`` metres."""
    def policy(out, w, t):
        dx, dy = w.est_x[:, :, 0] - w.ax, w.est_y[:, :, 0] - w.ay
        d = np.hypot(dx, dy)
        want = np.arctan2(dy, dx) - np.pi / 2 + np.clip((d - radius) / radius, -1, 1) * np.pi / 4
        goal = np.clip(np.round(2 + wrap_angle(want - w.ah) / 0.2), 0, 4)
        return np.clip(goal, w.arud - 1, w.arud + 1).astype(int)
    return policy


def test_stationary_overlap_sanity():
    env = EnvConfig(n_agents=1, n_targets=1, horizon=128, target_speed_frac=0.0)
    m = marl.episode_metrics(orbit_policy(60.0), env, 20)
    assert m["track_err_mean"] < 8.0
    assert m["collision_pct"] == 0.0 and m["loss_pct"] == 0.0
