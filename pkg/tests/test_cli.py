import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from utrack import cli, curriculum, marl
from utrack.env import EnvConfig, TRAJ_COLUMNS, TrajectoryRecorder
from utrack.vecenv import VecEnv, random_actions

TINY = ["env.n_particles=64", "env.horizon=16", "train.n_envs=8", "train.rollout_len=16", "train.d_model=16",
        "train.n_heads=2", "train.n_blocks=1", "train.epochs=1", "train.minibatches=2"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = cli.main(["train", "--seed", "7", "--out", str(out), "train.total_timesteps=10000", *TINY])
    assert code == 0
    return out


# ---- config plumbing ------------------------------------------------------------------------

def test_missing_config_file(capsys, tmp_path):
    path = tmp_path / "nope.json"
    code, _, err = run(capsys, "train", "--config", path)
    assert code == 2 and str(path) in err


def test_config_errors_name_the_field(capsys, tmp_path):
    code, _, err = run(capsys, "train", "env.n_agents=0")
    assert code == 2 and "n_agents" in err
    code, _, err = run(capsys, "train", "bogus.x=1")
    assert code == 2 and "bogus" in err
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema_version": 1, "env": {"n_agentz": 2}}))
    code, _, err = run(capsys, "train", "--config", p)
    assert code == 2 and "n_agentz" in err
    p.write_text(json.dumps({"schema_version": 0}))
    code, _, err = run(capsys, "train", "--config", p)
    assert code == 2 and "schema_version" in err
    p.write_text("{not json")
    assert run(capsys, "train", "--config", p)[0] == 2


def test_usage_error_exit(capsys):
    assert run(capsys, "fly")[0] == 2


def test_config_merge_order(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema_version": 1, "seed": 1, "env": {"n_agents": 3, "n_targets": 2}}))
    cfg = cli.load_config(str(p), ["env.n_targets=3", "evaluate.n_episodes=5"], seed=9)
    assert cfg["seed"] == 9 and cfg["env"] == {"n_agents": 3, "n_targets": 3}
    assert cfg["evaluate"]["n_episodes"] == 5


def test_train_smoke_and_snapshot(trained):
    snap = json.loads((trained / "config.json").read_text())
    assert snap["seed"] == 7 and snap["train"]["seed"] == 7 and snap["command"] == "train"
    assert snap["train"]["total_timesteps"] == 10000
    rows = [json.loads(x) for x in (trained / "metrics.jsonl").read_text().splitlines()]
    assert rows[-1]["timesteps"] >= 10000
    assert (trained / "checkpoints" / "final.json").exists()


def test_snapshot_enough_to_rerun(trained, tmp_path, capsys):
    snap = json.loads((trained / "config.json").read_text())
    cfg = {k: snap[k] for k in cli.DEFAULT_CONFIG}
    p = tmp_path / "again.json"
    p.write_text(json.dumps(cfg))
    assert run(capsys, "train", "--config", p, "--out", tmp_path / "r")[0] == 0
    assert (marl.checkpoint_hash(tmp_path / "r" / "checkpoints" / "final.json")
            == marl.checkpoint_hash(trained / "checkpoints" / "final.json"))


# ---- curriculum -----------------------------------------------------------------------------

def test_curriculum_plan_resolution(tmp_path):
    cfg = cli.load_config(None)
    assert cli._resolve_plan(cfg, ["desk"]) == curriculum.default_plan("desk")
    assert cli._resolve_plan(cfg, []) == curriculum.default_plan("desk")
    plan = curriculum.default_plan("desk-2stage")
    plan.save(tmp_path / "p.json")
    assert cli._resolve_plan(cfg, [str(tmp_path / "p.json")]) == plan


def test_curriculum_unknown_plan(capsys, tmp_path):
    code, _, err = run(capsys, "curriculum", "desk-huge", "--out", tmp_path)
    assert code == 2 and "desk-huge" in err
    code, _, err = run(capsys, "curriculum", tmp_path / "missing.json", "--out", tmp_path)
    assert code == 2 and "missing.json" in err


def tiny_plan_file(tmp_path):
    plan = curriculum.StagePlan("tiny", [
        curriculum.Stage("one", None, {"n_agents": 1, "n_targets": 1}, {"total_timesteps": 32}),
        curriculum.Stage("two", "one", {"n_agents": 2, "n_targets": 2, "reward_mode": "follow"},
                         {"total_timesteps": 32}, reset_critic=True),
    ], {"horizon": 8, "n_particles": 64}, {"n_envs": 4, "rollout_len": 8, "d_model": 16, "n_heads": 2,
                                            "n_blocks": 1, "epochs": 1, "minibatches": 2})
    path = tmp_path / "tiny.json"
    plan.save(path)
    return path


def test_curriculum_runs_plan_file(capsys, tmp_path):
    code, out, _ = run(capsys, "curriculum", tiny_plan_file(tmp_path), "--out", tmp_path / "run")
    assert code == 0
    assert "[1/2] one: start" in out and "[2/2] two: start" in out
    assert (tmp_path / "run" / "two" / "checkpoints" / "final.json").exists()


def test_interrupted_curriculum_keeps_finished_stages(capsys, tmp_path, monkeypatch):
    real = curriculum.run_stage

    def flaky(plan, name, *a, **kw):
        if name == "two":
            raise KeyboardInterrupt
        return real(plan, name, *a, **kw)

    monkeypatch.setattr(curriculum, "run_stage", flaky)
    code, _, err = run(capsys, "curriculum", tiny_plan_file(tmp_path), "--out", tmp_path / "run")
    assert code == 1 and "interrupted" in err
    first = tmp_path / "run" / "one" / "checkpoints" / "final.json"
    assert first.exists()
    monkeypatch.setattr(curriculum, "run_stage", real)
    h = marl.checkpoint_hash(first)
    code, out, _ = run(capsys, "curriculum", tiny_plan_file(tmp_path), "--out", tmp_path / "run", "--resume-stages")
    assert code == 0 and "one: reused existing checkpoint" in out
    assert marl.checkpoint_hash(first) == h


# ---- evaluate / rollout ---------------------------------------------------------------------

def records(out):
    return [json.loads(x) for x in out.splitlines() if x.startswith("{")]


def test_evaluate_metrics_and_sweep(capsys, trained, tmp_path):
    ck = trained / "checkpoints" / "final.json"
    code, out, _ = run(capsys, "evaluate", ck, "--episodes", 3, "--sweep", "target_speed_frac=0.3,0.5,0.7",
                       "--out", tmp_path, "--trajectories", 2)
    assert code == 0
    recs = records(out)
    assert [r["kind"] for r in recs] == ["summary", "sweep", "sweep", "sweep"]
    assert [r["value"] for r in recs[1:]] == [0.3, 0.5, 0.7]
    for r in recs:
        assert set(r) - {"kind", "sweep", "value", "n_episodes"} == set(marl.EVAL_KEYS)
        assert r["n_episodes"] == 3
    assert sorted(p.name for p in tmp_path.glob("traj_*.csv")) == ["traj_000.csv", "traj_001.csv"]
    assert len((tmp_path / "eval.jsonl").read_text().splitlines()) == 4


def test_evaluate_reproducible(capsys, trained):
    ck = trained / "checkpoints" / "final.json"
    a = records(run(capsys, "evaluate", ck, "--episodes", 2)[1])
    b = records(run(capsys, "evaluate", ck, "--episodes", 2)[1])
    assert a == b


def test_evaluate_dims_mismatch(capsys, trained):
    ck = trained / "checkpoints" / "final.json"
    code, _, err = run(capsys, "evaluate", ck, "train.d_model=32", "train.n_heads=2")
    assert code == 3 and "dims" in err


def test_evaluate_missing_checkpoint(capsys, tmp_path):
    assert run(capsys, "evaluate", tmp_path / "none.json")[0] == 3
    assert run(capsys, "evaluate")[0] == 2


def test_evaluate_bad_sweep(capsys, trained):
    ck = trained / "checkpoints" / "final.json"
    assert run(capsys, "evaluate", ck, "--episodes", 1, "--sweep", "wind=1,2")[0] == 2


def test_rollout_writes_csvs(capsys, trained, tmp_path):
    ck = trained / "checkpoints" / "final.json"
    code, out, _ = run(capsys, "rollout", ck, "--episodes", 2, "--out", tmp_path)
    assert code == 0
    assert len(list(tmp_path.glob("traj_*.csv"))) == 2
    code, _, _ = run(capsys, "plot", tmp_path / "traj_000.csv", tmp_path / "traj_001.csv", "--out", tmp_path / "svg")
    assert code == 0 and len(list((tmp_path / "svg").glob("*.svg"))) == 2


# ---- benchmark ------------------------------------------------------------------------------

def test_benchmark_rows(capsys, tmp_path):
    code, out, _ = run(capsys, "benchmark", "--configs", "2x2,1x1", "--envs", "4,1,2", "--steps", 2,
                       "env.n_particles=64", "--out", tmp_path)
    assert code == 0
    rows = records(out)
    assert [(r["config"], r["n_envs"]) for r in rows] == [("1A,1T", 1), ("1A,1T", 2), ("1A,1T", 4),
                                                          ("2A,2T", 1), ("2A,2T", 2), ("2A,2T", 4)]
    assert all(r["sps"] > 0 for r in rows)
    assert len((tmp_path / "benchmark.jsonl").read_text().splitlines()) == 6


def test_benchmark_bad_config(capsys):
    assert run(capsys, "benchmark", "--configs", "two-by-two")[0] == 2


# ---- plot -----------------------------------------------------------------------------------

def write_traj(path, n_agents=2, n_targets=2, steps=6):
    cfg = EnvConfig(n_agents=n_agents, n_targets=n_targets, n_particles=64)
    rec = TrajectoryRecorder(0)
    gen = np.random.default_rng(0)
    with VecEnv(cfg, 1) as venv:
        rec.record(venv.world)
        out = venv.state.last
        for _ in range(steps):
            out = venv.step(random_actions(out.action_mask, gen))
            rec.record(venv.world, out)
    rec.write(path)


def test_plot_empty_trajectory(capsys, tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text(",".join(TRAJ_COLUMNS) + "\n")
    assert run(capsys, "plot", p, "--out", tmp_path / "e.svg")[0] == 0
    root = ET.fromstring((tmp_path / "e.svg").read_text())
    assert root.tag.endswith("svg")
    assert any(g.get("class") == "axes" for g in root.iter("{http://www.w3.org/2000/svg}g"))
    assert not [g for g in root.iter("{http://www.w3.org/2000/svg}g") if g.get("class") == "legend-entity"]


def test_plot_legend_matches_entities(capsys, tmp_path):
    p = tmp_path / "t.csv"
    write_traj(p, 3, 2)
    assert run(capsys, "plot", p, "--out", tmp_path / "t.svg")[0] == 0
    root = ET.fromstring((tmp_path / "t.svg").read_text())
    legend = [g for g in root.iter("{http://www.w3.org/2000/svg}g") if g.get("class") == "legend-entity"]
    assert len(legend) == 5


def test_plot_deterministic(capsys, tmp_path):
    p = tmp_path / "t.csv"
    write_traj(p)
    run(capsys, "plot", p, "--out", tmp_path / "a.svg")
    run(capsys, "plot", p, "--out", tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_plot_malformed_line(capsys, tmp_path):
    p = tmp_path / "bad.csv"
    write_traj(p)
    lines = p.read_text().splitlines()
    lines[2] = lines[2].replace(lines[2].split(",")[3], "abc", 1)
    p.write_text("\n".join(lines) + "\n")
    code, _, err = run(capsys, "plot", p, "--out", tmp_path / "bad.svg")
    assert code == 2 and f"{p}:3" in err
    assert not (tmp_path / "bad.svg").exists()
    assert run(capsys, "plot", tmp_path / "absent.csv")[0] == 2
