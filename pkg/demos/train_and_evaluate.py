"""Train one agent to track one slow target, then evaluate greedily.

The defaults are a short run (a few minutes on one core); pass
``--steps 2000000`` for the full desk-scale budget.

    python demos/train_and_evaluate.py --steps 200000 --out runs/demo
"""
import argparse

from utrack import curriculum, marl
from utrack.env import EnvConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--episodes", type=int, default=50)
    ap.add_argument("--out", default="runs/demo")
    args = ap.parse_args()

    env_cfg = EnvConfig(n_agents=1, n_targets=1, target_speed_frac=0.3, horizon=128)
    cfg = marl.TrainConfig(total_timesteps=args.steps, seed=args.seed)

    def progress(row):
        ret = row["mean_return"]
        print(f"update {row['update']:4d}  return {ret if ret is None else round(ret, 1)}  "
              f"track_err {row['mean_track_err']:6.1f} m  entropy {row['entropy']:.3f}", flush=True)

    res = marl.train(env_cfg, cfg, out_dir=args.out, on_update=progress)
    m = curriculum.evaluate(res.checkpoint, env_cfg, args.episodes)
    print("greedy evaluation:", {k: round(v, 2) for k, v in m.items()})
    print("checkpoint:", res.checkpoint)


if __name__ == "__main__":
    main()
