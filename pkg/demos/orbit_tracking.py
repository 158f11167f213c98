"""Scripted orbit policy: each agent circles its current target estimate.

Prints summary metrics and writes one trajectory CSV plus SVG plot.

    python demos/orbit_tracking.py --agents 2 --targets 2 --out runs/orbit
"""
import argparse
from pathlib import Path

import numpy as np

from utrack import plotting
from utrack.env import EnvConfig, TrajectoryRecorder, wrap_angle
from utrack.marl import episode_metrics


def orbit_policy(radius):
    def policy(out, w, t):
        # agent i orbits target i mod n_targets
        T = w.est_x.shape[2]
        tgt = np.arange(w.ax.shape[1]) % T
        ex = w.est_x[:, np.arange(w.ax.shape[1]), tgt]
        ey = w.est_y[:, np.arange(w.ax.shape[1]), tgt]
        dx, dy = ex - w.ax, ey - w.ay
        d = np.hypot(dx, dy)
        want = np.arctan2(dy, dx) - np.pi / 2 + np.clip((d - radius) / radius, -1, 1) * np.pi / 4
        goal = np.clip(np.round(2 + wrap_angle(want - w.ah) / 0.2), 0, 4)
        return np.clip(goal, w.arud - 1, w.arud + 1).astype(int)
    return policy


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--agents", type=int, default=1)
    ap.add_argument("--targets", type=int, default=1)
    ap.add_argument("--speed", type=float, default=0.3, help="target speed as a fraction of agent speed")
    ap.add_argument("--radius", type=float, default=60.0)
    ap.add_argument("--episodes", type=int, default=20)
    ap.add_argument("--out", default="runs/orbit")
    args = ap.parse_args()

    cfg = EnvConfig(n_agents=args.agents, n_targets=args.targets, target_speed_frac=args.speed)
    rec = TrajectoryRecorder(0)
    m = episode_metrics(orbit_policy(args.radius), cfg, args.episodes, recorder=rec.record)
    for k, v in m.items():
        print(f"{k:16s} {v:8.2f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rec.write(out / "episode0.csv")
    print(plotting.plot_trajectories([out / "episode0.csv"], out / "episode0.svg")[0])


if __name__ == "__main__":
    main()
