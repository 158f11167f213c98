"""Environment throughput for 1A/1T .. 5A/5T at several batch sizes.

    python demos/scaling_table.py --envs 1,16,128 --steps 10
"""
import argparse
import os

from utrack.env import EnvConfig
from utrack.vecenv import benchmark_sps


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--envs", default="1,16,128")
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--max-entities", type=int, default=5)
    ap.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    args = ap.parse_args()

    counts = [int(v) for v in args.envs.split(",")]
    print("config  " + "".join(f"{n:>10d}" for n in counts) + "   (env steps per second)")
    for k in range(1, args.max_entities + 1):
        cfg = EnvConfig(n_agents=k, n_targets=k)
        row = [benchmark_sps(cfg, n, args.steps, n_workers=args.workers)["sps"] for n in counts]
        print(f"{k}A,{k}T   " + "".join(f"{s:10.0f}" for s in row), flush=True)


if __name__ == "__main__":
    main()
