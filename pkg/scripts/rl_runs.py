"""Quadratic bandit and point-mass learning runs over three seeds.

The bandit stops once the 100-episode average reaches -0.01; the point
mass runs 20k steps and compares the reward over steps 0-5k with 15k-20k.
"""
import argparse
import time
from pathlib import Path

import numpy as np

from tagi.rl import RlConfig, make_env, train

BANDIT = dict(horizon=64, sigma_v0=0.5, decay=0.7, sigma_v_min=0.05, gamma=0.0, steps=20000,
              prior_var_gain=0.01, alpha=1, stop_avg=-0.01)
POINTMASS = dict(horizon=64, sigma_v0=0.5, decay=0.7, sigma_v_min=0.05, gamma=0.99, steps=20000,
                 prior_var_gain=0.01, alpha=1, reward_scale=0.1)


def bandit(seed: int):
    trace, agent = train(make_env("bandit", seed), RlConfig(seed=seed, **BANDIT))
    ma = np.asarray(trace.moving_avg_100)
    full = np.asarray(trace.episode) >= 99  # a full 100-episode window exists
    hit = np.flatnonzero(full & (ma >= -0.01))
    return trace, (int(hit[0]) if len(hit) else None)


def pointmass(seed: int):
    trace, _ = train(make_env("pointmass", seed), RlConfig(seed=seed, **POINTMASS))
    r = np.asarray(trace.reward)
    return trace, float(r[:5000].mean()), float(r[15000:20000].mean())


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/rl")
    ap.add_argument("--skip-pointmass", action="store_true")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in args.seeds:
        t = time.time()
        trace, hit = bandit(s)
        trace.to_csv(out / f"bandit_seed{s}.csv")
        print(f"bandit seed {s}: average >= -0.01 at step {hit}  ({time.time() - t:.0f} s)")
    if args.skip_pointmass:
        return
    for s in args.seeds:
        t = time.time()
        trace, early, late = pointmass(s)
        trace.to_csv(out / f"pointmass_seed{s}.csv")
        print(f"pointmass seed {s}: steps 0-5k {early:.4f}, 15k-20k {late:.4f}  ({time.time() - t:.0f} s)")


if __name__ == "__main__":
    main()
