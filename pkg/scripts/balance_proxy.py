"""Ripple marking vs monolithic balance on the rotating-ball workload.

Reports per-step face visits of both strategies and the wall clock of each
balance mode over the same run.

    python3 scripts/balance_proxy.py --trees-log2 6 --fine 4 --steps 100 --ranks 8
"""
import argparse
import time

import numpy as np

from forestamr.bench import RunConfig, run_ball
from forestamr.fvsolver import load_config


def config(args):
    n = 1 << args.trees_log2
    cfg = load_config("ball", coarse=args.coarse, fine=args.fine)
    cfg.params.update(trees=(n, n), lower=(0.0, 0.0), upper=(1.0, 1.0))
    return cfg


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trees-log2", type=int, default=6)
    ap.add_argument("--coarse", type=int, default=0)
    ap.add_argument("--fine", type=int, default=4)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--ranks", type=int, default=8)
    args = ap.parse_args()

    res = run_ball(RunConfig(config(args), steps=args.steps, ranks=args.ranks, measure_monolithic=True))
    ratio = np.array([r.face_visits / r.monolithic_visits for r in res.records])
    print(f"face-visit ratio ripple/monolithic: max {ratio.max():.3f} mean {ratio.mean():.3f}")
    print(f"max sweeps {max(r.sweeps_used for r in res.records)}, "
          f"fallbacks {sum(r.fell_back for r in res.records)}")
    for mode in ("ripple", "monolithic"):
        start = time.perf_counter()
        r = run_ball(RunConfig(config(args), steps=args.steps, ranks=args.ranks, balance=mode))
        total = sum(x.adapt for x in r.records)
        print(f"{mode:10s} adapt phase {total:.2f} s, run {time.perf_counter() - start:.2f} s")


if __name__ == "__main__":
    main()
