"""Shock-bubble run with VTK snapshots and a conservation report.

    python3 scripts/shock_bubble.py --fine 4 --ranks 4 --vtk-every 20
"""
import argparse

import numpy as np

from forestamr.bench import RunConfig, perf_measures, run_euler
from forestamr.fvsolver import load_config, pressure


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="shock-bubble")
    ap.add_argument("--coarse", type=int, default=None)
    ap.add_argument("--fine", type=int, default=None)
    ap.add_argument("--ranks", type=int, default=4)
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--vtk-every", type=int, default=20)
    ap.add_argument("--out", default="out/shock-bubble")
    args = ap.parse_args()

    cfg = load_config(args.config, coarse=args.coarse, fine=args.fine)
    res = run_euler(RunConfig(cfg, steps=args.steps, ranks=args.ranks, output=args.out,
                              vtk_every=args.vtk_every))
    u = np.concatenate(res.states)
    last = res.records[-1]
    print(f"{len(res.records)} steps to t={last.t:.4f}, {last.leaves} leaves")
    print(f"min rho {u[:, 0].min():.4e}, min p {pressure(u, cfg.gamma).min():.4e}")
    print(perf_measures(res.records))


if __name__ == "__main__":
    main()
