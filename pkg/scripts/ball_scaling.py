"""Rotating-ball runs over several simulated rank counts; prints eta, speedup and efficiency.

    python3 scripts/ball_scaling.py --trees-log2 4 --fine 4 --steps 100 --ranks 1 2 4 8
"""
import argparse
from pathlib import Path

from forestamr.bench import PHASES, RunConfig, efficiency, perf_measures, run_ball, speedup
from forestamr.fvsolver import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trees-log2", type=int, default=6)
    ap.add_argument("--coarse", type=int, default=0)
    ap.add_argument("--fine", type=int, default=4)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--ranks", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--balance", choices=["ripple", "monolithic"], default="ripple")
    ap.add_argument("--threaded", action="store_true")
    ap.add_argument("--out", default="out/ball")
    args = ap.parse_args()

    n = 1 << args.trees_log2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    eta = {}
    for P in args.ranks:
        cfg = load_config("ball", coarse=args.coarse, fine=args.fine)
        cfg.params.update(trees=(n, n), lower=(0.0, 0.0), upper=(1.0, 1.0))
        rc = RunConfig(cfg, steps=args.steps, ranks=P, balance=args.balance, threaded=args.threaded,
                       csv=str(out / f"ball_P{P}.csv"))
        res = run_ball(rc)
        eta[P] = perf_measures(res.records)
        sweeps = max(r.sweeps_used for r in res.records)
        print(f"P={P:3d} leaves {res.records[-1].leaves:8d} max sweeps {sweeps} "
              + " ".join(f"{k}={eta[P][k]:.3e}" for k in PHASES))
    # simulated ranks share one process, so these describe per-element cost, not parallel speedup
    L = args.ranks[0]
    for K in args.ranks[1:]:
        s = speedup(eta[L]["ts"], eta[K]["ts"])
        print(f"{L}->{K}: s={s:.3f} e={efficiency(eta[L]['ts'], eta[K]['ts'], L, K):.3f}")


if __name__ == "__main__":
    main()
