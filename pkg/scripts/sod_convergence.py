"""L1 density error of the Sod tube against the exact Riemann solution.

    python3 scripts/sod_convergence.py --levels 1 2 3 --ranks 2
"""
import argparse
import sys
from pathlib import Path

import numpy as np

from forestamr.forest import new_uniform
from forestamr.fvsolver import (_geometry, init_problem, leaf_centers, leaf_volumes, load_config,
                                problem_boundary, problem_connectivity, timestep)

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
from oracles import exact_riemann  # noqa: E402


def run(level, P):
    cfg = load_config("sod", coarse=level, fine=level)
    conn = problem_connectivity(cfg)
    f = new_uniform(conn, level, P=P)
    bc = problem_boundary(cfg, conn)
    u = init_problem(cfg, f)
    t, steps = 0.0, 0
    while t < cfg.end_time - 1e-14:
        u, dt = timestep(f, u, cfg.cfl, bc, max_dt=cfg.end_time - t)
        t += dt
        steps += 1
    geo = _geometry(f)
    x = np.concatenate([leaf_centers(geo, lv) for lv in f.ranks])[:, 0]
    vol = np.concatenate([leaf_volumes(geo, lv, 2) for lv in f.ranks])
    left = (cfg.param("rho_l", 1.0), 0.0, cfg.param("p_l", 1.0))
    right = (cfg.param("rho_r", 0.125), 0.0, cfg.param("p_r", 0.1))
    exact = exact_riemann(left, right, cfg.gamma, (x - cfg.param("x0", 0.5)) / t)[0]
    rho = np.concatenate(u)[:, 0]
    return len(x), steps, float((np.abs(rho - exact) * vol).sum() / vol.sum())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--levels", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--ranks", type=int, default=2)
    args = ap.parse_args()
    prev = None
    for lvl in args.levels:
        cells, steps, err = run(lvl, args.ranks)
        rate = "" if prev is None else f"  rate {np.log2(prev / err):.2f}"
        print(f"level {lvl}: {cells} cells, {steps} steps, L1(rho) {err:.5f}{rate}")
        prev = err


if __name__ == "__main__":
    main()
