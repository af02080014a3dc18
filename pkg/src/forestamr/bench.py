"""Benchmark drivers: rotating-ball refinement and Euler runs, timers, CSV/VTK, CLI."""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .balance import balanced_marking, monolithic_balance
from .comm import Transport
from .connectivity import tree_map
from .forest import Forest, adapt, migrate, new_uniform, partition
from .fvsolver import (SolverConfig, _geometry, density_jump_indicator, init_problem, leaf_volumes, load_config,
                       problem_boundary, problem_connectivity, timestep)
from .ghost import build_ghost
from .meshiter import build_intersections
from .quadrant import ROOT_LEN

PHASES = ("comm", "solve", "adapt", "lb", "ts")
CSV_FIELDS = ("step", "t", "dt", "leaves") + PHASES
RANKS_ENV = "FORESTAMR_RANKS"


# -- ball indicator ----------------------------------------------------------


@dataclass(frozen=True)
class BallIndicatorParams:
    inner: float = 0.15
    outer: float = 0.25
    period: float = 1.0

    def __post_init__(self):
        if not 0 < self.inner < self.outer:
            raise ValueError("need 0 < inner < outer")

    def center(self, t: float, dim: int) -> np.ndarray:
        a = 2 * math.pi * t / self.period
        y = [0.5 + math.cos(a) / 3, 0.5 + math.sin(a) / 3, 0.5]
        return np.array(y[:dim])


def barycenters(forest: Forest, p: int) -> np.ndarray:
    """Image of the reference cell center under the multilinear tree map."""
    lv = forest.ranks[p]
    h = (np.int64(ROOT_LEN) >> lv.level) / ROOT_LEN
    ref = lv.coords / ROOT_LEN + 0.5 * h[:, None]
    return tree_map(forest.conn, lv.tree, ref)[:, :forest.dim]


def ball_indicator(forest: Forest, t: float, coarse: int, fine: int,
                   params: BallIndicatorParams = BallIndicatorParams()) -> list[np.ndarray]:
    """+1 inside the band inner < |x - y(t)| < outer below ``fine``, -1 outside above ``coarse``."""
    y = params.center(t, forest.dim)

    def mark(p):
        r = np.linalg.norm(barycenters(forest, p) - y, axis=1)
        eta = (r > params.inner) & (r < params.outer)
        lvl = forest.ranks[p].level
        m = np.zeros(len(lvl), dtype=np.int64)
        m[eta & (lvl < fine)] = 1
        m[~eta & (lvl > coarse)] = -1
        return m

    return forest.comm.map(mark)


# -- records and measures ----------------------------------------------------


@dataclass
class PerfRecord:
    step: int
    t: float
    dt: float
    leaves: int
    comm: float = 0.0
    solve: float = 0.0
    adapt: float = 0.0
    lb: float = 0.0
    ts: float = 0.0
    sweeps_used: int = 0
    fell_back: bool = False
    face_visits: int = 0
    monolithic_visits: int = -1
    collectives: int = 0

    def row(self) -> list:
        return [getattr(self, k) for k in CSV_FIELDS]


def write_csv(path, records: list[PerfRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r.row()])


def read_csv(path) -> list[PerfRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [PerfRecord(int(r["step"]), float(r["t"]), float(r["dt"]), int(r["leaves"]),
                       *(float(r[k]) for k in PHASES)) for r in rows]


def perf_measures(records, phases=PHASES) -> dict[str, float]:
    """Per phase, the mean over steps of time per leaf element.

    ``records`` is one list of records or one list per rank; with several
    ranks the per-rank values are averaged.
    """
    if not records:
        raise ValueError("no records")
    per_rank = records if isinstance(records[0], (list, tuple)) else [records]
    if any(not r for r in per_rank):
        raise ValueError("no records")
    out = {}
    for ph in phases:
        vals = [sum(getattr(r, ph) / r.leaves for r in recs) / len(recs) for recs in per_rank]
        out[ph] = sum(vals) / len(vals)
    return out


def speedup(eta_L: float, eta_K: float) -> float:
    return eta_L / eta_K


def efficiency(eta_L: float, eta_K: float, L: int, K: int) -> float:
    return L / K * speedup(eta_L, eta_K)


# -- VTK ---------------------------------------------------------------------


VTK_QUAD, VTK_HEXAHEDRON = 9, 12
_VTK_ORDER = {2: (0, 1, 3, 2), 3: (0, 1, 3, 2, 4, 5, 7, 6)}


def write_vtk(path, forest: Forest, cell_data: dict[str, list[np.ndarray]] | None = None) -> None:
    """Legacy ASCII unstructured grid of the leaves with rank and level cell data."""
    d = forest.dim
    nv = 1 << d
    blocks, ranks, levels = [], [], []
    for p, lv in enumerate(forest.ranks):
        h = (np.int64(ROOT_LEN) >> lv.level) / ROOT_LEN
        corners = []
        for c in _VTK_ORDER[d]:
            off = np.array([(c >> k) & 1 for k in range(d)], float)
            corners.append(tree_map(forest.conn, lv.tree, lv.coords / ROOT_LEN + h[:, None] * off[None, :]))
        blocks.append(np.stack(corners, axis=1).reshape(-1, corners[0].shape[1]))
        ranks.append(np.full(len(lv), p))
        levels.append(lv.level)
    n = forest.num_leaves
    P = np.concatenate(blocks)
    if P.shape[1] < 3:
        P = np.column_stack([P, np.zeros((len(P), 3 - P.shape[1]))])
    ctype = VTK_QUAD if d == 2 else VTK_HEXAHEDRON
    lines = ["# vtk DataFile Version 3.0", "forest leaves", "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(P)} double"]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in P[:, :3]]
    lines.append(f"CELLS {n} {n * (nv + 1)}")
    lines += [" ".join(map(str, [nv, *range(i * nv, (i + 1) * nv)])) for i in range(n)]
    lines.append(f"CELL_TYPES {n}")
    lines += [str(ctype)] * n
    lines.append(f"CELL_DATA {n}")
    data = {"rank": np.concatenate(ranks) if ranks else np.zeros(0), "level": np.concatenate(levels)}
    for name, arrs in (cell_data or {}).items():
        data[name] = np.concatenate(arrs)
    for name, arr in data.items():
        kind = "int" if np.asarray(arr).dtype.kind in "iub" else "double"
        lines += [f"SCALARS {name} {kind} 1", "LOOKUP_TABLE default"]
        lines += [repr(float(v)) if kind == "double" else str(int(v)) for v in arr]
    Path(path).write_text("\n".join(lines) + "\n")


# -- drivers -----------------------------------------------------------------


@dataclass
class RunConfig:
    solver: SolverConfig
    steps: int | None = None
    ranks: int = 1
    balance: str = "ripple"
    output: str | None = None
    csv: str | None = None
    threaded: bool = False
    measure_monolithic: bool = False
    vtk_every: int = 0
    seed: int = 0
    record_history: bool = False

    def __post_init__(self):
        if self.balance not in ("ripple", "monolithic"):
            raise ValueError("balance must be 'ripple' or 'monolithic'")
        if self.ranks < 1:
            raise ValueError("ranks must be positive")


@dataclass
class RunResult:
    records: list[PerfRecord]
    forest: Forest
    states: list[np.ndarray] | None = None
    history: list = field(default_factory=list)


def _snapshot(forest: Forest, states=None):
    """Global leaf array (and global states) after a step, for cross-run comparison."""
    leaves = forest.global_leaves().pack()
    if states is None:
        return leaves
    return leaves, np.concatenate(states)


class _Timer:
    def __init__(self):
        self.t = {k: 0.0 for k in PHASES}

    def add(self, phase: str, start: float) -> None:
        self.t[phase] += time.perf_counter() - start


def _remesh(forest: Forest, marks, balance: str, rec: PerfRecord, measure_monolithic: bool = False,
            data=None, volumes=None):
    """Balance the marking and adapt, carrying per-leaf ``data``; returns (forest, data)."""
    if measure_monolithic:
        raw, _ = adapt(forest, marks, check_balance=False)
        _, mono = monolithic_balance(raw)
        rec.monolithic_visits = mono.face_visits
    if balance == "ripple":
        m, rep = balanced_marking(forest, marks)
        rec.sweeps_used, rec.fell_back, rec.face_visits = rep.sweeps_used, rep.fell_back, rep.face_visits
        new, record = adapt(forest, m, check_balance=False)
        if data is not None:
            data = record.transfer(data, volumes)
        return new, data
    raw, record = adapt(forest, marks, check_balance=False)
    carried = [record.transfer(data, volumes) if data is not None else None]

    def carry(r):
        if carried[0] is not None:
            carried[0] = r.transfer(carried[0])

    new, mono = monolithic_balance(raw, on_adapt=carry)
    rec.face_visits = mono.face_visits
    return new, carried[0]


def _rebalance(forest: Forest, data=None):
    new, mig = partition(forest)
    if data is not None:
        data = migrate(forest.comm, mig, data, tag="migrate-data")
    return new, data


def _ranks(rc: RunConfig) -> Transport:
    return Transport(rc.ranks, threaded=rc.threaded)


def _out_dir(rc: RunConfig) -> Path | None:
    if rc.output is None or str(rc.output).lower() == "none":
        return None
    out = Path(rc.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_ball(rc: RunConfig) -> RunResult:
    """Rotating-ball band refinement: indicator, balance, adapt, partition per step."""
    cfg = rc.solver
    c, f = cfg.coarse, cfg.fine
    steps = rc.steps or int(cfg.param("steps", 100))
    period = float(cfg.param("period", 1.0))
    dt = float(cfg.end_time) / steps
    params = BallIndicatorParams(float(cfg.param("inner_radius", 0.15)), float(cfg.param("outer_radius", 0.25)), period)
    comm = _ranks(rc)
    conn = problem_connectivity(cfg)
    forest, _ = partition(new_uniform(conn, c, comm=comm))
    out = _out_dir(rc)
    for _ in range(f - c):
        rec = PerfRecord(0, 0.0, 0.0, forest.num_leaves)
        forest, _ = _remesh(forest, ball_indicator(forest, 0.0, c, f, params), rc.balance, rec)
        forest, _ = _rebalance(forest)
    records = []
    history = []
    for n in range(1, steps + 1):
        t = n * dt
        rec = PerfRecord(n, t, dt, forest.num_leaves)
        comm.transcript.clear()
        timer = _Timer()
        t_step = time.perf_counter()
        s = time.perf_counter()
        layer = build_ghost(forest)
        build_intersections(forest, layer)
        timer.add("comm", s)
        s = time.perf_counter()
        marks = ball_indicator(forest, t, c, f, params)
        forest, _ = _remesh(forest, marks, rc.balance, rec, rc.measure_monolithic)
        timer.add("adapt", s)
        s = time.perf_counter()
        forest, _ = _rebalance(forest)
        timer.add("lb", s)
        timer.add("ts", t_step)
        for k, v in timer.t.items():
            setattr(rec, k, v)
        rec.leaves = forest.num_leaves
        rec.collectives = len(comm.transcript.collectives)
        records.append(rec)
        if rc.record_history:
            history.append(_snapshot(forest))
        if out is not None and rc.vtk_every and n % rc.vtk_every == 0:
            write_vtk(out / f"ball_{n:05d}.vtk", forest)
    if rc.csv:
        write_csv(rc.csv, records)
    if out is not None:
        write_csv(out / "perf.csv", records)
        write_vtk(out / "ball_final.vtk", forest)
    return RunResult(records, forest, history=history)


def run_euler(rc: RunConfig) -> RunResult:
    """Euler run: timestep, density-jump indicator, balance, adapt, partition per step."""
    cfg = rc.solver
    c, f = cfg.coarse, cfg.fine
    comm = _ranks(rc)
    conn = problem_connectivity(cfg)
    bc = problem_boundary(cfg, conn)
    forest, _ = partition(new_uniform(conn, c, comm=comm))
    states = init_problem(cfg, forest)

    def remesh(forest, states, rec):
        marks = density_jump_indicator(forest, states, cfg.refine_threshold, cfg.coarsen_threshold, c, f)
        vol = [leaf_volumes(_geometry(forest), lv, forest.dim) for lv in forest.ranks]
        return _remesh(forest, marks, rc.balance, rec, rc.measure_monolithic, states, vol)

    for _ in range(f - c):
        forest, _ = remesh(forest, states, PerfRecord(0, 0.0, 0.0, 1))
        forest, _ = _rebalance(forest)
        states = init_problem(cfg, forest)
    out = _out_dir(rc)
    records = []
    history = []
    t = 0.0
    n = 0
    max_steps = rc.steps if rc.steps is not None else 10 ** 9
    while n < max_steps and t < cfg.end_time * (1 - 1e-12):
        n += 1
        rec = PerfRecord(n, t, 0.0, forest.num_leaves)
        comm.transcript.clear()
        timer = _Timer()
        t_step = time.perf_counter()
        s = time.perf_counter()
        layer = build_ghost(forest)
        build_intersections(forest, layer)
        timer.add("comm", s)
        s = time.perf_counter()
        states, dt = timestep(forest, states, cfg.cfl, bc, cfg.gamma, layer, max_dt=cfg.end_time - t)
        t += dt
        timer.add("solve", s)
        s = time.perf_counter()
        forest, states = remesh(forest, states, rec)
        timer.add("adapt", s)
        s = time.perf_counter()
        forest, states = _rebalance(forest, states)
        timer.add("lb", s)
        timer.add("ts", t_step)
        for k, v in timer.t.items():
            setattr(rec, k, v)
        rec.t, rec.dt = t, dt
        rec.leaves = forest.num_leaves
        rec.collectives = len(comm.transcript.collectives)
        records.append(rec)
        if rc.record_history:
            history.append(_snapshot(forest, states))
        if out is not None and rc.vtk_every and n % rc.vtk_every == 0:
            write_vtk(out / f"euler_{n:05d}.vtk", forest, {"rho": [s_[:, 0] for s_ in states]})
    if rc.csv:
        write_csv(rc.csv, records)
    if out is not None:
        write_csv(out / "perf.csv", records)
        write_vtk(out / "euler_final.vtk", forest, {"rho": [s_[:, 0] for s_ in states]})
    return RunResult(records, forest, states, history)


# -- CLI ---------------------------------------------------------------------

_EULER_PROBLEMS = {0: "sod", 1: "forward-step", 2: "shock-bubble"}

USAGE_EPILOG = """\
programs: ball2d, ball3d, euler2d, euler3d
  ball:  p = log2 of the trees per axis of the unit-square/cube brick
  euler: p = 0 sod, 1 forward-step, 2 shock-bubble
output: a directory for CSV/VTK files, or 'none'
"""


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="forestamr", epilog=USAGE_EPILOG,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("program", choices=["ball2d", "ball3d", "euler2d", "euler3d"])
    ap.add_argument("p", type=int)
    ap.add_argument("c", type=int)
    ap.add_argument("f", type=int)
    ap.add_argument("output")
    ap.add_argument("--ranks", type=int, default=int(os.environ.get(RANKS_ENV, "1")))
    ap.add_argument("--balance", choices=["ripple", "monolithic"], default="ripple")
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--cfl", type=float, default=None)
    ap.add_argument("--csv", default=None)
    ap.add_argument("--seed", type=int, default=0, help="recorded only; the drivers are deterministic")
    ap.add_argument("--threaded", action="store_true")
    ap.add_argument("--vtk-every", type=int, default=0)
    return ap


def build_run_config(ns: argparse.Namespace) -> tuple[str, RunConfig]:
    dim = 2 if ns.program.endswith("2d") else 3
    if ns.program.startswith("ball"):
        n = 1 << ns.p
        cfg = load_config("ball", dim=dim, coarse=ns.c, fine=ns.f)
        cfg.params.update(trees=(n,) * dim, lower=(0.0,) * dim, upper=(1.0,) * dim)
        kind = "ball"
    else:
        if ns.p not in _EULER_PROBLEMS:
            raise ValueError(f"unknown euler problem {ns.p}; choose 0 (sod), 1 (forward-step) or 2 (shock-bubble)")
        name = _EULER_PROBLEMS[ns.p]
        if dim == 3:
            name = {"shock-bubble": "shock-bubble-3d"}.get(name, name)
        cfg = load_config(name, coarse=ns.c, fine=ns.f, cfl=ns.cfl)
        if dim == 3 and cfg.dim != 3:
            base = {k: getattr(cfg, k) for k in ("problem", "coarse", "fine", "cfl", "end_time", "gamma",
                                                 "refine_threshold", "coarsen_threshold")}
            cfg = SolverConfig(dim=3, params=cfg.params, **base)
        kind = "euler"
    rc = RunConfig(cfg, steps=ns.steps, ranks=ns.ranks, balance=ns.balance, output=ns.output, csv=ns.csv,
                   threaded=ns.threaded, vtk_every=ns.vtk_every, seed=ns.seed)
    return kind, rc


def format_measures(eta: dict[str, float]) -> str:
    head = " ".join(f"{k:>12}" for k in eta)
    vals = " ".join(f"{v:12.4e}" for v in eta.values())
    return f"eta (s per leaf per step)\n{head}\n{vals}"


def cli_main(argv: list[str] | None = None) -> int:
    ap = _parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) if e.code not in (None, 0) else 0
    try:
        kind, rc = build_run_config(ns)
        res = run_ball(rc) if kind == "ball" else run_euler(rc)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        ap.print_usage(sys.stderr)
        return 2
    if not res.records:
        print("no steps were run")
        return 0
    print(format_measures(perf_measures(res.records)))
    last = res.records[-1]
    print(f"steps {len(res.records)}  leaves {last.leaves}  ranks {rc.ranks}  balance {rc.balance}")
    return 0
