"""First-order finite-volume solver for the compressible Euler equations.

Cell averages of the conserved variables ``(rho, rho*v, E)`` are stored per
leaf as rows of a float array.  Every face flux is evaluated once per face
side from the same inputs: the left state is the finer cell (or, at equal
level, the cell with the smaller (tree, Morton) key) and the normal and area
come from that cell's face.  Both owners of a face therefore obtain
bit-identical fluxes, which keeps the update conservative and independent of
the partition.  Hanging faces are integrated per fine sub-face.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .connectivity import Connectivity, affine_frames, build_brick, build_from_mesh
from .forest import Forest, Leaves
from .ghost import GhostLayer, build_ghost, ghost_exchange
from .meshiter import BOUNDARY, build_intersections
from .quadrant import ROOT_LEN

WALL, OUTFLOW, INFLOW = 0, 1, 2
GAMMA = 1.4


class PositivityError(ArithmeticError):
    pass


class TimestepError(ArithmeticError):
    pass


# -- state helpers -----------------------------------------------------------


def primitive_to_conserved(rho, vel, p, gamma: float = GAMMA) -> np.ndarray:
    rho = np.atleast_1d(np.asarray(rho, float))
    vel = np.asarray(vel, float).reshape(len(rho), -1)
    p = np.atleast_1d(np.asarray(p, float))
    E = p / (gamma - 1) + 0.5 * rho * (vel ** 2).sum(axis=1)
    return np.column_stack([rho, rho[:, None] * vel, E])


def pressure(u: np.ndarray, gamma: float = GAMMA) -> np.ndarray:
    rho = u[:, 0]
    kin = 0.5 * (u[:, 1:-1] ** 2).sum(axis=1) / rho
    return (gamma - 1) * (u[:, -1] - kin)


def euler_flux(u: np.ndarray, n: np.ndarray, gamma: float = GAMMA) -> np.ndarray:
    """Physical flux F(u) . n for rows of states and unit normals."""
    rho = u[:, 0]
    vn = (u[:, 1:-1] * n).sum(axis=1) / rho
    p = pressure(u, gamma)
    out = np.empty_like(u)
    out[:, 0] = rho * vn
    out[:, 1:-1] = u[:, 1:-1] * vn[:, None] + p[:, None] * n
    out[:, -1] = (u[:, -1] + p) * vn
    return out


def _check_physical(u: np.ndarray, gamma: float, what: str):
    p = pressure(u, gamma)
    bad = ~((u[:, 0] > 0) & (p > 0) & np.isfinite(u).all(axis=1))
    if bad.any():
        k = int(np.nonzero(bad)[0][0])
        raise PositivityError(f"{what}: unphysical state at row {k}: rho={u[k, 0]!r}, p={p[k]!r}")


def hllc_flux(left: np.ndarray, right: np.ndarray, normal: np.ndarray, gamma: float = GAMMA,
              check: bool = True) -> np.ndarray:
    """HLLC flux for rows of left/right conserved states and unit normals.

    Wave speeds are the Davis estimates min/max of ``v.n -+ c`` over both
    states.  Accepts single states as 1-d arrays.
    """
    single = np.ndim(left) == 1
    uL = np.atleast_2d(np.asarray(left, float))
    uR = np.atleast_2d(np.asarray(right, float))
    n = np.atleast_2d(np.asarray(normal, float))
    if len(n) == 1 and len(uL) > 1:
        n = np.repeat(n, len(uL), axis=0)
    if check:
        _check_physical(uL, gamma, "hllc left state")
        _check_physical(uR, gamma, "hllc right state")
    rL, rR = uL[:, 0], uR[:, 0]
    vL = uL[:, 1:-1] / rL[:, None]
    vR = uR[:, 1:-1] / rR[:, None]
    vnL = (vL * n).sum(axis=1)
    vnR = (vR * n).sum(axis=1)
    pL, pR = pressure(uL, gamma), pressure(uR, gamma)
    cL = np.sqrt(gamma * pL / rL)
    cR = np.sqrt(gamma * pR / rR)
    SL = np.minimum(vnL - cL, vnR - cR)
    SR = np.maximum(vnL + cL, vnR + cR)
    aL = rL * (SL - vnL)
    aR = rR * (SR - vnR)
    Ss = (pR - pL + aL * vnL - aR * vnR) / (aL - aR)
    FL = euler_flux(uL, n, gamma)
    FR = euler_flux(uR, n, gamma)

    def star(u, r, v, vn, p, S, a):
        fac = a / (S - Ss)
        out = np.empty_like(u)
        out[:, 0] = fac
        out[:, 1:-1] = fac[:, None] * (v + (Ss - vn)[:, None] * n)
        out[:, -1] = fac * (u[:, -1] / r + (Ss - vn) * (Ss + p / a))
        return out

    with np.errstate(divide="ignore", invalid="ignore"):
        sL = star(uL, rL, vL, vnL, pL, SL, aL)
        sR = star(uR, rR, vR, vnR, pR, SR, aR)
    F = np.where((SL >= 0)[:, None], FL,
                 np.where((Ss >= 0)[:, None], FL + SL[:, None] * (sL - uL),
                          np.where((SR >= 0)[:, None], FR + SR[:, None] * (sR - uR), FR)))
    return F[0] if single else F


# -- geometry ----------------------------------------------------------------


@dataclass
class TreeGeometry:
    """Affine frame per tree: origin, Jacobian, |det J| and det(J) J^-T columns."""
    origin: np.ndarray
    jac: np.ndarray
    det: np.ndarray
    cof: np.ndarray

    @classmethod
    def of(cls, conn: Connectivity) -> "TreeGeometry":
        origin, jac = affine_frames(conn)
        det = np.linalg.det(jac)
        inv_t = np.transpose(np.linalg.inv(jac), (0, 2, 1))
        cof = det[:, None, None] * inv_t  # column a: area vector of the +a face
        return cls(origin, jac, np.abs(det), cof)


def _geometry(forest: Forest) -> TreeGeometry:
    key = "tree-geometry"
    if key not in forest._cache:
        forest._cache[key] = TreeGeometry.of(forest.conn)
    return forest._cache[key]


def leaf_volumes(geo: TreeGeometry, leaves: Leaves, dim: int) -> np.ndarray:
    h = (np.int64(ROOT_LEN) >> leaves.level) / ROOT_LEN
    return geo.det[leaves.tree] * h ** dim


def leaf_centers(geo: TreeGeometry, leaves: Leaves) -> np.ndarray:
    h = (np.int64(ROOT_LEN) >> leaves.level) / ROOT_LEN
    ref = leaves.coords / ROOT_LEN + 0.5 * h[:, None]
    return geo.origin[leaves.tree] + np.einsum("nij,nj->ni", geo.jac[leaves.tree], ref)


def leaf_widths(geo: TreeGeometry, leaves: Leaves) -> np.ndarray:
    """Smallest distance between opposite faces of each leaf."""
    h = (np.int64(ROOT_LEN) >> leaves.level) / ROOT_LEN
    heights = geo.det[:, None] / np.linalg.norm(geo.cof, axis=1)
    return heights[leaves.tree].min(axis=1) * h


def face_vectors(geo: TreeGeometry, tree: np.ndarray, level: np.ndarray, face: np.ndarray, dim: int):
    """Outward unit normal and area of the given leaf faces."""
    h = (np.int64(ROOT_LEN) >> level) / ROOT_LEN
    axis, side = face // 2, face % 2
    vec = geo.cof[tree, :, axis] * (h ** (dim - 1) * np.where(side == 1, 1.0, -1.0))[:, None]
    area = np.linalg.norm(vec, axis=1)
    return vec / area[:, None], area


# -- boundary conditions -----------------------------------------------------


@dataclass
class Boundary:
    """Per (tree, face) boundary kind plus the inflow state."""
    kind: np.ndarray
    inflow: np.ndarray | None = None

    def ghost_states(self, u: np.ndarray, n: np.ndarray, kind: np.ndarray) -> np.ndarray:
        out = u.copy()
        w = kind == WALL
        if w.any():
            mn = (u[w, 1:-1] * n[w]).sum(axis=1)
            out[w, 1:-1] = u[w, 1:-1] - 2 * mn[:, None] * n[w]
        i = kind == INFLOW
        if i.any():
            out[i] = self.inflow
        return out


def walls(conn: Connectivity) -> Boundary:
    return Boundary(np.zeros((conn.num_trees, 2 * conn.dim), dtype=np.int64))


# -- time step ---------------------------------------------------------------


def _leaf_keys(forest: Forest, leaves: Leaves) -> np.ndarray:
    return forest.codec().morton(leaves.coords).astype(np.uint64)


def _face_fluxes(forest: Forest, layer: GhostLayer, p: int, U: np.ndarray, comb: Leaves,
                 bc: Boundary, gamma: float) -> np.ndarray:
    """Net flux out of every local leaf (sum over its faces and sub-faces)."""
    d = forest.dim
    tb = build_intersections(forest, layer)[p]
    n = tb.n
    geo = _geometry(forest)
    hf = 1 << (d - 1)
    S = tb.nbr.shape[1]
    contrib = np.zeros((n, S, U.shape[1]))
    rows, slots = np.nonzero(tb.nbr >= 0)
    if len(rows):
        i, j = rows, tb.nbr[rows, slots]
        f, g = slots // hf, tb.nbr_face[rows, slots]
        li, lj = comb.level[i], comb.level[j]
        mk = _leaf_keys(forest, comb)
        ti, tj = comb.tree[i], comb.tree[j]
        smaller = (ti < tj) | ((ti == tj) & (mk[i] < mk[j]))
        left = (li > lj) | ((li == lj) & smaller)
        L, R = np.where(left, i, j), np.where(left, j, i)
        nrm, area = face_vectors(geo, comb.tree[L], comb.level[L], np.where(left, f, g), d)
        F = hllc_flux(U[L], U[R], nrm, gamma, check=False) * area[:, None]
        contrib[rows, slots] = np.where(left[:, None], F, -F)
    rows, slots = np.nonzero(tb.nbr == BOUNDARY)
    if len(rows):
        f = slots // hf
        nrm, area = face_vectors(geo, comb.tree[rows], comb.level[rows], f, d)
        kind = bc.kind[comb.tree[rows], f]
        ub = bc.ghost_states(U[rows], nrm, kind)
        contrib[rows, slots] = hllc_flux(U[rows], ub, nrm, gamma, check=False) * area[:, None]
    out = np.zeros((n, U.shape[1]))
    for s in range(S):
        out += contrib[:, s]
    return out


def max_stable_dt(forest: Forest, states: list[np.ndarray], cfl: float, gamma: float = GAMMA) -> float:
    geo = _geometry(forest)

    def local(p):
        u = states[p]
        if not len(u):
            return np.inf
        c = np.sqrt(gamma * np.maximum(pressure(u, gamma), 0) / u[:, 0])
        speed = np.linalg.norm(u[:, 1:-1], axis=1) / u[:, 0] + c
        return float((leaf_widths(geo, forest.ranks[p]) / speed).min())

    return cfl * forest.comm.allreduce(forest.comm.map(local), op="min", tag="dt")


def timestep(forest: Forest, states: list[np.ndarray], cfl: float, bc: Boundary | None = None,
             gamma: float = GAMMA, layer: GhostLayer | None = None,
             max_dt: float = np.inf, min_dt: float = 1e-14) -> tuple[list[np.ndarray], float]:
    """One forward-Euler step of the whole forest; returns new states and dt."""
    layer = layer or build_ghost(forest)
    bc = bc or walls(forest.conn)
    for p in range(forest.size):
        if states[p].shape != (len(forest.ranks[p]), forest.dim + 2):
            raise ValueError(f"rank {p}: states must have shape (leaves, {forest.dim + 2})")
    dt = min(max_stable_dt(forest, states, cfl, gamma), max_dt)
    if not np.isfinite(dt) or dt < min_dt:
        raise TimestepError(f"time step {dt!r} is below the minimum {min_dt!r}")
    ghosts = ghost_exchange(forest, layer, states, tag="states")
    geo = _geometry(forest)

    def step(p):
        lv = forest.ranks[p]
        comb = Leaves.concat([lv, layer[p].ghosts], forest.dim)
        U = np.concatenate([states[p], ghosts[p]])
        flux = _face_fluxes(forest, layer, p, U, comb, bc, gamma)
        new = states[p] - (dt / leaf_volumes(geo, lv, forest.dim))[:, None] * flux
        pr = pressure(new, gamma) if len(new) else new[:, 0]
        bad = ~((new[:, 0] > 0) & (pr > 0) & np.isfinite(new).all(axis=1))
        if bad.any():
            k = int(np.nonzero(bad)[0][0])
            x = leaf_centers(geo, lv.take([k]))[0]
            raise PositivityError(f"rank {p} leaf {k} (tree {int(lv.tree[k])}, level {int(lv.level[k])}, "
                                  f"center {np.round(x, 6).tolist()}): rho={new[k, 0]!r}, p={pr[k]!r}")
        return new

    return forest.comm.map(step), dt


def conserved_totals(forest: Forest, states: list[np.ndarray]) -> np.ndarray:
    """Sum of cell average times volume for every conserved component."""
    geo = _geometry(forest)
    parts = [(states[p] * leaf_volumes(geo, forest.ranks[p], forest.dim)[:, None]).sum(axis=0)
             for p in range(forest.size)]
    return np.sum(forest.comm.allgather(parts, tag="totals"), axis=0)


# -- indicator ---------------------------------------------------------------


def density_jump_indicator(forest: Forest, states: list[np.ndarray], refine: float, coarsen: float,
                           coarse: int, fine: int, layer: GhostLayer | None = None) -> list[np.ndarray]:
    """+1 where the largest relative density jump over a face exceeds ``refine``,
    -1 where it stays below ``coarsen``, within the level range [coarse, fine]."""
    layer = layer or build_ghost(forest)
    tables = build_intersections(forest, layer)
    ghosts = ghost_exchange(forest, layer, [s[:, 0].copy() for s in states], tag="indicator")

    def mark(p):
        tb = tables[p]
        rho = np.concatenate([states[p][:, 0], ghosts[p]])
        n = tb.n
        jump = np.zeros(n)
        rows, slots = np.nonzero(tb.nbr >= 0)
        if len(rows):
            j = tb.nbr[rows, slots]
            a, b = rho[rows], rho[j]
            np.maximum.at(jump, rows, np.abs(a - b) / np.minimum(a, b))
        lvl = forest.ranks[p].level
        m = np.zeros(n, dtype=np.int64)
        m[(jump > refine) & (lvl < fine)] = 1
        m[(jump < coarsen) & (lvl > coarse)] = -1
        return m

    return forest.comm.map(mark)


# -- problems ----------------------------------------------------------------


@dataclass
class SolverConfig:
    problem: str
    dim: int = 2
    coarse: int = 0
    fine: int = 3
    cfl: float = 0.4
    end_time: float = 0.2
    gamma: float = GAMMA
    refine_threshold: float = 0.1
    coarsen_threshold: float = 0.02
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if not 0 <= self.coarse <= self.fine:
            raise ValueError(f"need 0 <= coarse <= fine, got c={self.coarse}, f={self.fine}")

    def param(self, key: str, default=None):
        return self.params.get(key, default)


_CONFIG_DIR = Path(__file__).resolve().parent / "configs"
_FIELDS = {"problem", "dim", "coarse", "fine", "cfl", "end_time", "gamma", "refine_threshold", "coarsen_threshold"}


def _value(text: str):
    text = text.strip()
    if "," in text:
        return tuple(_value(t) for t in text.split(","))
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def load_config(source: str | Path, **overrides) -> SolverConfig:
    """Read a key = value file; ``source`` may also name a bundled config."""
    path = Path(source)
    if not path.exists():
        path = _CONFIG_DIR / f"{source}.cfg"
    if not path.exists():
        raise FileNotFoundError(f"no config file {source!r}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read_string("[config]\n" + path.read_text())
    raw = {k: _value(v) for k, v in cp["config"].items()}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    base = {k: raw.pop(k) for k in list(raw) if k in _FIELDS}
    return SolverConfig(**base, params=raw)


PROBLEMS = ("sod", "shock-bubble", "forward-step", "ball")


def _box(cfg: SolverConfig, key: str, default) -> tuple:
    v = cfg.param(key, default)
    return tuple(v) if isinstance(v, tuple) else (v,)


def problem_connectivity(cfg: SolverConfig) -> Connectivity:
    d = cfg.dim
    if cfg.problem == "forward-step":
        return _step_connectivity(cfg)
    if cfg.problem not in PROBLEMS + ("smooth",):
        raise ValueError(f"unknown problem {cfg.problem!r}; choose from {', '.join(PROBLEMS)}")
    trees = _box(cfg, "trees", (1,) * d)[:d]
    lo = _box(cfg, "lower", (0.0,) * d)[:d]
    hi = _box(cfg, "upper", tuple(float(t) for t in trees))[:d]
    periodic = bool(cfg.param("periodic", 0))
    return build_brick(*trees, periodic=periodic, bounds=(lo, hi))


def _step_connectivity(cfg: SolverConfig) -> Connectivity:
    d = cfg.dim
    w = float(cfg.param("tree_size", 0.2))
    nx = int(round(float(cfg.param("length", 3.0)) / w))
    ny = int(round(float(cfg.param("height", 1.0)) / w))
    sx = int(round(float(cfg.param("step_x", 0.6)) / w))
    sy = int(round(float(cfg.param("step_h", 0.2)) / w))
    nz = 1 if d == 3 else 0
    dims = (nx + 1, ny + 1) + ((nz + 1,) if d == 3 else ())
    verts = np.array([[i * w, j * w] + ([k * w] if d == 3 else [])
                      for k in range(dims[2] if d == 3 else 1) for j in range(dims[1]) for i in range(dims[0])])

    def vid(i, j, k=0):
        return i + dims[0] * (j + dims[1] * k)

    cubes = []
    for k in range(max(nz, 1)):
        for j in range(ny):
            for i in range(nx):
                if i >= sx and j < sy:
                    continue
                corners = []
                for c in range(1 << d):
                    a, b, e = c & 1, (c >> 1) & 1, (c >> 2) & 1
                    corners.append(vid(i + a, j + b, k + e) if d == 3 else vid(i + a, j + b))
                cubes.append(corners)
    return build_from_mesh(verts, cubes)


def problem_boundary(cfg: SolverConfig, conn: Connectivity) -> Boundary:
    d = conn.dim
    T = conn.num_trees
    kind = np.zeros((T, 2 * d), dtype=np.int64)
    geo = TreeGeometry.of(conn)
    inflow = None
    if cfg.problem in ("sod", "shock-bubble"):
        kind[:, 0] = kind[:, 1] = OUTFLOW
    elif cfg.problem == "forward-step":
        inflow = _step_inflow(cfg)
        lo = geo.origin[:, 0] < 1e-12
        kind[:, 0] = np.where(lo, INFLOW, WALL)
        kind[:, 1] = OUTFLOW
    mask = conn.bmask
    kind[~mask] = WALL
    return Boundary(kind, inflow)


def _step_inflow(cfg: SolverConfig) -> np.ndarray:
    d = cfg.dim
    rho = float(cfg.param("inflow_rho", 1.4))
    p = float(cfg.param("inflow_p", 1.0))
    u = float(cfg.param("inflow_u", 3.0))
    return primitive_to_conserved([rho], [[u] + [0.0] * (d - 1)], [p], cfg.gamma)[0]


def post_shock_state(rho1: float, p1: float, mach: float, gamma: float = GAMMA) -> tuple[float, float, float]:
    """State behind a shock moving at ``mach`` into gas at rest (rho1, p1)."""
    M2 = mach * mach
    rho2 = rho1 * (gamma + 1) * M2 / ((gamma - 1) * M2 + 2)
    p2 = p1 * (2 * gamma * M2 - (gamma - 1)) / (gamma + 1)
    s = mach * np.sqrt(gamma * p1 / rho1)
    u2 = s * (1 - rho1 / rho2)
    return rho2, u2, p2


def initial_states(cfg: SolverConfig, x: np.ndarray) -> np.ndarray:
    """Conserved initial data at physical points ``x`` (rows)."""
    d = cfg.dim
    g = cfg.gamma
    n = len(x)
    vel = np.zeros((n, d))
    if cfg.problem == "sod":
        x0 = float(cfg.param("x0", 0.5))
        left = x[:, 0] < x0
        rho = np.where(left, float(cfg.param("rho_l", 1.0)), float(cfg.param("rho_r", 0.125)))
        p = np.where(left, float(cfg.param("p_l", 1.0)), float(cfg.param("p_r", 0.1)))
    elif cfg.problem == "shock-bubble":
        rho1, p1 = float(cfg.param("rho_ambient", 1.0)), float(cfg.param("p_ambient", 1.0))
        rho2, u2, p2 = post_shock_state(rho1, p1, float(cfg.param("mach", 1.22)), g)
        xs = float(cfg.param("shock_x", 0.1))
        c = np.array(_box(cfg, "bubble_center", (0.5,) * d)[:d], float)
        r = float(cfg.param("bubble_radius", 0.2))
        behind = x[:, 0] < xs
        inside = np.linalg.norm(x - c, axis=1) < r
        rho = np.where(behind, rho2, np.where(inside, float(cfg.param("rho_bubble", 0.1)), rho1))
        p = np.where(behind, p2, p1)
        vel[:, 0] = np.where(behind, u2, 0.0)
    elif cfg.problem == "forward-step":
        u = _step_inflow(cfg)
        return np.repeat(u[None, :], n, axis=0)
    elif cfg.problem == "smooth":
        k = 2 * np.pi * np.asarray(_box(cfg, "wave", (1.0,) * d)[:d], float)
        rho = 1.0 + 0.2 * np.sin(x @ k)
        p = np.ones(n)
        vel[:, 0] = 0.5
    elif cfg.problem == "ball":
        return np.zeros((n, d + 2))
    else:
        raise ValueError(f"unknown problem {cfg.problem!r}; choose from {', '.join(PROBLEMS)}")
    return primitive_to_conserved(rho, vel, p, g)


def init_problem(cfg: SolverConfig, forest: Forest) -> list[np.ndarray]:
    """Cell states from the initial data sampled at leaf centers."""
    if cfg.problem not in PROBLEMS + ("smooth",):
        raise ValueError(f"unknown problem {cfg.problem!r}; choose from {', '.join(PROBLEMS)}")
    geo = _geometry(forest)
    return forest.comm.map(lambda p: initial_states(cfg, leaf_centers(geo, forest.ranks[p])))
