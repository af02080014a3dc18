"""Inter-tree topology of a forest.

Each tree face stores the neighbor tree and an integer code
``neighbor_face + 2*d*orientation``.  The orientation describes how the
tangential axes of the face map onto the neighbor's face:

* 2D: ``o = 1`` iff the single tangential axis is reversed;
* 3D: ``o = flip0 + 2*flip1 + 4*swap`` where the tangential axes of the
  source face are taken in ascending order, ``swap`` means the first one maps
  to the second tangential axis of the neighbor and ``flip*`` means the image
  runs backwards.

A physical boundary face points back at itself (same tree, same face,
orientation 0).  Edge and corner neighbors are not stored; they are reached
by repeated face hops.
"""
from __future__ import annotations

import ast
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .quadrant import ROOT_LEN, Quadrant

R = ROOT_LEN


class MeshError(ValueError):
    """Raised for invalid coarse-mesh input."""


@dataclass(frozen=True)
class CanonicalCoordinate:
    tree: int
    coords: tuple[int, ...]


def _face_corners(d: int, f: int) -> list[int]:
    axis, side = divmod(f, 2)
    return [c for c in range(1 << d) if ((c >> axis) & 1) == side]


def _tangential(d: int, axis: int) -> list[int]:
    return [k for k in range(d) if k != axis]


def face_transform(d: int, f: int, g: int, o: int):
    """Signed permutation taking points across face ``f`` into the neighbor.

    Returns ``(perm, sign, offset)`` with ``x_B[j] = sign[j]*x_A[perm[j]] + offset[j]``.
    """
    a, sa = divmod(f, 2)
    b, sb = divmod(g, 2)
    perm, sign, off = [0] * d, [0] * d, [0] * d
    out_a = 1 if sa else -1
    in_b = 1 if sb == 0 else -1
    perm[b] = a
    sign[b] = out_a * in_b
    off[b] = R * sb - sign[b] * R * sa
    ta, tb = _tangential(d, a), _tangential(d, b)
    if d == 2:
        flips = (o & 1,)
    else:
        flips = (o & 1, (o >> 1) & 1)
        if o & 4:
            tb = tb[::-1]
    for ak, bk, fl in zip(ta, tb, flips):
        perm[bk] = ak
        sign[bk] = -1 if fl else 1
        off[bk] = R if fl else 0
    return perm, sign, off


@dataclass
class Connectivity:
    dim: int
    vertices: np.ndarray
    tree_to_vertex: np.ndarray
    tree_to_tree: np.ndarray
    tree_to_face: np.ndarray
    _perm: np.ndarray = field(init=False, repr=False)
    _sign: np.ndarray = field(init=False, repr=False)
    _off: np.ndarray = field(init=False, repr=False)
    bmask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = self.dim
        if d not in (2, 3):
            raise ValueError("only 2D and 3D connectivities are supported")
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.tree_to_vertex = np.asarray(self.tree_to_vertex, dtype=np.int64).reshape(-1, 1 << d)
        self.tree_to_tree = np.asarray(self.tree_to_tree, dtype=np.int64).reshape(-1, 2 * d)
        self.tree_to_face = np.asarray(self.tree_to_face, dtype=np.int64).reshape(-1, 2 * d)
        T = self.num_trees
        self._perm = np.zeros((T, 2 * d, d), dtype=np.int64)
        self._sign = np.zeros((T, 2 * d, d), dtype=np.int64)
        self._off = np.zeros((T, 2 * d, d), dtype=np.int64)
        for t in range(T):
            for f in range(2 * d):
                g, o = self.neighbor_face(t, f)
                p, s, c = face_transform(d, f, g, o)
                self._perm[t, f], self._sign[t, f], self._off[t, f] = p, s, c
        self.bmask = self.boundary_mask()

    @property
    def num_trees(self) -> int:
        return len(self.tree_to_tree)

    def neighbor_face(self, tree: int, face: int) -> tuple[int, int]:
        code = int(self.tree_to_face[tree, face])
        return code % (2 * self.dim), code // (2 * self.dim)

    def is_boundary(self, tree: int, face: int) -> bool:
        return int(self.tree_to_tree[tree, face]) == tree and int(self.tree_to_face[tree, face]) == face

    def boundary_mask(self) -> np.ndarray:
        """(T, 2d) boolean array of physical-boundary faces."""
        T, d2 = self.tree_to_tree.shape
        return (self.tree_to_tree == np.arange(T)[:, None]) & (self.tree_to_face == np.arange(d2)[None, :])

    # -- transforms ---------------------------------------------------------

    def transform_point(self, tree: int, face: int, x) -> tuple[int, ...]:
        p, s, c = self._perm[tree, face], self._sign[tree, face], self._off[tree, face]
        return tuple(int(s[j] * x[p[j]] + c[j]) for j in range(self.dim))

    def transform_points(self, trees: np.ndarray, faces: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Vectorized point transform; ``pts`` is (n, d) int64."""
        p = self._perm[trees, faces]
        s = self._sign[trees, faces]
        c = self._off[trees, faces]
        return s * np.take_along_axis(pts, p, axis=1) + c

    def transform_quadrants(self, trees: np.ndarray, faces: np.ndarray, coords: np.ndarray,
                            lengths: np.ndarray) -> np.ndarray:
        """Anchors of quadrants (given by anchor/length) after a face transform."""
        a = self.transform_points(trees, faces, coords)
        b = self.transform_points(trees, faces, coords + lengths[:, None])
        return np.minimum(a, b)


def transform_neighbor(conn: Connectivity, tree: int, face: int, value):
    """Express ``value`` (a Quadrant or a point) in the tree across ``face``.

    Returns ``(neighbor_tree, transformed)`` or ``None`` at a physical boundary.
    """
    if conn.is_boundary(tree, face):
        return None
    nt = int(conn.tree_to_tree[tree, face])
    if isinstance(value, Quadrant):
        h = value.length
        a = conn.transform_point(tree, face, value.coords)
        b = conn.transform_point(tree, face, tuple(c + h for c in value.coords))
        return nt, Quadrant(tuple(min(u, v) for u, v in zip(a, b)), value.level)
    return nt, conn.transform_point(tree, face, value)


def canonicalize(conn: Connectivity, tree: int, coords) -> CanonicalCoordinate:
    """Representative of a point in the smallest-index tree containing it.

    Ties inside that tree (periodic identifications) go to the
    lexicographically smallest local coordinates.
    """
    d = conn.dim
    start = (int(tree), tuple(int(c) for c in coords))
    if all(0 < c < R for c in start[1]):
        return CanonicalCoordinate(*start)
    seen = {start}
    todo = deque([start])
    while todo:
        t, x = todo.popleft()
        for f in range(2 * d):
            axis, side = divmod(f, 2)
            if x[axis] != side * R or conn.is_boundary(t, f):
                continue
            nxt = (int(conn.tree_to_tree[t, f]), conn.transform_point(t, f, x))
            if nxt not in seen:
                seen.add(nxt)
                todo.append(nxt)
    return CanonicalCoordinate(*min(seen))


# -- builders ----------------------------------------------------------------


def build_unit_cube(d: int) -> Connectivity:
    if d == 2:
        return build_brick(1, 1)
    if d == 3:
        return build_brick(1, 1, 1)
    raise ValueError("dimension must be 2 or 3")


def build_brick(nx: int, ny: int, nz: int | None = None, periodic=False, bounds=None) -> Connectivity:
    """Cartesian lattice of trees, numbered with x fastest.

    ``periodic`` is a bool or one flag per axis.  ``bounds`` is an optional
    ``(lower, upper)`` pair of corner points; by default tree ``(i, j[, k])``
    occupies the unit cell at that integer offset.
    """
    n = (nx, ny) if nz is None else (nx, ny, nz)
    d = len(n)
    if any(int(k) < 1 for k in n):
        raise ValueError(f"brick extents must be positive, got {n}")
    per = (bool(periodic),) * d if isinstance(periodic, (bool, int)) else tuple(bool(p) for p in periodic)
    if len(per) != d:
        raise ValueError("one periodic flag per axis expected")
    lo, hi = (np.zeros(d), np.array(n, float)) if bounds is None else (np.asarray(bounds[0], float), np.asarray(bounds[1], float))

    vn = [k + 1 for k in n]
    grids = np.meshgrid(*[np.linspace(lo[k], hi[k], vn[k]) for k in range(d)], indexing="ij")
    # vertex index: x fastest
    vertices = np.stack([g.transpose(*reversed(range(d))).ravel() for g in grids], axis=1)

    def vid(idx):
        out, stride = 0, 1
        for k in range(d):
            out += idx[k] * stride
            stride *= vn[k]
        return out

    def tid(idx):
        out, stride = 0, 1
        for k in range(d):
            out += idx[k] * stride
            stride *= n[k]
        return out

    T = int(np.prod(n))
    ttv = np.zeros((T, 1 << d), dtype=np.int64)
    ttt = np.zeros((T, 2 * d), dtype=np.int64)
    ttf = np.zeros((T, 2 * d), dtype=np.int64)
    for idx in np.ndindex(*reversed(n)):
        idx = tuple(reversed(idx))
        t = tid(idx)
        for c in range(1 << d):
            ttv[t, c] = vid([idx[k] + ((c >> k) & 1) for k in range(d)])
        for f in range(2 * d):
            axis, side = divmod(f, 2)
            j = list(idx)
            j[axis] += 1 if side else -1
            if 0 <= j[axis] < n[axis]:
                ttt[t, f], ttf[t, f] = tid(j), f ^ 1
            elif per[axis]:
                j[axis] %= n[axis]
                ttt[t, f], ttf[t, f] = tid(j), f ^ 1
            else:
                ttt[t, f], ttf[t, f] = t, f
    return Connectivity(d, vertices, ttv, ttt, ttf)


def _corner_jacobian(pts: np.ndarray, d: int, c: int) -> float:
    cols = []
    for k in range(d):
        e = pts[c ^ (1 << k)] - pts[c]
        cols.append(-e if (c >> k) & 1 else e)
    return float(np.linalg.det(np.stack(cols, axis=1)[:d, :d]))


def _orientation_from_match(d: int, f: int, g: int, corner_map: dict[int, int]) -> int:
    a, b = f // 2, g // 2
    ta, tb = _tangential(d, a), _tangential(d, b)
    base = _face_corners(d, f)[0]

    def tbits(corner):
        return [(corner >> k) & 1 for k in tb]

    img0 = tbits(corner_map[base])
    o = 0
    for i, ak in enumerate(ta):
        img = tbits(corner_map[base | (1 << ak)])
        moved = [j for j in range(d - 1) if img[j] != img0[j]]
        if len(moved) != 1:
            raise MeshError("faces share vertices but not as a consistent face")
        j = moved[0]
        if img0[j] == 1:
            o |= 1 << i
        if d == 3 and i == 0 and j == 1:
            o |= 4
    return o


def build_from_mesh(vertices, cubes) -> Connectivity:
    """Connectivity from a vertex list and per-cube vertex tuples (z-order corners)."""
    verts = np.asarray(vertices, dtype=float)
    if verts.ndim != 2 or len(verts) == 0:
        raise MeshError("vertices must be a non-empty list of points")
    cubes = [list(map(int, c)) for c in cubes]
    if not cubes:
        raise MeshError("at least one cube is required")
    nc = len(cubes[0])
    if nc not in (4, 8):
        raise MeshError(f"cube 0 has {nc} vertices; expected 4 or 8")
    d = 2 if nc == 4 else 3
    if verts.shape[1] < d:
        raise MeshError(f"vertices need at least {d} coordinates")
    for i, c in enumerate(cubes):
        if len(c) != nc:
            raise MeshError(f"cube {i} has {len(c)} vertices; expected {nc}")
        if len(set(c)) != nc:
            raise MeshError(f"cube {i} repeats a vertex")
        if min(c) < 0 or max(c) >= len(verts):
            raise MeshError(f"cube {i} references a vertex out of range")
        pts = verts[c][:, :d]
        if any(_corner_jacobian(pts, d, k) <= 0 for k in range(nc)):
            raise MeshError(f"cube {i} is inverted or degenerate")

    T = len(cubes)
    ttt = np.tile(np.arange(T)[:, None], (1, 2 * d))
    ttf = np.tile(np.arange(2 * d)[None, :], (T, 1))

    faces: dict[frozenset, list[tuple[int, int]]] = {}
    for t, c in enumerate(cubes):
        for f in range(2 * d):
            key = frozenset(c[k] for k in _face_corners(d, f))
            faces.setdefault(key, []).append((t, f))
    for key, sides in faces.items():
        if len(sides) > 2:
            raise MeshError(f"a face with vertices {sorted(key)} is shared by {len(sides)} cubes")
        if len(sides) == 2:
            (A, f), (B, g) = sides
            if A == B and f == g:
                continue
            vb = {cubes[B][k]: k for k in _face_corners(d, g)}
            va = {cubes[A][k]: k for k in _face_corners(d, f)}
            oab = _orientation_from_match(d, f, g, {k: vb[cubes[A][k]] for k in _face_corners(d, f)})
            oba = _orientation_from_match(d, g, f, {k: va[cubes[B][k]] for k in _face_corners(d, g)})
            ttt[A, f], ttf[A, f] = B, g + 2 * d * oab
            ttt[B, g], ttf[B, g] = A, f + 2 * d * oba

    # non-conforming contacts: partially shared faces and hanging vertices
    keys = list(faces)
    if d == 3:
        for k1, k2 in combinations(keys, 2):
            if len(k1 & k2) == 3:
                raise MeshError(f"faces {sorted(k1)} and {sorted(k2)} overlap partially")
    for key in keys:
        fc = verts[[cubes[faces[key][0][0]][k] for k in _face_corners(d, faces[key][0][1])]][:, :d]
        origin = fc[0]
        span = np.stack([fc[1 << i] - origin for i in range(d - 1)], axis=1)
        scale = np.abs(span).max()
        for v in range(len(verts)):
            if v in key:
                continue
            sol, *_ = np.linalg.lstsq(span, verts[v, :d] - origin, rcond=None)
            resid = np.linalg.norm(span @ sol - (verts[v, :d] - origin))
            eps = 1e-9
            if resid < 1e-9 * scale and np.all(sol > eps) and np.all(sol < 1 - eps):
                raise MeshError(f"vertex {v} lies inside face {sorted(key)} (non-conforming)")
    conn = Connectivity(d, verts, np.array(cubes), ttt, ttf)
    problems = validate_connectivity(conn)
    if problems:
        raise MeshError("; ".join(problems))
    return conn


def parse_mesh(text: str) -> dict:
    """Parse the ``{"vertices": [...], "cubes": [...]}`` dictionary format."""
    try:
        data = ast.literal_eval(text.strip())
    except (SyntaxError, ValueError) as exc:
        raise MeshError(f"cannot parse mesh description: {exc}") from exc
    if not isinstance(data, dict) or "vertices" not in data or "cubes" not in data:
        raise MeshError('mesh description needs "vertices" and "cubes" keys')
    return data


def load_mesh(path) -> Connectivity:
    data = parse_mesh(Path(path).read_text())
    return build_from_mesh(data["vertices"], data["cubes"])


def mesh_dict(conn: Connectivity) -> dict:
    return {"vertices": conn.vertices.tolist(), "cubes": conn.tree_to_vertex.tolist()}


def validate_connectivity(conn: Connectivity) -> list[str]:
    """Symmetry and index checks; returns a list of problems (empty if valid)."""
    d = conn.dim
    out = []
    V = len(conn.vertices)
    if conn.tree_to_vertex.size and (conn.tree_to_vertex.min() < 0 or conn.tree_to_vertex.max() >= V):
        out.append("tree_to_vertex references a missing vertex")
    rng = np.random.default_rng(0)
    for t in range(conn.num_trees):
        for f in range(2 * d):
            if conn.is_boundary(t, f):
                continue
            B = int(conn.tree_to_tree[t, f])
            g, _ = conn.neighbor_face(t, f)
            if not 0 <= B < conn.num_trees:
                out.append(f"tree {t} face {f} points at missing tree {B}")
                continue
            if int(conn.tree_to_tree[B, g]) != t or conn.neighbor_face(B, g)[0] != f:
                out.append(f"tree {t} face {f} is not mirrored by tree {B} face {g}")
                continue
            for _ in range(4):
                x = [int(v) for v in rng.integers(0, R + 1, size=d)]
                x[f // 2] = (f % 2) * R
                if conn.transform_point(B, g, conn.transform_point(t, f, x)) != tuple(x):
                    out.append(f"tree {t} face {f} transform is not inverted by tree {B} face {g}")
                    break
    return out


# -- geometry ---------------------------------------------------------------


def tree_map(conn: Connectivity, trees: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Multilinear map of reference points in [0,1]^d to physical space."""
    d = conn.dim
    trees = np.asarray(trees)
    ref = np.asarray(ref, dtype=float)
    corners = conn.vertices[conn.tree_to_vertex[trees]]  # (n, 2^d, D)
    out = np.zeros((len(trees), corners.shape[2]))
    for c in range(1 << d):
        w = np.ones(len(trees))
        for k in range(d):
            w = w * (ref[:, k] if (c >> k) & 1 else 1.0 - ref[:, k])
        out += w[:, None] * corners[:, c, :]
    return out


def affine_frames(conn: Connectivity, tol: float = 1e-12):
    """Per-tree origin (T, d) and Jacobian (T, d, d); raises if a tree is not affine."""
    d = conn.dim
    corners = conn.vertices[conn.tree_to_vertex][:, :, :d]
    origin = corners[:, 0, :]
    jac = np.stack([corners[:, 1 << k, :] - origin for k in range(d)], axis=2)
    scale = max(np.abs(corners).max(), 1.0)
    for c in range(1 << d):
        bits = np.array([(c >> k) & 1 for k in range(d)], dtype=float)
        pred = origin + jac @ bits
        bad = np.where(np.abs(pred - corners[:, c, :]).max(axis=1) > tol * scale)[0]
        if len(bad):
            raise ValueError(f"tree {int(bad[0])} is not affine (parallelogram/parallelepiped)")
    return origin, jac
