import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forestamr.connectivity import (MeshError, build_brick, build_from_mesh, build_unit_cube, canonicalize,
                                    load_mesh, mesh_dict, parse_mesh, transform_neighbor, tree_map,
                                    validate_connectivity)
from forestamr.quadrant import ROOT_LEN as R

THREE_CUBES = """
{ "vertices": [ [0, 0], [0.5, 0],
                [1, 0], [0.5, 0.5],
                [1, 1], [1, 0.5],
                [0, 1] ],
  "cubes": [ [0, 1, 6, 3], [1, 2, 3, 5], [3, 5, 6, 4] ] }
"""


def interior_pairs(conn):
    out = set()
    for t in range(conn.num_trees):
        for f in range(2 * conn.dim):
            if not conn.is_boundary(t, f):
                g, _ = conn.neighbor_face(t, f)
                out.add(frozenset([(t, f), (int(conn.tree_to_tree[t, f]), g)]))
    return out


def test_brick_counts():
    c = build_brick(2, 2)
    assert c.num_trees == 4
    assert len(interior_pairs(c)) == 4
    assert int(c.bmask.sum()) == 8
    assert build_brick(16, 16).num_trees == 256
    assert validate_connectivity(build_brick(3, 2, 2, periodic=(True, False, True))) == []


def test_brick_zero_extent():
    with pytest.raises(ValueError):
        build_brick(0, 2)


def test_periodic_unit_torus():
    c = build_brick(1, 1, periodic=True)
    for f in range(4):
        assert not c.is_boundary(0, f)
        assert int(c.tree_to_tree[0, f]) == 0 and c.neighbor_face(0, f)[0] == f ^ 1
    assert canonicalize(c, 0, (R, R)) == canonicalize(c, 0, (0, 0))
    assert canonicalize(c, 0, (R, R)).coords == (0, 0)


def test_unit_cube():
    for d in (2, 3):
        c = build_unit_cube(d)
        assert c.num_trees == 1 and c.bmask.all()


def test_transform_example():
    c = build_brick(2, 1)
    assert transform_neighbor(c, 0, 1, (R, 123)) == (1, (0, 123))
    assert transform_neighbor(c, 0, 0, (0, 5)) is None


def test_three_cube_mesh(tmp_path):
    p = tmp_path / "mesh.txt"
    p.write_text(THREE_CUBES)
    c = load_mesh(p)
    assert c.num_trees == 3
    assert validate_connectivity(c) == []
    pairs = interior_pairs(c)
    # pairwise shared faces of the listed vertex tuples: {1,3}, {3,5} and {3,6}
    shared = set()
    cubes = parse_mesh(THREE_CUBES)["cubes"]
    for a, b in itertools.combinations(range(3), 2):
        if len(set(cubes[a]) & set(cubes[b])) == 2:
            shared.add(frozenset([a, b]))
    assert {frozenset(t for t, _ in pr) for pr in pairs} == shared
    assert len(pairs) == 3


def test_mesh_errors():
    with pytest.raises(MeshError, match="cube 0"):
        build_from_mesh([[0, 0], [1, 0], [0, 1], [1, 1]], [[1, 0, 2, 3]])
    with pytest.raises(MeshError):
        build_from_mesh([[0, 0], [1, 0], [0, 1], [1, 1]], [[0, 0, 2, 3]])
    with pytest.raises(MeshError):
        parse_mesh("not a dict")
    # hanging vertex: a big square next to two small ones
    verts = [[0, 0], [1, 0], [0, 1], [1, 1], [2, 0], [2, 0.5], [1, 0.5], [2, 1]]
    with pytest.raises(MeshError, match="non-conforming"):
        build_from_mesh(verts, [[0, 1, 2, 3], [1, 4, 6, 5], [6, 5, 3, 7]])


def test_two_squares_and_single():
    c = build_from_mesh([[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [2, 1]], [[0, 1, 3, 4], [1, 2, 4, 5]])
    assert interior_pairs(c) == {frozenset([(0, 1), (1, 0)])}
    assert c.neighbor_face(0, 1) == (0, 0)
    single = build_from_mesh([[0, 0], [1, 0], [0, 1], [1, 1]], [[0, 1, 2, 3]])
    assert single.bmask.all()


def test_brick_roundtrip_through_mesh_dict():
    b = build_brick(3, 2)
    m = mesh_dict(b)
    c = build_from_mesh(m["vertices"], m["cubes"])
    assert interior_pairs(c) == interior_pairs(b)
    assert (c.tree_to_face == b.tree_to_face).all()


# rotations of the unit square as z-order corner permutations
ROT2 = [[0, 1, 2, 3], [1, 3, 0, 2], [3, 2, 1, 0], [2, 0, 3, 1]]


@pytest.mark.parametrize("face", range(4))
@pytest.mark.parametrize("rot", range(4))
def test_all_2d_orientations_match_geometry(face, rot):
    """Tree B glued to face ``face`` of the unit square, with its corner list rotated."""
    axis, side = divmod(face, 2)
    shift = np.zeros(2)
    shift[axis] = 1.0 if side else -1.0
    base = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], float)
    verts = np.concatenate([base, base + shift])
    cubeB = [4 + k for k in ROT2[rot]]
    # merge duplicated vertices so the shared face is recognised
    uniq, inv = np.unique(np.round(verts, 9), axis=0, return_inverse=True)
    inv = inv.ravel()
    cubes = [[int(inv[k]) for k in range(4)], [int(inv[k]) for k in cubeB]]
    c = build_from_mesh(uniq, cubes)
    assert validate_connectivity(c) == []
    assert not c.is_boundary(0, face)
    rng = np.random.default_rng(face * 4 + rot)
    for _ in range(20):
        x = [int(v) for v in rng.integers(0, R + 1, 2)]
        x[axis] = side * R
        nt, y = transform_neighbor(c, 0, face, tuple(x))
        pa = tree_map(c, np.array([0]), np.array([x]) / R)
        pb = tree_map(c, np.array([nt]), np.array([y]) / R)
        assert np.allclose(pa, pb, atol=1e-9)
        g, _ = c.neighbor_face(0, face)
        assert c.transform_point(nt, g, y) == tuple(x)


def test_3d_mesh_with_rotated_neighbor():
    base = np.array([[i & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)], float)
    verts = np.concatenate([base, base + [1, 0, 0]])
    # second cube: rotate by 90 degrees about the x axis (y -> z, z -> -y)
    order = []
    for i in range(8):
        a, b, cc = i & 1, (i >> 1) & 1, (i >> 2) & 1
        target = np.array([1 + a, 1 - cc, b], float)
        order.append(int(np.where((verts == target).all(axis=1))[0][-1]))
    uniq, inv = np.unique(verts, axis=0, return_inverse=True)
    inv = inv.ravel()
    c = build_from_mesh(uniq, [[int(inv[k]) for k in range(8)], [int(inv[k]) for k in order]])
    assert validate_connectivity(c) == []
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = [R] + [int(v) for v in rng.integers(0, R + 1, 2)]
        nt, y = transform_neighbor(c, 0, 1, tuple(x))
        assert np.allclose(tree_map(c, np.array([0]), np.array([x]) / R),
                           tree_map(c, np.array([nt]), np.array([y]) / R), atol=1e-9)


def test_canonicalize_fig1():
    c = build_brick(2, 2)
    assert canonicalize(c, 3, (0, 0)).tree == 0
    assert canonicalize(c, 3, (0, 0)).coords == (R, R)
    assert canonicalize(c, 3, (R, R)).tree == 3
    assert canonicalize(c, 2, (R // 2, R // 2)).coords == (R // 2, R // 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.booleans(), st.integers(0, 2 ** 30), st.integers(0, 3),
       st.integers(0, 100))
def test_canonicalize_orbit_invariant(nx, ny, per, a, corner, seed):
    c = build_brick(nx, ny, periodic=per)
    rng = np.random.default_rng(seed)
    t = int(rng.integers(0, c.num_trees))
    x = [a, (corner & 1) * R] if corner < 2 else [(corner & 1) * R, a]
    can = canonicalize(c, t, x)
    assert canonicalize(c, can.tree, can.coords) == can
    for f in range(4):
        axis, side = divmod(f, 2)
        if x[axis] == side * R and not c.is_boundary(t, f):
            nt, y = transform_neighbor(c, t, f, tuple(x))
            assert canonicalize(c, nt, y) == can
