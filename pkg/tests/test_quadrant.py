import functools
import itertools

import pytest
from hypothesis import given, strategies as st

from forestamr.quadrant import (MAX_LEVEL, ROOT_LEN, LevelOverflowError, Quadrant, child, children,
                                coordinates_of, face_neighbor, is_ancestor, is_family, is_inside_root,
                                linear_id, morton_cmp, num_subentities, opposite_face, overlaps, parent,
                                root, siblings)
from oracles import dfs_order


@st.composite
def quadrants(draw, dim=None, max_level=8):
    d = dim or draw(st.sampled_from([2, 3]))
    lvl = draw(st.integers(0, max_level))
    h = ROOT_LEN >> lvl
    coords = tuple(draw(st.integers(0, (1 << lvl) - 1)) * h for _ in range(d))
    return Quadrant(coords, lvl)


def test_child_examples():
    r = root(2)
    assert child(r, 0) == Quadrant((0, 0), 1)
    assert child(r, 3) == Quadrant((1 << 29, 1 << 29), 1)


def test_child_overflow():
    q = Quadrant((0, 0), MAX_LEVEL[2])
    with pytest.raises(LevelOverflowError):
        child(q, 0)
    with pytest.raises(ValueError):
        child(root(2), 4)


def test_parent_of_root():
    with pytest.raises(ValueError):
        parent(root(3))


@given(quadrants(max_level=7), st.integers(0, 7))
def test_parent_child_roundtrip(q, i):
    i %= 1 << q.dim
    c = child(q, i)
    assert c.level == q.level + 1
    assert parent(c) == q
    assert is_ancestor(q, c)
    assert is_family(children(q))
    assert siblings(c) == children(q)


def test_children_ascending_morton():
    for d in (2, 3):
        ks = children(root(d))
        assert all(morton_cmp(a, b) < 0 for a, b in zip(ks, ks[1:]))
        assert [linear_id(k) for k in ks] == list(range(1 << d))


def test_is_family_examples():
    q = Quadrant((1 << 29, 0), 1)
    ks = children(q)
    assert is_family(ks)
    other = child(Quadrant((0, 0), 1), 0)
    assert not is_family(ks[:3] + [other])


def test_is_family_subsets_against_predicate():
    # all leaves of a random-ish depth-3 tree: refine child 0 and child 3 further
    leaves = []
    for a in children(root(2)):
        for b in children(a):
            if b.coords[0] < (1 << 29):
                leaves.extend(children(b))
            else:
                leaves.append(b)
    for sub in itertools.combinations(leaves, 4):
        lv = {q.level for q in sub}
        pred = False
        if len(lv) == 1 and sub[0].level > 0:
            anchors = {parent(q) for q in sub}
            pred = len(anchors) == 1 and len(set(sub)) == 4 and list(sub) == sorted(
                sub, key=functools.cmp_to_key(morton_cmp))
        assert is_family(list(sub)) == pred


def test_face_neighbor_examples():
    q = Quadrant((0, 0), 1)
    assert face_neighbor(q, 1) == Quadrant((1 << 29, 0), 1)
    n = face_neighbor(q, 0)
    assert n.coords == (-(1 << 29), 0) and n.level == 1
    assert not is_inside_root(n)


@given(quadrants(), st.integers(0, 5))
def test_face_neighbor_involution(q, f):
    f %= 2 * q.dim
    assert face_neighbor(face_neighbor(q, f), opposite_face(f)) == q


def test_morton_matches_depth_first_order():
    order = dfs_order(2, 4)
    qs = [Quadrant(c, lvl) for c, lvl in order]
    shuffled = sorted(qs, key=lambda q: (q.level, q.coords))
    assert sorted(shuffled, key=functools.cmp_to_key(morton_cmp)) == qs


def test_ancestor_sorts_first_and_overlap():
    r = root(2)
    c0 = child(r, 0)
    assert morton_cmp(r, c0) < 0
    assert overlaps(r, c0) and not overlaps(c0, child(r, 1))


@given(quadrants(max_level=6))
def test_coordinates_of_properties(q):
    d = q.dim
    h = q.length
    assert coordinates_of(q, 0) == tuple(c + h // 2 for c in q.coords)
    for c in range(d + 1):
        for i in range(num_subentities(d, c)):
            x = coordinates_of(q, c, i)
            assert all(0 <= v <= ROOT_LEN for v in x)
            assert all(q.coords[k] <= x[k] <= q.coords[k] + h for k in range(d))
    with pytest.raises(ValueError):
        coordinates_of(q, d, 1 << d)


def test_coordinates_examples():
    r = root(2)
    assert coordinates_of(r, 2, 0) == (0, 0)
    assert coordinates_of(r, 0) == (1 << 29, 1 << 29)
    c3 = child(r, 3)
    assert coordinates_of(c3, 0) == ((1 << 29) + (1 << 28),) * 2
    # the shared corner of the four children is the root center
    assert coordinates_of(c3, 2, 0) == (1 << 29, 1 << 29)


def test_subentity_counts():
    assert [num_subentities(2, c) for c in range(3)] == [1, 4, 4]
    assert [num_subentities(3, c) for c in range(4)] == [1, 6, 12, 8]


def test_3d_edges_are_parallel_to_their_axis():
    r = root(3)
    for e in range(12):
        x = coordinates_of(r, 2, e)
        axis = e // 4
        assert x[axis] == 1 << 29
        assert all(x[k] in (0, ROOT_LEN) for k in range(3) if k != axis)


@given(quadrants(dim=2, max_level=6), quadrants(dim=2, max_level=6))
def test_morton_total_order_on_disjoint(a, b):
    if overlaps(a, b):
        return
    assert morton_cmp(a, b) == -morton_cmp(b, a) != 0
