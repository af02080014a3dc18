"""Shared test fixtures: random forests as oracle tuples and as library forests."""
from __future__ import annotations

import numpy as np

from forestamr.connectivity import build_brick
from forestamr.forest import Leaves, from_global, partition
from oracles import Brick, random_balanced_forest


def to_leaves(tuples, dim):
    if not tuples:
        return Leaves.empty(dim)
    return Leaves(np.array([t for t, _, _ in tuples]), np.array([c for _, c, _ in tuples]),
                  np.array([lv for _, _, lv in tuples]))


def random_brick(rng, max_trees=9, dim=2, periodic_prob=0.25):
    while True:
        n = tuple(int(x) for x in rng.integers(1, 4, dim))
        if int(np.prod(n)) <= max_trees:
            break
    per = tuple(bool(x) for x in rng.integers(0, 2, dim)) if rng.random() < periodic_prob else (False,) * dim
    return Brick(n, per), build_brick(*n, periodic=per)


def random_case(rng, P, maxlevel=5, dim=2, max_trees=9, periodic_prob=0.25, fix=True):
    """(brick, conn, oracle leaves, forest) for a random balanced forest on P ranks."""
    brick, conn = random_brick(rng, max_trees, dim, periodic_prob)
    leaves = random_balanced_forest(rng, brick, maxlevel)
    forest = from_global(conn, to_leaves(leaves, dim), P)
    if fix:
        forest, _ = partition(forest)
    return brick, conn, leaves, forest


def split(values, offsets):
    return [np.asarray(values[offsets[p]:offsets[p + 1]]) for p in range(len(offsets) - 1)]


def global_index(forest, p, local):
    """Global leaf numbers of local indices (ghosts included via the layer)."""
    from forestamr.ghost import build_ghost
    n = len(forest.ranks[p])
    layer = build_ghost(forest)
    local = np.asarray(local)
    return np.where(local < n, forest.offsets[p] + local, layer[p].global_index[np.maximum(local - n, 0)])


def balance_case(rng, P, maxlevel=5, dim=2, max_trees=9, periodic_prob=0.25):
    """Run balanced marking plus adapt on a random forest; returns (got, expected, report)."""
    from forestamr.balance import balanced_marking
    from forestamr.forest import adapt
    from oracles import balance_oracle

    brick, conn, leaves, forest = random_case(rng, P, maxlevel, dim, max_trees, periodic_prob)
    owner = np.repeat(np.arange(P), np.diff(forest.offsets))
    if rng.random() < 0.5:
        marks = rng.integers(-1, 2, len(leaves))
    else:
        marks = rng.choice([-1, 0, 1], len(leaves), p=[0.6, 0.3, 0.1])
    m, report = balanced_marking(forest, split(marks, forest.offsets))
    new, _ = adapt(forest, m)
    expected, _ = balance_oracle(leaves, marks, owner, brick)
    return new.global_leaves().key_tuples(), expected, report, brick
