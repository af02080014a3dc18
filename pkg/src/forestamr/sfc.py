"""Space-filling-curve keys and vectorized searches over sorted leaf arrays.

A key is the pair (tree, Morton index of the anchor at resolution ``res``),
ordered lexicographically.  A quadrant of level ``l`` covers the half-open
key range ``[key, key + 2**(d*(res - l)))``.  Leaves are stored in ascending
key order, which is the depth-first order of the forest.

When ``tree`` and the Morton index fit together into 63 bits the pair is
packed into one int64 for ``np.searchsorted``; otherwise it is packed into a
16-byte big-endian void scalar, which numpy compares bytewise.
"""
from __future__ import annotations

import numpy as np

from .quadrant import ROOT_LEN, morton_array


class Codec:
    def __init__(self, dim: int, num_trees: int, res: int):
        self.dim = dim
        self.res = res
        self.shift = dim * res
        tree_bits = max(1, int(num_trees).bit_length())
        self.packed64 = tree_bits + self.shift <= 62

    def morton(self, coords: np.ndarray) -> np.ndarray:
        return morton_array(coords, self.res)

    def span(self, level: np.ndarray) -> np.ndarray:
        return np.uint64(1) << (np.uint64(self.shift) - np.uint64(self.dim) * np.asarray(level, dtype=np.uint64))

    def pack(self, tree: np.ndarray, morton: np.ndarray) -> np.ndarray:
        tree = np.asarray(tree)
        if self.packed64:
            return (tree.astype(np.int64) << self.shift) + morton.astype(np.int64)
        buf = np.empty((len(tree), 2), dtype=">u8")
        buf[:, 0] = tree
        buf[:, 1] = morton
        return buf.view("V16").ravel()


class SortedView:
    """Search structure over leaves sorted by (tree, Morton)."""

    def __init__(self, codec: Codec, tree: np.ndarray, coords: np.ndarray, level: np.ndarray):
        self.codec = codec
        self.tree = np.asarray(tree, dtype=np.int64)
        self.level = np.asarray(level)
        self.n = len(self.tree)
        self.morton = codec.morton(coords) if self.n else np.zeros(0, dtype=np.uint64)
        self.end = self.morton + codec.span(self.level) if self.n else np.zeros(0, dtype=np.uint64)
        self.keys = codec.pack(self.tree, self.morton)

    def search(self, qtree: np.ndarray, qcoords: np.ndarray, qlevel: np.ndarray):
        """Locate query quadrants.

        Returns ``(container, lo, hi)``: ``container[i]`` is the position of
        the leaf equal to or containing query ``i`` (-1 if none); otherwise
        the leaves inside the query occupy positions ``lo[i]:hi[i]``.
        """
        c = self.codec
        qtree = np.asarray(qtree, dtype=np.int64)
        qm = c.morton(qcoords)
        qend = qm + c.span(qlevel)
        qk = c.pack(qtree, qm)
        lo = np.searchsorted(self.keys, qk, side="left")
        hi = np.searchsorted(self.keys, c.pack(qtree, qend), side="left")
        if self.n == 0:
            return np.full(len(qtree), -1), lo, hi
        loc = np.minimum(lo, self.n - 1)
        eq = (lo < self.n) & (self.tree[loc] == qtree) & (self.morton[loc] == qm) & (self.level[loc] <= qlevel)
        prev = np.maximum(lo - 1, 0)
        anc = (lo > 0) & (self.tree[prev] == qtree) & (self.end[prev] > qm)
        container = np.where(eq, loc, np.where(anc, prev, -1))
        return container, lo, hi


class Markers:
    """Partition boundaries: the first key of every non-empty rank."""

    def __init__(self, codec: Codec, first_tree, first_coords, nonempty_ranks):
        self.codec = codec
        self.ranks = np.asarray(nonempty_ranks, dtype=np.int64)
        if len(self.ranks):
            self.keys = codec.pack(np.asarray(first_tree), codec.morton(np.asarray(first_coords)))
        else:
            self.keys = codec.pack(np.zeros(0, np.int64), np.zeros(0, np.uint64))

    def owner_of_keys(self, tree: np.ndarray, morton: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.keys, self.codec.pack(tree, morton), side="right") - 1
        return self.ranks[np.maximum(pos, 0)]

    def owner_range(self, tree: np.ndarray, coords: np.ndarray, level: np.ndarray):
        """Owners of the first and the last fine cell of each quadrant."""
        m = self.codec.morton(coords)
        last = m + self.codec.span(level) - np.uint64(1)
        return self.owner_of_keys(tree, m), self.owner_of_keys(tree, last)


def hypothetical_neighbors(conn, tree: np.ndarray, coords: np.ndarray, level: np.ndarray, face):
    """Same-level neighbors across ``face`` (scalar or per-quadrant array).

    Returns ``(ntree, ncoords, nface, valid)`` where ``nface`` is the face of
    the neighbor quadrant that touches the source and ``valid`` is False at
    physical boundaries.
    """
    d = conn.dim
    n = len(tree)
    face = np.broadcast_to(np.asarray(face, dtype=np.int64), (n,))
    axis, side = face // 2, face % 2
    h = np.int64(ROOT_LEN) >> level.astype(np.int64)
    nc = coords.copy()
    rows = np.arange(n)
    nc[rows, axis] += np.where(side == 1, h, -h)
    outside = (nc[rows, axis] < 0) | (nc[rows, axis] >= ROOT_LEN)
    ntree = tree.astype(np.int64).copy()
    nface = face ^ 1
    valid = np.ones(n, dtype=bool)
    if outside.any():
        idx = np.where(outside)[0]
        t, f = tree[idx].astype(np.int64), face[idx]
        bnd = conn.bmask[t, f]
        valid[idx[bnd]] = False
        ntree[idx] = conn.tree_to_tree[t, f]
        nface[idx] = conn.tree_to_face[t, f] % (2 * d)
        nc[idx] = conn.transform_quadrants(t, f, nc[idx], h[idx])
        nc[idx[bnd]] = coords[idx[bnd]]
        ntree[idx[bnd]] = tree[idx[bnd]]
    return ntree, nc, nface, valid


def face_children(coords: np.ndarray, level: np.ndarray, face: np.ndarray, dim: int) -> np.ndarray:
    """The 2^(d-1) children of each quadrant that touch ``face``.

    Returns anchors with shape (n, 2^(d-1), d) in ascending child-id order,
    i.e. bit ``j`` of the slot index selects the upper half along the
    ``j``-th tangential axis.
    """
    n = len(level)
    face = np.broadcast_to(np.asarray(face, dtype=np.int64), (n,))
    h = np.int64(ROOT_LEN) >> (level.astype(np.int64) + 1)
    axis, side = face // 2, face % 2
    bits = np.zeros((n, 1 << (dim - 1), dim), dtype=np.int64)
    for a in range(dim):
        rows = axis == a
        if not rows.any():
            continue
        bits[rows, :, a] = side[rows, None]
        tang = [t for t in range(dim) if t != a]
        for k in range(1 << (dim - 1)):
            for j, t in enumerate(tang):
                bits[rows, k, t] = (k >> j) & 1
    return coords[:, None, :] + bits * h[:, None, None]
