"""Face iteration and per-leaf intersection tables.

Neighbors are found by constructing the same-size neighbor across each face
(transformed into the neighboring tree when needed) and binary searching it
among the rank's local leaves and ghosts.

Index convention for neighbors: ``0..n-1`` local leaves, ``n..n+m-1``
ghosts, ``BOUNDARY`` (-1) for a physical boundary and ``PAD`` (-2) for
unused slots.  Slot ``f * 2**(d-1) + k`` holds the ``k``-th neighbor across
face ``f``; a face has either one neighbor or ``2**(d-1)`` finer ones.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .forest import Forest
from .ghost import GhostLayer, build_ghost, combined_view
from .quadrant import ROOT_LEN
from .sfc import face_children, hypothetical_neighbors

BOUNDARY = -1
PAD = -2

SAME, OUTSIDE_COARSER, INSIDE_COARSER, BOUNDARY_FACE = 0, 1, 2, 3
CONFIG_NAMES = {SAME: "same", OUTSIDE_COARSER: "outside-coarser",
                INSIDE_COARSER: "inside-coarser", BOUNDARY_FACE: "boundary"}


class UnbalancedForestError(ValueError):
    pass


@dataclass
class IntersectionTable:
    nbr: np.ndarray
    nbr_face: np.ndarray
    count: np.ndarray
    config: np.ndarray
    orientation: np.ndarray

    @property
    def length(self) -> np.ndarray:
        """Number of intersections of each leaf."""
        return (self.nbr != PAD).sum(axis=1)

    @property
    def n(self) -> int:
        return len(self.nbr)


def _rank_table(forest: Forest, layer: GhostLayer, p: int) -> IntersectionTable:
    d = forest.dim
    conn = forest.conn
    lv = forest.ranks[p]
    n = len(lv)
    hf = 1 << (d - 1)
    S = 2 * d * hf
    cv = combined_view(forest, layer, p)
    cl = cv.view.level
    nbr = np.full((n, S), PAD, dtype=np.int64)
    nface = np.zeros((n, S), dtype=np.int64)
    count = np.ones((n, 2 * d), dtype=np.int64)
    config = np.full((n, 2 * d), SAME, dtype=np.int64)
    orient = np.zeros((n, 2 * d), dtype=np.int64)
    rows = np.arange(n)
    for f in range(2 * d):
        nt, nc, nf, ok = hypothetical_neighbors(conn, lv.tree, lv.coords, lv.level, f)
        h = np.int64(ROOT_LEN) >> lv.level
        cross = (lv.coords[:, f // 2] + h * (f % 2)) == (f % 2) * ROOT_LEN
        cross &= ~conn.bmask[lv.tree, f]
        orient[cross, f] = conn.tree_to_face[lv.tree[cross], f] // (2 * d)
        base = f * hf
        b = ~ok
        nbr[b, base] = BOUNDARY
        nface[b, base] = f
        config[b, f] = BOUNDARY_FACE
        idx = rows[ok]
        if not len(idx):
            continue
        cont, lo, hi = cv.view.search(nt[idx], nc[idx], lv.level[idx])
        hit = cont >= 0
        hl = cl[cont[hit]]
        diff = lv.level[idx[hit]] - hl
        if (diff > 1).any():
            i = idx[hit][diff > 1][0]
            raise UnbalancedForestError(f"rank {p} leaf {i}: face {f} neighbor is {int(diff.max())} levels coarser")
        nbr[idx[hit], base] = cv.index[cont[hit]]
        nface[idx[hit], base] = nf[idx[hit]]
        config[idx[hit], f] = np.where(diff == 1, OUTSIDE_COARSER, SAME)
        fine = idx[~hit]
        if not len(fine):
            continue
        if (hi[~hit] <= lo[~hit]).any():
            i = fine[hi[~hit] <= lo[~hit]][0]
            raise UnbalancedForestError(f"rank {p} leaf {i}: neighbor across face {f} is missing from the ghost layer")
        kids = face_children(nc[fine], lv.level[fine], nf[fine], d)
        k = kids.shape[1]
        kt = np.repeat(nt[fine], k)
        kl = np.repeat(lv.level[fine] + 1, k)
        kc, _, _ = cv.view.search(kt, kids.reshape(-1, d), kl)
        good = kc >= 0
        good[good] &= cl[kc[good]] == kl[good]
        if not good.all():
            i = np.repeat(fine, k)[~good][0]
            raise UnbalancedForestError(f"rank {p} leaf {i}: face {f} neighbors are more than one level finer")
        nbr[fine, base:base + k] = cv.index[kc].reshape(-1, k)
        nface[fine, base:base + k] = nf[fine][:, None]
        count[fine, f] = k
        config[fine, f] = INSIDE_COARSER
    return IntersectionTable(nbr, nface, count, config, orient)


def build_intersections(forest: Forest, layer: GhostLayer | None = None) -> list[IntersectionTable]:
    """Per-rank intersection tables; raises UnbalancedForestError on 2:1 violations."""
    if "table" in forest._cache:
        return forest._cache["table"]
    layer = layer or build_ghost(forest)
    tables = forest.comm.map(lambda p: _rank_table(forest, layer, p))
    forest._cache["table"] = tables
    return tables


@dataclass(frozen=True)
class FaceRecord:
    rank: int
    inside: int
    inside_face: int
    outside: tuple
    outside_face: tuple
    config: str
    orientation: int


def iterate_faces(forest: Forest, layer: GhostLayer | None, visitor: Callable[[FaceRecord], None]) -> None:
    """Call ``visitor`` once per face with at least one local side.

    Hanging faces with a local coarse side are reported once from that side
    with all fine neighbors.  When the coarse side is a ghost, each local
    fine leaf reports its own sub-face as ``outside-coarser``.
    """
    layer = layer or build_ghost(forest)
    tables = build_intersections(forest, layer)
    d = forest.dim
    hf = 1 << (d - 1)
    for p in range(forest.size):
        tb = tables[p]
        n = tb.n
        for i in range(n):
            for f in range(2 * d):
                cfg = int(tb.config[i, f])
                base = f * hf
                o = int(tb.orientation[i, f])
                j = int(tb.nbr[i, base])
                g = int(tb.nbr_face[i, base])
                if cfg == BOUNDARY_FACE:
                    visitor(FaceRecord(p, i, f, (BOUNDARY,), (f,), "boundary", 0))
                elif cfg == SAME:
                    if j >= n or (i, f) < (j, g):
                        visitor(FaceRecord(p, i, f, (j,), (g,), "same", o))
                elif cfg == OUTSIDE_COARSER:
                    if j >= n:
                        visitor(FaceRecord(p, i, f, (j,), (g,), "outside-coarser", o))
                else:
                    js = tuple(int(x) for x in tb.nbr[i, base:base + hf])
                    gs = tuple(int(x) for x in tb.nbr_face[i, base:base + hf])
                    visitor(FaceRecord(p, i, f, js, gs, "inside-coarser", o))


def adjacency(forest: Forest, layer: GhostLayer, p: int):
    """All face-adjacent (local leaf, neighbor) pairs on rank ``p``, balanced or not.

    Returns arrays ``(leaf, face, nbr)`` with ``nbr`` in local numbering.
    """
    d = forest.dim
    conn = forest.conn
    lv = forest.ranks[p]
    n = len(lv)
    cv = combined_view(forest, layer, p)
    view = cv.view
    out_i, out_f, out_j = [], [], []
    rows = np.arange(n)
    for f in range(2 * d):
        nt, nc, nf, ok = hypothetical_neighbors(conn, lv.tree, lv.coords, lv.level, f)
        idx = rows[ok]
        if not len(idx):
            continue
        cont, lo, hi = view.search(nt[idx], nc[idx], lv.level[idx])
        hit = cont >= 0
        out_i.append(idx[hit])
        out_f.append(np.full(hit.sum(), f))
        out_j.append(cv.index[cont[hit]])
        miss = ~hit
        span = (hi - lo)[miss]
        if span.sum() == 0:
            continue
        q = np.repeat(np.arange(miss.sum()), span)
        start = np.repeat(lo[miss], span)
        pos = start + (np.arange(len(q)) - np.repeat(np.cumsum(span) - span, span))
        src = idx[miss][q]
        axis, side = nf[src] // 2, nf[src] % 2
        qa = nc[src, axis]
        qh = np.int64(ROOT_LEN) >> lv.level[src]
        xa = cv.ordered.coords[pos, axis]
        xh = np.int64(ROOT_LEN) >> view.level[pos]
        touch = np.where(side == 0, xa == qa, xa + xh == qa + qh)
        out_i.append(src[touch])
        out_f.append(np.full(touch.sum(), f))
        out_j.append(cv.index[pos[touch]])
    if not out_i:
        z = np.zeros(0, np.int64)
        return z, z, z
    return np.concatenate(out_i), np.concatenate(out_f), np.concatenate(out_j)

