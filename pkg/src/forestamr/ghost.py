"""Face ghost layer and ghost data exchange.

Each rank determines which of its leaves touch a remote rank through a face
(its mirrors) by locating the same-size neighbor region of every leaf face
among the partition markers.  A region owned by a single remote rank makes
the leaf a mirror for that rank; a region split between ranks is refined
towards the shared face until every piece has one owner.  The mirrors are
then sent in one message per adjacent rank pair; the receiver stores them as
ghosts ordered by (owner rank, tree, Morton order).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .comm import CollectiveError
from .forest import Forest, Leaves
from .quadrant import MAX_LEVEL
from .sfc import SortedView, face_children, hypothetical_neighbors


@dataclass
class RankGhost:
    ghosts: Leaves
    owner: np.ndarray
    owner_index: np.ndarray
    global_index: np.ndarray
    proc_offsets: np.ndarray
    mirrors: np.ndarray
    mirror_lists: list[np.ndarray]
    mirror_pos: list[np.ndarray] = field(default_factory=list)

    @property
    def num_ghosts(self) -> int:
        return len(self.owner)


@dataclass
class GhostLayer:
    ranks: list[RankGhost]

    def __getitem__(self, p: int) -> RankGhost:
        return self.ranks[p]

    def adjacent_pairs(self) -> list[tuple[int, int]]:
        return [(p, r) for p, g in enumerate(self.ranks) for r, lst in enumerate(g.mirror_lists) if len(lst)]


def _mirror_pairs(forest: Forest, p: int):
    """(local leaf, remote rank) pairs for all leaves of rank ``p`` touching rank ``r != p``."""
    lv = forest.ranks[p]
    d = forest.dim
    conn = forest.conn
    mk = forest.markers()
    P = forest.size
    if P == 1 or len(lv) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    found_leaf, found_rank = [], []
    n = len(lv)
    idx_all = np.arange(n)
    for f in range(2 * d):
        nt, nc, nf, ok = hypothetical_neighbors(conn, lv.tree, lv.coords, lv.level, f)
        src = idx_all[ok]
        t, c, lvl, g = nt[ok], nc[ok], lv.level[ok], nf[ok]
        while len(src):
            lo, hi = mk.owner_range(t, c, lvl)
            single = lo == hi
            remote = single & (lo != p)
            found_leaf.append(src[remote])
            found_rank.append(lo[remote])
            split = ~single
            if not split.any():
                break
            if lvl[split].max() >= MAX_LEVEL[d]:
                raise RuntimeError("partition boundary inside a finest-level quadrant")
            kids = face_children(c[split], lvl[split], g[split], d)
            k = kids.shape[1]
            src = np.repeat(src[split], k)
            t = np.repeat(t[split], k)
            g = np.repeat(g[split], k)
            lvl = np.repeat(lvl[split] + 1, k)
            c = kids.reshape(-1, d)
    if not found_leaf:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    leaf = np.concatenate(found_leaf).astype(np.int64)
    rank = np.concatenate(found_rank).astype(np.int64)
    key = np.unique(leaf * P + rank)
    return key // P, key % P


def build_ghost(forest: Forest) -> GhostLayer:
    """Ghost layer of ``forest`` (cached on the forest, which is immutable)."""
    if "ghost" in forest._cache:
        return forest._cache["ghost"]
    P = forest.size
    d = forest.dim
    pairs = forest.comm.map(lambda p: _mirror_pairs(forest, p))

    mirror_lists = []
    outboxes = []
    for p, (leaf, rank) in enumerate(pairs):
        lists = [np.sort(leaf[rank == r]) for r in range(P)]
        mirror_lists.append(lists)
        lv = forest.ranks[p]
        outboxes.append({r: np.column_stack([lists[r], lv.take(lists[r]).pack()])
                         for r in range(P) if len(lists[r])})
    inboxes = forest.comm.exchange(outboxes, tag="ghost-build")

    ranks = []
    for p in range(P):
        parts, owners, counts = [], [], np.zeros(P, dtype=np.int64)
        for r in sorted(inboxes[p]):
            arr = inboxes[p][r]
            parts.append(arr)
            owners.append(np.full(len(arr), r, dtype=np.int64))
            counts[r] = len(arr)
        if parts:
            allg = np.concatenate(parts)
            owner = np.concatenate(owners)
            oidx = allg[:, 0]
            gl = Leaves.unpack(allg[:, 1:], d)
        else:
            owner = np.zeros(0, np.int64)
            oidx = np.zeros(0, np.int64)
            gl = Leaves.empty(d)
        mirrors = np.unique(np.concatenate([mirror_lists[p][r] for r in range(P)])) if P > 1 else np.zeros(0, np.int64)
        mirrors = mirrors.astype(np.int64)
        ranks.append(RankGhost(
            ghosts=gl, owner=owner, owner_index=oidx,
            global_index=forest.offsets[owner] + oidx if len(owner) else np.zeros(0, np.int64),
            proc_offsets=np.concatenate([[0], np.cumsum(counts)]),
            mirrors=mirrors, mirror_lists=mirror_lists[p],
            mirror_pos=[np.searchsorted(mirrors, mirror_lists[p][r]) for r in range(P)]))
    layer = GhostLayer(ranks)
    forest._cache["ghost"] = layer
    return layer


def ghost_exchange(forest: Forest, layer: GhostLayer, payload: list[np.ndarray], tag: str = "ghost") -> list[np.ndarray]:
    """Send each mirror's payload record to every rank that holds it as a ghost.

    ``payload[p]`` is indexed by rank ``p``'s local leaves; the result for
    rank ``p`` is indexed by its ghosts.
    """
    P = forest.size
    arrs = [np.asarray(x) for x in payload]
    shapes = {a.shape[1:] for a in arrs}
    if len(shapes) != 1 or len({a.dtype for a in arrs}) != 1:
        raise CollectiveError(f"ghost_exchange record sizes/dtypes differ across ranks: {sorted(map(str, shapes))}")
    for p, a in enumerate(arrs):
        if len(a) != len(forest.ranks[p]):
            raise CollectiveError(f"rank {p}: payload has {len(a)} records for {len(forest.ranks[p])} leaves")
    outboxes = [{r: arrs[p][layer[p].mirror_lists[r]] for r in range(P) if len(layer[p].mirror_lists[r])}
                for p in range(P)]
    inboxes = forest.comm.exchange(outboxes, tag=tag)
    out = []
    rec_shape = arrs[0].shape[1:]
    for p in range(P):
        g = layer[p]
        buf = np.empty((g.num_ghosts,) + rec_shape, dtype=arrs[0].dtype)
        for r, data in inboxes[p].items():
            buf[g.proc_offsets[r]:g.proc_offsets[r + 1]] = data
        out.append(buf)
    return out


@dataclass
class CombinedView:
    """Local leaves plus ghosts of one rank, in global SFC order.

    ``index[k]`` converts a combined position into the local numbering used
    everywhere else: local leaves ``0..n-1`` then ghosts ``n..n+m-1``.
    """
    view: SortedView
    index: np.ndarray
    ordered: Leaves
    leaves: Leaves
    n_local: int


def combined_view(forest: Forest, layer: GhostLayer, p: int) -> CombinedView:
    key = ("combined", p)
    if key in forest._cache:
        return forest._cache[key]
    lv = forest.ranks[p]
    g = layer[p]
    n = len(lv)
    a = int(g.proc_offsets[p])
    lower, upper = g.ghosts.take(slice(0, a)), g.ghosts.take(slice(a, None))
    leaves = Leaves.concat([lower, lv, upper], forest.dim)
    index = np.concatenate([n + np.arange(a), np.arange(n), n + a + np.arange(len(upper))]).astype(np.int64)
    cv = CombinedView(SortedView(forest.codec(), leaves.tree, leaves.coords, leaves.level), index, leaves,
                      Leaves.concat([lv, g.ghosts], forest.dim), n)
    forest._cache[key] = cv
    return cv
