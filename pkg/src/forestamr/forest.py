"""Distributed forest: per-rank sorted leaf arrays, adaptation and partitioning."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .comm import Transport
from .connectivity import Connectivity
from .quadrant import MAX_LEVEL, ROOT_LEN, LevelOverflowError, Quadrant, child_ids_array, morton_decode
from .sfc import Codec, Markers, SortedView


class UnbalancedMarkingError(ValueError):
    """An adaptation would violate 2:1 face balance."""


@dataclass
class Leaves:
    tree: np.ndarray
    coords: np.ndarray
    level: np.ndarray

    def __post_init__(self):
        self.tree = np.asarray(self.tree, dtype=np.int64)
        self.level = np.asarray(self.level, dtype=np.int64)
        coords = np.asarray(self.coords, dtype=np.int64)
        self.coords = coords if coords.ndim == 2 else coords.reshape(len(self.tree), -1)

    def __len__(self) -> int:
        return len(self.tree)

    @classmethod
    def empty(cls, dim: int) -> "Leaves":
        return cls(np.zeros(0, np.int64), np.zeros((0, dim), np.int64), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, parts: list["Leaves"], dim: int) -> "Leaves":
        if not parts:
            return cls.empty(dim)
        return cls(np.concatenate([p.tree for p in parts]),
                   np.concatenate([p.coords for p in parts]).reshape(-1, dim),
                   np.concatenate([p.level for p in parts]))

    def take(self, idx) -> "Leaves":
        return Leaves(self.tree[idx], self.coords[idx], self.level[idx])

    def quadrant(self, i: int) -> tuple[int, Quadrant]:
        return int(self.tree[i]), Quadrant(tuple(int(c) for c in self.coords[i]), int(self.level[i]))

    def pack(self) -> np.ndarray:
        return np.column_stack([self.tree, self.coords, self.level])

    @classmethod
    def unpack(cls, arr: np.ndarray, dim: int) -> "Leaves":
        arr = np.asarray(arr, dtype=np.int64).reshape(-1, dim + 2)
        return cls(arr[:, 0], arr[:, 1:1 + dim], arr[:, 1 + dim])

    def key_tuples(self) -> list[tuple]:
        return [(int(t), tuple(int(c) for c in x), int(lv)) for t, x, lv in zip(self.tree, self.coords, self.level)]


class Forest:
    """Mesh state across all simulated ranks.

    ``offsets[p]`` is the global index of rank ``p``'s first leaf.  A new
    Forest is created by every adapt/partition; instances are not mutated.
    """

    def __init__(self, conn: Connectivity, comm: Transport, ranks: list[Leaves]):
        if len(ranks) != comm.size:
            raise ValueError("one leaf array per rank expected")
        self.conn = conn
        self.comm = comm
        self.ranks = ranks
        self.dim = conn.dim
        # replicated layout metadata: counts, deepest level, first leaf of each rank
        meta = comm.allgather([(len(lv), int(lv.level.max()) if len(lv) else -1,
                                (int(lv.tree[0]), lv.coords[0].copy()) if len(lv) else None)
                               for lv in ranks], tag="layout")
        counts = np.array([m[0] for m in meta], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self.max_level = max(0, max(m[1] for m in meta))
        self._first = [m[2] for m in meta]
        self._cache: dict = {}

    @property
    def size(self) -> int:
        return self.comm.size

    @property
    def num_leaves(self) -> int:
        return int(self.offsets[-1])

    def local_count(self, p: int) -> int:
        return len(self.ranks[p])

    def global_leaves(self) -> Leaves:
        return Leaves.concat(self.ranks, self.dim)

    def codec(self) -> Codec:
        if "codec" not in self._cache:
            res = min(MAX_LEVEL[self.dim], self.max_level + 1)
            self._cache["codec"] = Codec(self.dim, self.conn.num_trees, res)
        return self._cache["codec"]

    def markers(self) -> Markers:
        if "markers" not in self._cache:
            ne = [p for p, f in enumerate(self._first) if f is not None]
            ft = np.array([self._first[p][0] for p in ne], dtype=np.int64)
            fc = np.array([self._first[p][1] for p in ne], dtype=np.int64).reshape(-1, self.dim)
            self._cache["markers"] = Markers(self.codec(), ft, fc, ne)
        return self._cache["markers"]

    def view(self, p: int) -> SortedView:
        key = ("view", p)
        if key not in self._cache:
            lv = self.ranks[p]
            self._cache[key] = SortedView(self.codec(), lv.tree, lv.coords, lv.level)
        return self._cache[key]

    def with_ranks(self, ranks: list[Leaves]) -> "Forest":
        return Forest(self.conn, self.comm, ranks)


def equal_offsets(N: int, P: int) -> np.ndarray:
    """Target offsets floor(p*N/P) for p = 0..P."""
    return np.array([(p * N) // P for p in range(P + 1)], dtype=np.int64)


def new_uniform(conn: Connectivity, level: int, P: int = 1, comm: Transport | None = None,
                threaded: bool = False) -> Forest:
    d = conn.dim
    if not 0 <= level <= MAX_LEVEL[d]:
        raise LevelOverflowError(f"level {level} exceeds the maximum {MAX_LEVEL[d]}")
    comm = comm or Transport(P, threaded=threaded)
    per_tree = 1 << (d * level)
    N = conn.num_trees * per_tree
    off = equal_offsets(N, comm.size)

    def build(p):
        g = np.arange(off[p], off[p + 1], dtype=np.int64)
        tree = g // per_tree
        coords = morton_decode((g % per_tree).astype(np.uint64), d, level)
        return Leaves(tree, coords, np.full(len(g), level, dtype=np.int64))

    return Forest(conn, comm, comm.map(build))


# -- adaptation --------------------------------------------------------------

KEEP, REFINED, COARSENED = 0, 1, 2


@dataclass
class AdaptEvent:
    rank: int
    tree: int
    kind: str
    parent: Quadrant
    children: list[Quadrant]
    old: list[int]
    new: list[int]


@dataclass
class AdaptRecord:
    """Per rank: for every new leaf the old source index and the change kind.

    For a refined child the source is its parent; for a coarsened parent the
    source is the first child and the family occupies ``2**d`` consecutive
    old indices.
    """
    dim: int
    source: list[np.ndarray]
    kind: list[np.ndarray]

    def transfer(self, data: list[np.ndarray], volumes: list[np.ndarray] | None = None) -> list[np.ndarray]:
        """Copy data to children; average (volume-weighted if given) into parents."""
        nc = 1 << self.dim
        out = []
        for p, (src, kind) in enumerate(zip(self.source, self.kind)):
            u = np.asarray(data[p])
            new = u[src].astype(float if u.dtype.kind == "f" else u.dtype, copy=True)
            co = np.where(kind == COARSENED)[0]
            if len(co):
                fam = src[co][:, None] + np.arange(nc)[None, :]
                if volumes is None:
                    new[co] = u[fam].mean(axis=1)
                else:
                    w = np.asarray(volumes[p])[fam]
                    wshape = w.shape + (1,) * (u.ndim - 1)
                    new[co] = (u[fam] * w.reshape(wshape)).sum(axis=1) / w.sum(axis=1).reshape((-1,) + (1,) * (u.ndim - 1))
            out.append(new)
        return out


def complete_families(lv: Leaves, dim: int) -> np.ndarray:
    """Boolean mask of local leaves that start a complete local family."""
    n = len(lv)
    nc = 1 << dim
    start = np.zeros(n, dtype=bool)
    if n < nc:
        return start
    cid = child_ids_array(lv.coords, lv.level)
    lvl = lv.level
    plen = np.int64(ROOT_LEN) >> np.maximum(lvl - 1, 0)
    pc = lv.coords & ~(plen - 1)[:, None]
    m = n - nc + 1
    ok = (lvl[:m] >= 1) & (cid[:m] == 0)
    for k in range(1, nc):
        ok &= (lvl[k:k + m] == lvl[:m]) & (lv.tree[k:k + m] == lv.tree[:m]) & (cid[k:k + m] == k)
        ok &= (pc[k:k + m] == pc[:m]).all(axis=1)
    start[:m] = ok
    return start


def _adapt_rank(p: int, lv: Leaves, m: np.ndarray, dim: int):
    n = len(lv)
    nc = 1 << dim
    m = np.asarray(m, dtype=np.int64)
    if len(m) != n:
        raise ValueError(f"rank {p}: marking has {len(m)} entries for {n} leaves")
    refine = m > 0
    if refine.any() and lv.level[refine].max() >= MAX_LEVEL[dim]:
        i = int(np.where(refine & (lv.level >= MAX_LEVEL[dim]))[0][0])
        raise LevelOverflowError(f"rank {p} leaf {i} is at the maximum level and cannot be refined")
    start = complete_families(lv, dim)
    if n >= nc:
        allc = np.zeros(n, dtype=bool)
        s = np.where(start)[0]
        if len(s):
            fam = s[:, None] + np.arange(nc)[None, :]
            allc[s] = (m[fam] < 0).all(axis=1)
        start = start & allc
    member = np.zeros(n, dtype=bool)
    s = np.where(start)[0]
    if len(s):
        member[(s[:, None] + np.arange(1, nc)[None, :]).ravel()] = True
    count = np.where(refine, nc, np.where(member, 0, 1))
    src = np.repeat(np.arange(n), count)
    kind = np.where(refine[src], REFINED, np.where(start[src], COARSENED, KEEP))
    level = lv.level[src].copy()
    coords = lv.coords[src].copy()
    tree = lv.tree[src].copy()
    ref = np.where(kind == REFINED)[0]
    if len(ref):
        k = (ref - np.searchsorted(src, src[ref], side="left")).astype(np.int64)
        h = np.int64(ROOT_LEN) >> (level[ref] + 1)
        for a in range(dim):
            coords[ref, a] += ((k >> a) & 1) * h
        level[ref] += 1
    co = np.where(kind == COARSENED)[0]
    if len(co):
        level[co] -= 1
        plen = np.int64(ROOT_LEN) >> level[co]
        coords[co] &= ~(plen - 1)[:, None]
    return Leaves(tree, coords, level), src, kind


def adapt(forest: Forest, marking: list[np.ndarray], callback: Callable[[AdaptEvent], None] | None = None,
          check_balance: bool = True) -> tuple[Forest, AdaptRecord]:
    """Refine leaves marked +1 by one level and coarsen complete local families marked -1.

    ``marking`` is one array per rank aligned with the local leaves.
    Families split across ranks, or only partly marked, are kept.  With
    ``check_balance`` the result is verified to be 2:1 face balanced and an
    UnbalancedMarkingError names the first violating face.
    """
    d = forest.dim
    if len(marking) != forest.size:
        raise ValueError("one marking array per rank expected")
    res = forest.comm.map(lambda p: _adapt_rank(p, forest.ranks[p], marking[p], d))
    new = Forest(forest.conn, forest.comm, [r[0] for r in res])
    record = AdaptRecord(d, [r[1] for r in res], [r[2] for r in res])
    if callback is not None:
        _fire_callbacks(forest, new, record, callback)
    if check_balance:
        from .balance import check_balanced
        from .ghost import build_ghost
        bad = check_balanced(new, build_ghost(new))
        if bad:
            v = bad[0]
            raise UnbalancedMarkingError(
                f"{len(bad)} face(s) violate 2:1 balance after adapt; first on rank {v.rank}: "
                f"leaf {v.leaf} (level {v.level}) vs level {v.other_level} across face {v.face}; "
                f"run balanced_marking first")
    return new, record


def _fire_callbacks(old: Forest, new: Forest, record: AdaptRecord, callback):
    nc = 1 << old.dim
    for p in range(old.size):
        src, kind = record.source[p], record.kind[p]
        lo, ln = old.ranks[p], new.ranks[p]
        i = 0
        while i < len(src):
            if kind[i] == REFINED:
                t, parent = lo.quadrant(int(src[i]))
                kids = [ln.quadrant(i + k)[1] for k in range(nc)]
                callback(AdaptEvent(p, t, "refine", parent, kids, [int(src[i])], list(range(i, i + nc))))
                i += nc
                continue
            if kind[i] == COARSENED:
                t, parent = ln.quadrant(i)
                s = int(src[i])
                kids = [lo.quadrant(s + k)[1] for k in range(nc)]
                callback(AdaptEvent(p, t, "coarsen", parent, kids, list(range(s, s + nc)), [i]))
            i += 1


# -- partitioning ------------------------------------------------------------


@dataclass
class MigrationRecord:
    old_offsets: np.ndarray
    new_offsets: np.ndarray
    transfers: list[tuple[int, int, int]] = field(default_factory=list)

    @classmethod
    def from_offsets(cls, old, new) -> "MigrationRecord":
        old, new = np.asarray(old), np.asarray(new)
        P = len(old) - 1
        tr = []
        for s in range(P):
            for q in range(P):
                c = min(old[s + 1], new[q + 1]) - max(old[s], new[q])
                if c > 0:
                    tr.append((s, q, int(c)))
        return cls(old, new, tr)


def migrate(comm: Transport, record: MigrationRecord, data: list[np.ndarray], tag: str = "migrate") -> list[np.ndarray]:
    """Move per-leaf data from the old to the new partition."""
    old, new = record.old_offsets, record.new_offsets
    P = comm.size
    outboxes: list[dict] = [{} for _ in range(P)]
    keep = [None] * P
    for s, q, _ in record.transfers:
        lo = max(old[s], new[q]) - old[s]
        hi = min(old[s + 1], new[q + 1]) - old[s]
        part = np.asarray(data[s])[lo:hi]
        if s == q:
            keep[s] = part
        else:
            outboxes[s][q] = part
    inboxes = comm.exchange(outboxes, tag)
    out = []
    for q in range(P):
        pieces = {s: v for s, v in inboxes[q].items()}
        if keep[q] is not None:
            pieces[q] = keep[q]
        arrs = [pieces[s] for s in sorted(pieces)]
        if arrs:
            out.append(np.concatenate(arrs))
        else:
            ref = np.asarray(data[0])
            out.append(np.zeros((0,) + ref.shape[1:], dtype=ref.dtype))
    return out


def _weighted_offsets(forest: Forest, weights: list[np.ndarray]) -> np.ndarray:
    P = forest.size
    w = [np.asarray(x, dtype=np.int64) for x in weights]
    if any(len(x) != len(lv) for x, lv in zip(w, forest.ranks)):
        raise ValueError("one weight per local leaf expected")
    if any((x < 0).any() for x in w):
        raise ValueError("weights must be nonnegative")
    totals = forest.comm.allgather([int(x.sum()) for x in w], tag="partition-weights")
    W = sum(totals)
    if W == 0:
        return equal_offsets(forest.num_leaves, P)
    start = np.concatenate([[0], np.cumsum(totals)])

    def dest_counts(p):
        S = start[p] + np.concatenate([[0], np.cumsum(w[p])[:-1]]) if len(w[p]) else np.zeros(0, np.int64)
        dest = np.minimum(((2 * S + w[p]) * P) // (2 * W), P - 1)
        return np.bincount(dest, minlength=P)

    counts = forest.comm.allgather(forest.comm.map(dest_counts), tag="partition-cuts")
    per_dest = np.sum(counts, axis=0)
    return np.concatenate([[0], np.cumsum(per_dest)]).astype(np.int64)


def _family_corrected_offsets(forest: Forest, target: np.ndarray) -> np.ndarray:
    """Move every target boundary that splits a complete family past that family.

    The rank holding the family's first sibling receives the rest.  Two
    collectives: an allgather of per-rank boundary halos (at most 2^d - 1
    leaves from each end) and an allgather of the corrections each rank
    computed for the boundaries falling into its range.
    """
    d = forest.dim
    nc = 1 << d
    P = forest.size
    old = forest.offsets
    N = forest.num_leaves

    def halo(p):
        lv = forest.ranks[p]
        n = len(lv)
        idx = np.unique(np.concatenate([np.arange(min(n, nc - 1)), np.arange(max(0, n - nc + 1), n)])).astype(np.int64)
        return old[p] + idx, lv.take(idx).pack()

    halos = forest.comm.allgather(forest.comm.map(halo), tag="family-halo")

    def corrections(p):
        lv = forest.ranks[p]
        table: dict[int, np.ndarray] = {}
        for gi, rows in halos:
            for g, r in zip(gi, rows):
                table[int(g)] = r
        out = {}
        for q in range(1, P):
            b = int(target[q])
            if not (old[p] <= b < old[p + 1]) or b == 0 or b >= N:
                continue

            def leaf(g):
                if old[p] <= g < old[p + 1]:
                    i = g - old[p]
                    return np.concatenate([[lv.tree[i]], lv.coords[i], [lv.level[i]]])
                return table.get(g)

            row = leaf(b)
            lvl = int(row[-1])
            if lvl == 0:
                continue
            shift = 30 - lvl
            k = sum(((int(row[1 + a]) >> shift) & 1) << a for a in range(d))
            s = b - k
            if k == 0 or s < 0 or s + nc > N:
                continue
            fam = [leaf(g) for g in range(s, s + nc)]
            if any(f is None for f in fam):
                continue
            plen = ROOT_LEN >> (lvl - 1)
            parent = [int(row[1 + a]) & ~(plen - 1) for a in range(d)]
            good = True
            for j, f in enumerate(fam):
                cj = sum(((int(f[1 + a]) >> shift) & 1) << a for a in range(d))
                if int(f[0]) != int(row[0]) or int(f[-1]) != lvl or cj != j or \
                        [int(f[1 + a]) & ~(plen - 1) for a in range(d)] != parent:
                    good = False
                    break
            if good:
                out[q] = s + nc
        return out

    fixes = forest.comm.allgather(forest.comm.map(corrections), tag="family-fix")
    new = np.array(target, dtype=np.int64).copy()
    for fx in fixes:
        for q, v in fx.items():
            new[q] = v
    return new


def _apply_offsets(forest: Forest, new_offsets: np.ndarray) -> tuple[Forest, MigrationRecord]:
    record = MigrationRecord.from_offsets(forest.offsets, new_offsets)
    packed = migrate(forest.comm, record, [lv.pack() for lv in forest.ranks], tag="migrate-leaves")
    ranks = [Leaves.unpack(a, forest.dim) for a in packed]
    return Forest(forest.conn, forest.comm, ranks), record


def partition(forest: Forest, weights: list[np.ndarray] | None = None,
              fix_families: bool = True) -> tuple[Forest, MigrationRecord]:
    """Repartition along the space-filling curve.

    Unweighted: rank ``p`` starts at ``floor(p*N/P)``.  Weighted: leaf ``i``
    goes to the rank whose share of the total weight contains the midpoint
    of its prefix-sum interval.
    """
    if weights is None:
        target = equal_offsets(forest.num_leaves, forest.size)
    else:
        target = _weighted_offsets(forest, weights)
    if fix_families:
        target = _family_corrected_offsets(forest, target)
    return _apply_offsets(forest, target)


def fix_family_splits(forest: Forest) -> tuple[Forest, MigrationRecord]:
    return _apply_offsets(forest, _family_corrected_offsets(forest, forest.offsets))


# -- validation --------------------------------------------------------------


@dataclass
class Diagnostic:
    kind: str
    message: str
    rank: int | None = None
    tree: int | None = None
    index: int | None = None


def validate(forest: Forest) -> list[Diagnostic]:
    """Check the forest invariants; an empty list means valid."""
    out: list[Diagnostic] = []
    d = forest.dim
    P = forest.size
    counts = [len(lv) for lv in forest.ranks]
    off = forest.offsets
    if off[0] != 0:
        out.append(Diagnostic("offsets", f"O_0 = {off[0]} is not 0"))
    for p in range(P):
        if off[p + 1] - off[p] != counts[p]:
            out.append(Diagnostic("offsets", f"gap or overlap: rank {p} holds {counts[p]} leaves "
                                             f"but its range is [{off[p]}, {off[p + 1]})", rank=p))
        if off[p + 1] < off[p]:
            out.append(Diagnostic("offsets", f"offsets decrease at rank {p}", rank=p))
    if off[-1] != sum(counts):
        out.append(Diagnostic("offsets", f"O_P = {off[-1]} differs from N = {sum(counts)}"))

    res = MAX_LEVEL[d]
    for p, lv in enumerate(forest.ranks):
        for i in np.where((lv.level < 0) | (lv.level > MAX_LEVEL[d]))[0]:
            out.append(Diagnostic("level", f"level {lv.level[i]} out of range", p, int(lv.tree[i]), int(i)))
        for i in np.where((lv.tree < 0) | (lv.tree >= forest.conn.num_trees))[0]:
            out.append(Diagnostic("tree", f"tree {lv.tree[i]} does not exist", p, int(lv.tree[i]), int(i)))
        if out:
            return out
        h = np.int64(ROOT_LEN) >> lv.level
        bad = ((lv.coords % h[:, None]) != 0).any(axis=1) | (lv.coords < 0).any(axis=1) | \
              ((lv.coords + h[:, None]) > ROOT_LEN).any(axis=1)
        for i in np.where(bad)[0]:
            out.append(Diagnostic("coords", f"anchor {tuple(lv.coords[i])} invalid for level {lv.level[i]}",
                                  p, int(lv.tree[i]), int(i)))
    if out:
        return out

    g = forest.global_leaves()
    codec = Codec(d, forest.conn.num_trees, res)
    m = codec.morton(g.coords)
    end = m + codec.span(g.level)
    rank_of = np.repeat(np.arange(P), counts)
    local_idx = np.arange(len(g)) - off[rank_of] if len(g) else np.zeros(0, np.int64)
    if len(g) > 1:
        same = g.tree[1:] == g.tree[:-1]
        order_bad = (g.tree[1:] < g.tree[:-1]) | (same & (m[1:] < end[:-1]))
        for i in np.where(order_bad)[0] + 1:
            kind = "overlap" if g.tree[i] == g.tree[i - 1] and m[i] >= m[i - 1] else "order"
            out.append(Diagnostic(kind, f"leaf {local_idx[i]} of tree {g.tree[i]} overlaps or precedes its predecessor",
                                  int(rank_of[i]), int(g.tree[i]), int(local_idx[i])))
    if out:
        return out
    full = np.uint64(1) << np.uint64(d * res)
    vol = codec.span(g.level)
    for t in range(forest.conn.num_trees):
        sel = g.tree == t
        total = int(vol[sel].sum(dtype=np.uint64)) if sel.any() else 0
        if total != int(full):
            out.append(Diagnostic("coverage", f"tree {t} is not covered exactly by its leaves", tree=t))
    return out


def from_global(conn: Connectivity, leaves: Leaves, P: int = 1, offsets=None, comm: Transport | None = None,
                threaded: bool = False) -> Forest:
    """Distribute a globally sorted leaf array; default cuts follow ``floor(p*N/P)``."""
    comm = comm or Transport(P, threaded=threaded)
    off = equal_offsets(len(leaves), comm.size) if offsets is None else np.asarray(offsets, dtype=np.int64)
    return Forest(conn, comm, [leaves.take(slice(int(off[p]), int(off[p + 1]))) for p in range(comm.size)])
