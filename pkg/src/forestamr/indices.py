"""Global entity ids, persistent indices and consecutive leaf index sets.

An entity of codimension ``c > 0`` (face, edge, vertex) is identified by the
midpoint of the entity in tree coordinates, rewritten into the tree with the
smallest index that contains it, plus the tag ``tree*(d+1) + c``.  Elements
use their global leaf number instead, split into 31-bit pieces over the
coordinate slots, with the negative tag ``-(d+1)``.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .connectivity import canonicalize
from .forest import Forest
from .quadrant import coordinates_of, num_subentities

EntityId = tuple

_SLOT = (1 << 31) - 1


def element_tag(dim: int) -> int:
    return -(dim + 1)


def entity_id(forest: Forest, rank: int, leaf: int, codim: int, sub: int = 0) -> EntityId:
    d = forest.dim
    if codim == 0:
        g = int(forest.offsets[rank]) + leaf
        slots = [(g >> (31 * k)) & _SLOT for k in range(d)]
        return (*slots, element_tag(d))
    tree, q = forest.ranks[rank].quadrant(leaf)
    x = coordinates_of(q, codim, sub)
    cc = canonicalize(forest.conn, tree, x)
    return (*cc.coords, cc.tree * (d + 1) + codim)


def element_key(forest: Forest, rank: int, leaf: int) -> EntityId:
    """Geometric element key (volume center, codim 0); stable while the leaf exists."""
    d = forest.dim
    tree, q = forest.ranks[rank].quadrant(leaf)
    return (*coordinates_of(q, 0), tree * (d + 1))


def entity_keys(forest: Forest, rank: int, codim: int) -> list[list[EntityId]]:
    """Per local leaf, the ids of its sub-entities of ``codim`` (elements by geometry)."""
    d = forest.dim
    cache: dict = {}
    out = []
    lv = forest.ranks[rank]
    for i in range(len(lv)):
        if codim == 0:
            out.append([element_key(forest, rank, i)])
            continue
        tree, q = lv.quadrant(i)
        ids = []
        for s in range(num_subentities(d, codim)):
            x = coordinates_of(q, codim, s)
            k = (tree, x)
            if k not in cache:
                cc = canonicalize(forest.conn, tree, x)
                cache[k] = (*cc.coords, cc.tree * (d + 1) + codim)
            ids.append(cache[k])
        out.append(ids)
    return out


@dataclass
class PersistentIndexSet:
    """Rank-local indices that survive adaptation as long as the entity exists.

    Freed indices are recycled lowest first.
    """
    dim: int
    maps: dict = field(default_factory=dict)
    free: dict = field(default_factory=dict)
    next_index: dict = field(default_factory=dict)

    def __post_init__(self):
        for c in range(self.dim + 1):
            self.maps.setdefault(c, {})
            self.free.setdefault(c, [])
            self.next_index.setdefault(c, 0)

    def index(self, codim: int, key: EntityId) -> int:
        try:
            return self.maps[codim][key]
        except KeyError:
            raise KeyError(f"entity {key} (codim {codim}) does not exist in the current mesh") from None

    def size(self, codim: int) -> int:
        return len(self.maps[codim])


def persistent_index(pset: PersistentIndexSet, codim: int, key: EntityId) -> int:
    return pset.index(codim, key)


def rebuild_persistent(pset: PersistentIndexSet | None, forest: Forest, rank: int) -> PersistentIndexSet:
    """Update ``pset`` to the entities of ``rank``'s current leaves."""
    d = forest.dim
    pset = pset or PersistentIndexSet(d)
    for c in range(d + 1):
        current = {k for ids in entity_keys(forest, rank, c) for k in ids}
        old = pset.maps[c]
        for k in [k for k in old if k not in current]:
            heapq.heappush(pset.free[c], old.pop(k))
        for k in sorted(current - old.keys()):
            if pset.free[c]:
                old[k] = heapq.heappop(pset.free[c])
            else:
                old[k] = pset.next_index[c]
                pset.next_index[c] += 1
    return pset


@dataclass
class LeafIndexSet:
    """Consecutive indices per codimension for the current local leaves."""
    dim: int
    sub_index: dict
    sizes: dict

    def index(self, codim: int, leaf: int, sub: int = 0) -> int:
        return self.sub_index[codim][leaf][sub]

    def size(self, codim: int) -> int:
        return self.sizes[codim]


def leaf_index_set(forest: Forest, rank: int) -> LeafIndexSet:
    d = forest.dim
    sub_index, sizes = {}, {}
    for c in range(d + 1):
        if c == 0:
            n = len(forest.ranks[rank])
            sub_index[0] = [[i] for i in range(n)]
            sizes[0] = n
            continue
        numbering: dict = {}
        rows = []
        for ids in entity_keys(forest, rank, c):
            rows.append([numbering.setdefault(k, len(numbering)) for k in ids])
        sub_index[c] = rows
        sizes[c] = len(numbering)
    return LeafIndexSet(d, sub_index, sizes)
