"""Fixed-point quadrant/octant arithmetic inside a single tree.

Coordinates live on the integer lattice [0, ROOT_LEN]^d with ROOT_LEN = 2**30.
A quadrant of level ``l`` has side length ``ROOT_LEN >> l`` and an anchor
(lower corner) that is a multiple of that length.

Numbering conventions, used everywhere in the package:

* child ``i``: bit ``k`` of ``i`` set means the child sits in the upper half
  along axis ``k`` (z-order, so children are in ascending Morton order);
* corner ``i``: same bit convention as children;
* face ``f``: axis ``f // 2``, lower side if ``f`` is even (-x, +x, -y, +y, -z, +z);
* 3D edge ``e``: parallel to axis ``e // 4``; bits of ``e % 4`` select the
  lower/upper side along the two remaining axes in ascending order.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cmp_to_key
from typing import Iterable, Sequence

import numpy as np

ROOT_LEN = 1 << 30
MAX_LEVEL = {2: 29, 3: 19}


class LevelOverflowError(ValueError):
    """Refinement would exceed the maximum level for the dimension."""


def quadrant_len(level: int) -> int:
    return ROOT_LEN >> level


@dataclass(frozen=True)
class Quadrant:
    coords: tuple[int, ...]
    level: int

    def __post_init__(self):
        if len(self.coords) not in (2, 3):
            raise ValueError(f"quadrants are 2D or 3D, got {len(self.coords)} coordinates")
        if not 0 <= self.level <= MAX_LEVEL[len(self.coords)]:
            raise ValueError(f"level {self.level} out of range")

    @property
    def dim(self) -> int:
        return len(self.coords)

    @property
    def length(self) -> int:
        return ROOT_LEN >> self.level

    def __repr__(self) -> str:
        return f"Quadrant({', '.join(map(str, self.coords))}, l={self.level})"


def root(dim: int) -> Quadrant:
    return Quadrant((0,) * dim, 0)


def num_children(dim: int) -> int:
    return 1 << dim


def num_faces(dim: int) -> int:
    return 2 * dim


def opposite_face(f: int) -> int:
    return f ^ 1


def child(q: Quadrant, i: int) -> Quadrant:
    d = q.dim
    if not 0 <= i < (1 << d):
        raise ValueError(f"child index {i} invalid in {d}D")
    if q.level >= MAX_LEVEL[d]:
        raise LevelOverflowError(f"cannot refine {q}: maximum level {MAX_LEVEL[d]} reached")
    h = quadrant_len(q.level + 1)
    return Quadrant(tuple(c + (h if (i >> k) & 1 else 0) for k, c in enumerate(q.coords)), q.level + 1)


def children(q: Quadrant) -> list[Quadrant]:
    return [child(q, i) for i in range(1 << q.dim)]


def parent(q: Quadrant) -> Quadrant:
    if q.level == 0:
        raise ValueError("the root quadrant has no parent")
    mask = ~(quadrant_len(q.level - 1) - 1)
    return Quadrant(tuple(c & mask for c in q.coords), q.level - 1)


def child_id(q: Quadrant) -> int:
    if q.level == 0:
        return 0
    shift = 30 - q.level
    return sum(((c >> shift) & 1) << k for k, c in enumerate(q.coords))


def siblings(q: Quadrant) -> list[Quadrant]:
    return children(parent(q))


def is_family(qs: Sequence[Quadrant]) -> bool:
    """True iff ``qs`` are exactly the Morton-ordered children of one parent."""
    if not qs:
        return False
    d = qs[0].dim
    if len(qs) != (1 << d) or qs[0].level == 0:
        return False
    if any(q.dim != d or q.level != qs[0].level for q in qs):
        return False
    return list(qs) == siblings(qs[0])


def face_neighbor(q: Quadrant, f: int) -> Quadrant:
    """Same-size neighbor across face ``f``; may lie outside the tree."""
    if not 0 <= f < 2 * q.dim:
        raise ValueError(f"face {f} invalid in {q.dim}D")
    axis, upper = divmod(f, 2)
    coords = list(q.coords)
    coords[axis] += q.length if upper else -q.length
    return Quadrant(tuple(coords), q.level)


def is_inside_root(q: Quadrant) -> bool:
    return all(0 <= c and c + q.length <= ROOT_LEN for c in q.coords)


def interleave(coords: Iterable[int], shift: int = 0) -> int:
    """Morton interleave of ``c >> shift`` over all axes (axis 0 is the lowest bit)."""
    cs = [c >> shift for c in coords]
    d = len(cs)
    out = 0
    for b in range(31):
        for k, c in enumerate(cs):
            out |= ((c >> b) & 1) << (b * d + k)
    return out


def linear_id(q: Quadrant, level: int | None = None) -> int:
    """Morton index of ``q`` (or its ancestor) among all quadrants of ``level``."""
    level = q.level if level is None else level
    if level > q.level:
        raise ValueError("linear_id level must not exceed the quadrant level")
    return interleave(q.coords, 30 - level)


def _sort_key(q: Quadrant) -> tuple[int, int]:
    return interleave(q.coords), q.level


def morton_cmp(a: Quadrant, b: Quadrant) -> int:
    """Depth-first pre-order comparison: -1, 0 or 1."""
    ka, kb = _sort_key(a), _sort_key(b)
    return (ka > kb) - (ka < kb)


morton_sort_key = cmp_to_key(morton_cmp)


def is_ancestor(a: Quadrant, b: Quadrant) -> bool:
    """Strict ancestor test: ``a`` contains ``b`` and is coarser."""
    if a.level >= b.level:
        return False
    mask = ~(a.length - 1)
    return all((cb & mask) == ca for ca, cb in zip(a.coords, b.coords))


def overlaps(a: Quadrant, b: Quadrant) -> bool:
    return a == b or is_ancestor(a, b) or is_ancestor(b, a)


def num_subentities(dim: int, codim: int) -> int:
    if codim == 0:
        return 1
    if codim == dim:
        return 1 << dim
    if codim == 1:
        return 2 * dim
    if dim == 3 and codim == 2:
        return 12
    raise ValueError(f"codim {codim} invalid in {dim}D")


def coordinates_of(q: Quadrant, codim: int, index: int = 0) -> tuple[int, ...]:
    """Tree-local midpoint of a sub-entity of ``q``.

    codim 0 is the volume center, codim ``d`` a corner, codim 1 a face
    center and (3D) codim 2 an edge midpoint.
    """
    d = q.dim
    if not 0 <= index < num_subentities(d, codim):
        raise ValueError(f"sub-entity {index} invalid for codim {codim} in {d}D")
    h = q.length
    half = h // 2
    a = q.coords
    if codim == 0:
        return tuple(c + half for c in a)
    if codim == d:
        return tuple(c + (h if (index >> k) & 1 else 0) for k, c in enumerate(a))
    if codim == 1:
        axis, upper = divmod(index, 2)
        return tuple(c + (h * upper if k == axis else half) for k, c in enumerate(a))
    # 3D edges
    axis, bits = divmod(index, 4)
    others = [k for k in range(3) if k != axis]
    out = list(c + half for c in a)
    for j, k in enumerate(others):
        out[k] = a[k] + (h if (bits >> j) & 1 else 0)
    return tuple(out)


# ---------------------------------------------------------------------------
# vectorized helpers

_SPREAD2 = [
    (16, 0x0000FFFF0000FFFF),
    (8, 0x00FF00FF00FF00FF),
    (4, 0x0F0F0F0F0F0F0F0F),
    (2, 0x3333333333333333),
    (1, 0x5555555555555555),
]
_SPREAD3 = [
    (32, 0x001F00000000FFFF),
    (16, 0x001F0000FF0000FF),
    (8, 0x100F00F00F00F00F),
    (4, 0x10C30C30C30C30C3),
    (2, 0x1249249249249249),
]


def _spread(x: np.ndarray, dim: int) -> np.ndarray:
    x = x.astype(np.uint64)
    for shift, mask in _SPREAD2 if dim == 2 else _SPREAD3:
        x = (x | (x << np.uint64(shift))) & np.uint64(mask)
    return x


def morton_array(coords: np.ndarray, res: int) -> np.ndarray:
    """Interleaved anchors at resolution level ``res`` as uint64.

    ``coords`` is an (n, d) integer array of in-tree anchors whose quadrants
    have level <= res.
    """
    n, d = coords.shape
    shifted = coords >> (30 - res)
    out = np.zeros(n, dtype=np.uint64)
    for k in range(d):
        out |= _spread(shifted[:, k], d) << np.uint64(k)
    return out


def child_ids_array(coords: np.ndarray, level: np.ndarray) -> np.ndarray:
    """Child id of each quadrant within its parent (0 for level-0 quadrants)."""
    shift = (30 - level.astype(np.int64))[:, None]
    bits = (coords >> shift) & 1
    bits[level == 0] = 0
    weights = 1 << np.arange(coords.shape[1], dtype=np.int64)
    return (bits * weights).sum(axis=1)


def _compact(x: np.ndarray, dim: int) -> np.ndarray:
    x = x.astype(np.uint64)
    steps = _SPREAD2 if dim == 2 else _SPREAD3
    x &= np.uint64(steps[-1][1])
    for i in range(len(steps) - 1, 0, -1):
        shift = steps[i][0]
        x = (x | (x >> np.uint64(shift))) & np.uint64(steps[i - 1][1])
    x = (x | (x >> np.uint64(steps[0][0]))) & np.uint64((1 << (32 if dim == 2 else 21)) - 1)
    return x


def morton_decode(idx: np.ndarray, dim: int, level: int) -> np.ndarray:
    """Anchors (n, d) int64 of the quadrants with Morton index ``idx`` at ``level``."""
    idx = np.asarray(idx, dtype=np.uint64)
    out = np.empty((len(idx), dim), dtype=np.int64)
    for k in range(dim):
        out[:, k] = _compact(idx >> np.uint64(k), dim).astype(np.int64) << (30 - level)
    return out
