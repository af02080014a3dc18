"""2:1 face balance: balanced marking, monolithic ripple balance, checker.

The balanced marking adjusts refine/keep/coarsen flags so that a single
adapt step keeps the mesh 2:1 balanced.  Each outer round exchanges the
flags of boundary leaves to the ghosts and then sweeps the local leaves
until nothing changes.  All rules only ever raise a flag (-1 < 0 < +1), so
the result is the least fixed point above the input marking, independent of
sweep order and of the partition.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forest import Forest, adapt
from .ghost import GhostLayer, build_ghost, ghost_exchange
from .meshiter import IntersectionTable, adjacency, build_intersections

MAX_ROUNDS = 3


@dataclass
class BalanceReport:
    sweeps_used: int = 0
    fell_back: bool = False
    changed_per_sweep: list[int] = field(default_factory=list)
    local_sweeps: int = 0
    face_visits: int = 0


class _RankState:
    """Per-rank neighbor structure flattened to (leaf, neighbor) entries."""

    def __init__(self, table: IntersectionTable, levels: np.ndarray, n: int):
        self.n = n
        valid = table.nbr >= 0
        self.src = np.nonzero(valid)[0]
        self.dst = table.nbr[valid]
        self.levels = levels
        self.ls = levels[self.src]
        self.ld = levels[self.dst]
        self.deg = valid.sum(axis=1)
        # entry ranges per source leaf (entries are grouped by source)
        self.start = np.concatenate([[0], np.cumsum(self.deg)])
        # reverse adjacency: who looks at neighbor j
        order = np.argsort(self.dst, kind="stable")
        self.rev_src = self.src[order]
        self.rev_start = np.searchsorted(self.dst[order], np.arange(len(levels) + 1))

    def entries_of(self, leaves: np.ndarray) -> np.ndarray:
        cnt = self.deg[leaves]
        base = np.repeat(self.start[leaves], cnt)
        return base + (np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt))

    def watchers(self, nodes: np.ndarray) -> np.ndarray:
        if not len(nodes):
            return nodes
        cnt = self.rev_start[nodes + 1] - self.rev_start[nodes]
        base = np.repeat(self.rev_start[nodes], cnt)
        pos = base + (np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt))
        return np.unique(self.rev_src[pos])


def _sweep(st: _RankState, m: np.ndarray, dirty: np.ndarray, report: BalanceReport, lock) -> np.ndarray:
    """Jacobi sweeps over ``dirty`` leaves until the local fixed point.

    ``m`` holds local marks followed by ghost marks and is updated in place.
    Returns the local leaves whose mark changed.
    """
    n = st.n
    changed_any = []
    while len(dirty):
        e = st.entries_of(dirty)
        s, t = st.src[e], st.dst[e]
        ls, lt = st.ls[e], st.ld[e]
        ms, mt = m[s], m[t]
        with lock:
            report.face_visits += len(e)
        finer_ref = (lt > ls) & (mt == 1)
        finer_any = lt > ls
        same_ref = (lt == ls) & (mt == 1)
        new = m.copy()
        # pull: keep -> refine next to a finer refining neighbor
        up = np.zeros(len(m), dtype=bool)
        np.logical_or.at(up, s, finer_ref)
        keep = np.zeros(len(m), dtype=bool)
        np.logical_or.at(keep, s, finer_any | same_ref)
        new = np.where((m >= 0) & (m < 1) & up, 1, new)
        new = np.where((m == -1) & up, 1, np.where((m == -1) & keep, 0, new))
        # push from refining leaves onto coarser / equal-level coarsening neighbors
        ref_src = ms == 1
        push1 = ref_src & (lt < ls) & (mt < 1)
        push0 = ref_src & (lt == ls) & (mt < 0)
        np.maximum.at(new, t[push0], 0)
        np.maximum.at(new, t[push1], 1)
        delta = np.nonzero(new != m)[0]
        m[:] = new
        loc = delta[delta < n]
        if len(loc):
            changed_any.append(loc)
        report.local_sweeps += 1
        with lock:
            report.changed_per_sweep.append(int(len(loc)))
        dirty = st.watchers(delta)
        dirty = dirty[dirty < n]
    return np.unique(np.concatenate(changed_any)) if changed_any else np.zeros(0, np.int64)


def balanced_marking(forest: Forest, marking: list[np.ndarray], layer: GhostLayer | None = None,
                     max_rounds: int = MAX_ROUNDS) -> tuple[list[np.ndarray], BalanceReport]:
    """Raise marks until one adapt step keeps the forest 2:1 face balanced.

    Requires a balanced forest.  Up to ``max_rounds`` rounds of (ghost
    exchange, local sweeps to a fixed point, allreduce of the resolved
    flags).  If the marks are still unresolved afterwards, the rounds
    continue without the cap and ``fell_back`` is reported; the outcome is
    the same least fixed point the capped loop would have reached.
    """
    import threading

    layer = layer or build_ghost(forest)
    tables = build_intersections(forest, layer)
    P = forest.size
    report = BalanceReport()
    lock = threading.Lock()
    local = [np.asarray(m, dtype=np.int64).copy() for m in marking]
    for p in range(P):
        if len(local[p]) != len(forest.ranks[p]):
            raise ValueError(f"rank {p}: marking length does not match the leaf count")
        if len(local[p]) and (local[p].min() < -1 or local[p].max() > 1):
            raise ValueError("marks must be in {-1, 0, 1}")
    states = [_RankState(tables[p], np.concatenate([forest.ranks[p].level, layer[p].ghosts.level]),
                         len(forest.ranks[p])) for p in range(P)]
    ghost_marks = [np.full(layer[p].num_ghosts, -2, dtype=np.int64) for p in range(P)]
    rounds = 0
    while True:
        rounds += 1
        received = ghost_exchange(forest, layer, local, tag="balance")

        def work(p):
            st = states[p]
            n = st.n
            prev = ghost_marks[p]
            g = np.maximum(received[p], prev)
            if rounds == 1:
                # every rule needs a nonzero local mark or a refining ghost neighbor
                dirty = np.union1d(np.nonzero(local[p] != 0)[0], st.watchers(n + np.nonzero(g == 1)[0]))
                dirty = dirty[dirty < n].astype(np.int64)
            else:
                dirty = st.watchers(n + np.nonzero(g != prev)[0])
                dirty = dirty[dirty < n]
            m = np.concatenate([local[p], g])
            changed = _sweep(st, m, dirty, report, lock)
            local[p] = m[:n]
            ghost_marks[p] = m[n:]
            return 0 if len(changed) else 1

        resolved = forest.comm.allreduce(forest.comm.map(work), op="min", tag="balance-resolved")
        if resolved == 1:
            break
        if rounds >= max_rounds:
            report.fell_back = True
    report.sweeps_used = rounds
    return local, report


def check_balanced(forest: Forest, layer: GhostLayer | None = None) -> list:
    """Every face-adjacent leaf pair whose levels differ by two or more.

    Each pair is reported once, by the rank owning the coarser leaf.
    """
    layer = layer or build_ghost(forest)
    out = []
    for p in range(forest.size):
        i, f, j = adjacency(forest, layer, p)
        lv = np.concatenate([forest.ranks[p].level, layer[p].ghosts.level])
        bad = lv[j] - lv[i] >= 2
        for a, b, c in zip(i[bad], f[bad], j[bad]):
            out.append(Violation(p, int(a), int(b), int(c), int(lv[a]), int(lv[c])))
    return out


@dataclass(frozen=True)
class Violation:
    rank: int
    leaf: int
    face: int
    other: int
    level: int
    other_level: int


@dataclass
class MonolithicReport:
    iterations: int = 0
    face_visits: int = 0
    refined: int = 0


def monolithic_balance(forest: Forest, on_adapt=None) -> tuple[Forest, MonolithicReport]:
    """Coarsest 2:1 face-balanced refinement of an arbitrary forest.

    Repeats full sweeps that flag every leaf with a face neighbor two or more
    levels finer, refining the flagged leaves after each sweep, until a sweep
    flags nothing.  ``on_adapt`` receives the AdaptRecord of every refinement
    so that callers can carry leaf data along.
    """
    rep = MonolithicReport()
    while True:
        layer = build_ghost(forest)

        def flags(p):
            i, _, j = adjacency(forest, layer, p)
            lv = np.concatenate([forest.ranks[p].level, layer[p].ghosts.level])
            need = np.zeros(len(forest.ranks[p]), dtype=np.int64)
            bad = lv[j] - lv[i] >= 2
            need[i[bad]] = 1
            return need, len(i)

        res = forest.comm.map(flags)
        rep.face_visits += sum(r[1] for r in res)
        rep.iterations += 1
        total = forest.comm.allreduce([int(r[0].sum()) for r in res], op="sum", tag="monolithic")
        if total == 0:
            return forest, rep
        rep.refined += total
        forest, record = adapt(forest, [r[0] for r in res], check_balance=False)
        if on_adapt is not None:
            on_adapt(record)
