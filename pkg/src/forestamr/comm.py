"""Simulated multi-rank transport with a message transcript.

Ranks live in one OS process.  Every collective phase is a superstep: each
rank computes its outgoing data, the transport delivers it, then every rank
continues.  Phases run serially in rank order by default or on a thread
pool; the results are identical either way because ranks only interact
through the delivered messages.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class CollectiveError(RuntimeError):
    """Ranks disagreed on the arguments of a collective call."""


@dataclass
class Message:
    tag: str
    src: int
    dst: int
    nbytes: int


@dataclass
class Transcript:
    messages: list[Message] = field(default_factory=list)
    collectives: list[tuple[str, str]] = field(default_factory=list)

    def clear(self):
        self.messages.clear()
        self.collectives.clear()

    def count(self, tag: str | None = None) -> int:
        return sum(1 for m in self.messages if tag is None or m.tag == tag)

    def pairs(self, tag: str) -> list[tuple[int, int]]:
        return [(m.src, m.dst) for m in self.messages if m.tag == tag]

    def per_rank_sends(self, tag: str, size: int) -> list[int]:
        out = [0] * size
        for m in self.messages:
            if m.tag == tag:
                out[m.src] += 1
        return out


def _nbytes(obj) -> int:
    if isinstance(obj, np.ndarray):
        return obj.nbytes
    if isinstance(obj, (list, tuple)):
        return sum(_nbytes(o) for o in obj)
    if isinstance(obj, dict):
        return sum(_nbytes(v) for v in obj.values())
    return 8


class Transport:
    def __init__(self, size: int, threaded: bool = False):
        if size < 1:
            raise ValueError("rank count must be positive")
        self.size = size
        self.threaded = threaded
        self.transcript = Transcript()
        self._pool = ThreadPoolExecutor(max_workers=min(size, 8)) if threaded and size > 1 else None

    def map(self, fn: Callable[[int], Any]) -> list:
        """Run ``fn(rank)`` for every rank and return the per-rank results."""
        if self._pool is None:
            return [fn(r) for r in range(self.size)]
        return list(self._pool.map(fn, range(self.size)))

    def exchange(self, outboxes: list[dict[int, Any]], tag: str) -> list[dict[int, Any]]:
        """Point-to-point delivery: ``outboxes[src][dst]`` arrives in ``inboxes[dst][src]``."""
        if len(outboxes) != self.size:
            raise CollectiveError("one outbox per rank expected")
        inboxes: list[dict[int, Any]] = [{} for _ in range(self.size)]
        self.transcript.collectives.append(("exchange", tag))
        for src, box in enumerate(outboxes):
            for dst in sorted(box):
                if dst == src:
                    raise CollectiveError(f"rank {src} sent a message to itself")
                inboxes[dst][src] = box[dst]
                self.transcript.messages.append(Message(tag, src, dst, _nbytes(box[dst])))
        return inboxes

    def allgather(self, values: list, tag: str = "allgather") -> list:
        if len(values) != self.size:
            raise CollectiveError("one contribution per rank expected")
        self.transcript.collectives.append(("allgather", tag))
        return list(values)

    def allreduce(self, values: list, op: str = "sum", tag: str = "allreduce"):
        if len(values) != self.size:
            raise CollectiveError("one contribution per rank expected")
        self.transcript.collectives.append(("allreduce", tag))
        if op == "sum":
            return sum(values)
        if op == "min":
            return min(values)
        if op == "max":
            return max(values)
        raise ValueError(f"unknown reduction {op!r}")

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None
