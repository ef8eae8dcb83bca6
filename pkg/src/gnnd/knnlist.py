"""Bounded k-NN lists split into lock-striped sorted segments.

A list of capacity ``k`` is stored as ``k`` contiguous slots divided into
``s = ceil(k / seg_size)`` segments; segment ``j`` covers slots
``[j*seg_size, min((j+1)*seg_size, k))`` and only ever holds ids with
``id % s == j``. Each segment is kept ascending by ``(dist, id)`` with
sentinels ``(SENTINEL_ID, inf)`` at its tail.

The numba kernels here operate on raw row arrays and are shared by the
graph builder; :class:`SegmentedKnnList` wraps one row with a lock per
segment.
"""

import enum
import threading
from typing import NamedTuple

import numba
import numpy as np

SENTINEL_ID = np.iinfo(np.int64).max
INF = np.float32(np.inf)

OLD = 0
NEW = 1

REJECTED = 0
INSERTED = 1
DUPLICATE = 2


class Flag(enum.IntEnum):
    OLD = OLD
    NEW = NEW


class InsertOutcome(enum.IntEnum):
    Rejected = REJECTED
    Inserted = INSERTED
    Duplicate = DUPLICATE


class NeighborEntry(NamedTuple):
    id: int
    dist: float
    flag: Flag = Flag.NEW

    @property
    def is_sentinel(self):
        return self.id == SENTINEL_ID


def n_segments(k, seg_size):
    if k < 1 or seg_size < 1:
        raise ValueError("k and seg_size must be positive")
    return -(-k // seg_size)


@numba.njit(cache=True, inline="always")
def entry_less(d1, i1, d2, i2):
    return d1 < d2 or (d1 == d2 and i1 < i2)


@numba.njit(cache=True)
def segment_insert(ids, dists, flags, lo, hi, cand, d, flag):
    """Insert ``(cand, d)`` into the sorted slot range ``[lo, hi)``.

    Accepted iff ``cand`` is absent from the range and ``d`` is strictly
    below the range's current maximum; the farthest entry is evicted.
    """
    for i in range(lo, hi):
        if ids[i] == cand:
            return DUPLICATE
    if not d < dists[hi - 1]:
        return REJECTED
    i = hi - 1
    while i > lo and entry_less(d, cand, dists[i - 1], ids[i - 1]):
        ids[i] = ids[i - 1]
        dists[i] = dists[i - 1]
        flags[i] = flags[i - 1]
        i -= 1
    ids[i] = cand
    dists[i] = d
    flags[i] = flag
    return INSERTED


@numba.njit(cache=True)
def list_insert_row(ids, dists, flags, seg_size, cand, d, flag):
    k = ids.shape[0]
    s = (k + seg_size - 1) // seg_size
    j = cand % s
    lo = j * seg_size
    hi = min(lo + seg_size, k)
    return segment_insert(ids, dists, flags, lo, hi, cand, d, flag)


@numba.njit(cache=True)
def sort_row(ids, dists, flags):
    """In-place insertion sort of one row by ``(dist, id)``."""
    for i in range(1, ids.shape[0]):
        ci = ids[i]
        cd = dists[i]
        cf = flags[i]
        j = i
        while j > 0 and entry_less(cd, ci, dists[j - 1], ids[j - 1]):
            ids[j] = ids[j - 1]
            dists[j] = dists[j - 1]
            flags[j] = flags[j - 1]
            j -= 1
        ids[j] = ci
        dists[j] = cd
        flags[j] = cf


@numba.njit(cache=True)
def sorted_order(ids, dists, out):
    """Write into ``out`` the slot permutation that sorts a row by ``(dist, id)``."""
    for i in range(ids.shape[0]):
        out[i] = i
    for i in range(1, ids.shape[0]):
        c = out[i]
        j = i
        while j > 0 and entry_less(dists[c], ids[c], dists[out[j - 1]], ids[out[j - 1]]):
            out[j] = out[j - 1]
            j -= 1
        out[j] = c


class SegmentedKnnList:
    """One k-NN list with a lock per segment.

    ``insert`` calls on different segments may run concurrently from
    several threads; ``finalize`` takes every lock.
    """

    def __init__(self, k, seg_size=32, *, ids=None, dists=None, flags=None):
        self.k = int(k)
        self.seg_size = int(seg_size)
        self.n_segments = n_segments(self.k, self.seg_size)
        self.ids = np.full(self.k, SENTINEL_ID, dtype=np.int64) if ids is None else ids
        self.dists = np.full(self.k, INF, dtype=np.float32) if dists is None else dists
        self.flags = np.full(self.k, NEW, dtype=np.uint8) if flags is None else flags
        self._locks = [threading.Lock() for _ in range(self.n_segments)]

    @classmethod
    def from_segments(cls, k, seg_size, segments):
        """Build a list from per-segment ``(id, dist[, flag])`` sequences."""
        lst = cls(k, seg_size)
        if len(segments) > lst.n_segments:
            raise ValueError(f"{len(segments)} segments given, list has {lst.n_segments}")
        for j, seg in enumerate(segments):
            lo, hi = lst.bounds(j)
            if len(seg) > hi - lo:
                raise ValueError(f"segment {j} overflows its {hi - lo} slots")
            for e in seg:
                e = NeighborEntry(*e)
                if e.id % lst.n_segments != j:
                    raise ValueError(f"id {e.id} does not belong to segment {j}")
                outcome = lst.insert(e)
                if outcome != InsertOutcome.Inserted:
                    raise ValueError(f"entry {e} could not be placed ({outcome.name})")
        return lst

    def bounds(self, j):
        lo = j * self.seg_size
        return lo, min(lo + self.seg_size, self.k)

    def segment_of(self, id_):
        return int(id_) % self.n_segments

    def segment(self, j):
        lo, hi = self.bounds(j)
        return [
            NeighborEntry(int(i), float(d), Flag(int(f)))
            for i, d, f in zip(self.ids[lo:hi], self.dists[lo:hi], self.flags[lo:hi])
        ]

    def segment_max(self, j):
        lo, hi = self.bounds(j)
        return float(self.dists[hi - 1])

    def insert(self, entry, dist=None, flag=Flag.NEW):
        if dist is not None:
            entry = NeighborEntry(int(entry), dist, flag)
        entry = NeighborEntry(*entry)
        if entry.id < 0 or entry.id == SENTINEL_ID:
            raise ValueError(f"invalid neighbor id {entry.id}")
        j = self.segment_of(entry.id)
        lo, hi = self.bounds(j)
        with self._locks[j]:
            res = segment_insert(
                self.ids, self.dists, self.flags, lo, hi,
                np.int64(entry.id), np.float32(entry.dist), np.uint8(entry.flag),
            )
        return InsertOutcome(res)

    def finalize(self):
        """All entries, sentinels included, ascending by ``(dist, id)``."""
        for lock in self._locks:
            lock.acquire()
        try:
            order = np.lexsort((self.ids, self.dists))
            return [
                NeighborEntry(int(self.ids[i]), float(self.dists[i]), Flag(int(self.flags[i])))
                for i in order
            ]
        finally:
            for lock in reversed(self._locks):
                lock.release()

    def __len__(self):
        return int(np.count_nonzero(self.ids != SENTINEL_ID))

    def __repr__(self):
        segs = ", ".join(
            "[" + ", ".join(f"({e.id}, {e.dist:g})" for e in self.segment(j) if not e.is_sentinel) + "]"
            for j in range(self.n_segments)
        )
        return f"SegmentedKnnList(k={self.k}, segments={segs})"
