"""Datasets and whole k-NN graphs."""

from dataclasses import dataclass

import numba
import numpy as np

from .errors import UsageError
from .knnlist import SENTINEL_ID, SegmentedKnnList, NeighborEntry, Flag, sort_row
from .metrics import Metric, check_domain


class Dataset:
    """Immutable row-major float32 vector collection; row index is identity."""

    def __init__(self, vectors, metric=None):
        arr = np.ascontiguousarray(vectors, dtype=np.float32)
        if arr.ndim != 2:
            raise UsageError(f"dataset must be a 2-d matrix, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise UsageError(f"dataset needs n >= 1 and d >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise UsageError("dataset contains non-finite components")
        if arr is vectors or np.shares_memory(arr, np.asarray(vectors)):
            arr = arr.copy()
        arr.setflags(write=False)
        self.vectors = arr
        if metric is not None:
            check_domain(metric, arr)

    @property
    def n(self):
        return self.vectors.shape[0]

    @property
    def d(self):
        return self.vectors.shape[1]

    def __len__(self):
        return self.n

    def __getitem__(self, idx):
        return self.vectors[idx]

    def __repr__(self):
        return f"Dataset(n={self.n}, d={self.d})"


@numba.njit(parallel=True, cache=True)
def _finalize_rows(ids, dists, flags):
    for i in numba.prange(ids.shape[0]):
        sort_row(ids[i], dists[i], flags[i])


@dataclass
class KnnGraph:
    """``n`` neighbor lists of width ``k``.

    While building, rows are segmented (``seg_size`` set); a finalized
    graph has ``seg_size=None`` and every row globally sorted.
    """

    ids: np.ndarray
    dists: np.ndarray
    flags: np.ndarray
    metric: Metric = Metric.SQEUCLIDEAN
    seg_size: int | None = None

    @classmethod
    def empty(cls, n, k, metric=Metric.SQEUCLIDEAN, seg_size=None):
        return cls(
            np.full((n, k), SENTINEL_ID, dtype=np.int64),
            np.full((n, k), np.inf, dtype=np.float32),
            np.full((n, k), 1, dtype=np.uint8),
            Metric.parse(metric),
            seg_size,
        )

    @classmethod
    def from_arrays(cls, ids, dists, metric=Metric.SQEUCLIDEAN, flags=None):
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        dists = np.ascontiguousarray(dists, dtype=np.float32)
        if ids.shape != dists.shape or ids.ndim != 2:
            raise UsageError(f"ids {ids.shape} and dists {dists.shape} must be equal 2-d shapes")
        if flags is None:
            flags = np.zeros(ids.shape, dtype=np.uint8)
        return cls(ids, dists, np.ascontiguousarray(flags, dtype=np.uint8), Metric.parse(metric), None)

    @property
    def n(self):
        return self.ids.shape[0]

    @property
    def k(self):
        return self.ids.shape[1]

    @property
    def is_finalized(self):
        return self.seg_size is None

    def copy(self):
        return KnnGraph(self.ids.copy(), self.dists.copy(), self.flags.copy(), self.metric, self.seg_size)

    def row(self, i):
        """Segmented view of list ``i``; inserts write through to the graph."""
        seg = self.seg_size if self.seg_size is not None else self.k
        return SegmentedKnnList(self.k, seg, ids=self.ids[i], dists=self.dists[i], flags=self.flags[i])

    def entries(self, i):
        return [
            NeighborEntry(int(a), float(b), Flag(int(c)))
            for a, b, c in zip(self.ids[i], self.dists[i], self.flags[i])
        ]

    def finalize(self):
        """Merge every row's segments into one ascending list, in place."""
        _finalize_rows(self.ids, self.dists, self.flags)
        self.seg_size = None
        return self

    def finalized(self):
        return self.copy().finalize()

    def validate(self, *, allow_sentinels=False):
        """Raise ValueError unless ids are in range, unique per row and not self-loops."""
        n = self.n
        live = self.ids != SENTINEL_ID
        if not allow_sentinels and not live.all():
            raise ValueError("graph contains unfilled sentinel slots")
        bad = live & ((self.ids < 0) | (self.ids >= n))
        if bad.any():
            raise ValueError(f"neighbor id out of range in row {np.argwhere(bad)[0][0]}")
        own = self.ids == np.arange(n)[:, None]
        if own.any():
            raise ValueError(f"self-loop in row {np.argwhere(own)[0][0]}")
        s = np.sort(self.ids, axis=1)
        dup = (s[:, 1:] == s[:, :-1]) & (s[:, 1:] != SENTINEL_ID)
        if dup.any():
            raise ValueError(f"duplicate neighbor in row {np.argwhere(dup)[0][0]}")
        if self.is_finalized:
            d = self.dists
            i = self.ids
            out_of_order = (d[:, 1:] < d[:, :-1]) | ((d[:, 1:] == d[:, :-1]) & (i[:, 1:] < i[:, :-1]))
            if out_of_order.any():
                raise ValueError(f"row {np.argwhere(out_of_order)[0][0]} is not sorted")
