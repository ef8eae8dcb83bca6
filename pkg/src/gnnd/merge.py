"""Merging two k-NN graphs over disjoint datasets.

Each list keeps its nearest ``ceil(k/2)`` entries, the rest is parked in a
reserve and replaced by random objects of the other subset. The combined
graph is refined with NN-Descent restricted to cross-subset pairs, then each
list is re-merged with its reserve.

Ids are handled in a combined space: the first graph's objects are
``[0, boundary)``, the second graph's are ``[boundary, n_total)``. Ids at or
above ``n_total`` denote objects outside both subsets (used by the sharded
pipeline); they go straight to the reserve and never take part in joins.
"""

from dataclasses import dataclass

import numba
import numpy as np

from .builder import BuildParams, run_iterations
from .errors import UsageError
from .graph import Dataset, KnnGraph
from .knnlist import NEW, OLD, SENTINEL_ID, segment_insert, sorted_order
from .metrics import Metric, distance


@dataclass
class MergeContext:
    boundary: int
    reserved_ids: np.ndarray
    reserved_dists: np.ndarray
    data: Dataset

    @property
    def n_total(self):
        return self.data.n

    def subset_of(self, ids):
        return (np.asarray(ids) >= self.boundary).astype(np.int8)

    def reserved(self, i):
        live = self.reserved_ids[i] != SENTINEL_ID
        return self.reserved_ids[i][live], self.reserved_dists[i][live]


@numba.njit(parallel=True, cache=True)
def _ggm_init(data, kind, src_ids, src_d, boundary, seg_size, uniforms,
              ids, dists, flags, res_ids, res_d, err):
    n_tot, k = src_ids.shape
    s = (k + seg_size - 1) // seg_size
    keep = (k + 1) // 2
    for i in numba.prange(n_tot):
        r = 0
        for t in range(k):
            v = src_ids[i, t]
            if v == SENTINEL_ID:
                continue
            d = src_d[i, t]
            j = v % s
            hi = min(j * seg_size + seg_size, k)
            if t >= keep or v >= n_tot or ids[i, hi - 1] != SENTINEL_ID:
                res_ids[i, r] = v
                res_d[i, r] = d
                r += 1
                continue
            segment_insert(ids[i], dists[i], flags[i], j * seg_size, hi, v, d, OLD)

        if i < boundary:
            c_lo = boundary
            c_hi = n_tot
        else:
            c_lo = 0
            c_hi = boundary
        u_pos = 0
        for j in range(s):
            lo = j * seg_size
            hi = min(lo + seg_size, k)
            free = 0
            taken = 0
            for x in range(lo, hi):
                v = ids[i, x]
                if v == SENTINEL_ID:
                    free += 1
                elif c_lo <= v < c_hi:
                    taken += 1
            if free == 0:
                continue
            first = c_lo + (j - c_lo % s) % s
            size = 0 if first >= c_hi else (c_hi - 1 - first) // s + 1
            need = free + taken
            if need > size:
                err[i] = 1
                break
            picked = np.empty(need, dtype=np.int64)
            cnt = 0
            for t in range(size - need, size):
                rank = np.int64(uniforms[i, u_pos] * (t + 1))
                u_pos += 1
                if rank > t:
                    rank = t
                dup = False
                for c in range(cnt):
                    if picked[c] == rank:
                        dup = True
                        break
                picked[cnt] = t if dup else rank
                cnt += 1
            for c in range(need):
                if free == 0:
                    break
                v = first + picked[c] * s
                present = False
                for x in range(lo, hi):
                    if ids[i, x] == v:
                        present = True
                        break
                if present:
                    continue
                d = np.float32(distance(kind, data[i], data[v]))
                segment_insert(ids[i], dists[i], flags[i], lo, hi, v, d, NEW)
                free -= 1


@numba.njit(parallel=True, cache=True)
def _sort_rows(ids, dists):
    n, w = ids.shape
    for i in numba.prange(n):
        order = np.empty(w, dtype=np.int64)
        sorted_order(ids[i], dists[i], order)
        ids[i] = ids[i][order]
        dists[i] = dists[i][order]


@numba.njit(parallel=True, cache=True)
def _ggm_finalize(ids, dists, res_ids, res_d, out_ids, out_d):
    n, k = ids.shape
    w = k + res_ids.shape[1]
    for i in numba.prange(n):
        b_ids = np.empty(w, dtype=np.int64)
        b_d = np.empty(w, dtype=np.float32)
        b_ids[:k] = ids[i]
        b_d[:k] = dists[i]
        b_ids[k:] = res_ids[i]
        b_d[k:] = res_d[i]
        order = np.empty(w, dtype=np.int64)
        sorted_order(b_ids, b_d, order)
        c = 0
        for t in range(w):
            v = b_ids[order[t]]
            if v == SENTINEL_ID:
                break
            dup = False
            for x in range(c):
                if out_ids[i, x] == v:
                    dup = True
                    break
            if dup:
                continue
            out_ids[i, c] = v
            out_d[i, c] = b_d[order[t]]
            c += 1
            if c == k:
                break


def combine_datasets(data1, data2):
    a = data1.vectors if isinstance(data1, Dataset) else np.asarray(data1, dtype=np.float32)
    b = data2.vectors if isinstance(data2, Dataset) else np.asarray(data2, dtype=np.float32)
    if a.shape[1] != b.shape[1]:
        raise UsageError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return Dataset(np.concatenate([a, b]))


def _check_pair(g1, g2):
    if g1.k != g2.k:
        raise UsageError(f"cannot merge graphs of different degree ({g1.k} vs {g2.k})")
    if g1.metric != g2.metric:
        raise UsageError(f"cannot merge graphs built with {g1.metric.cli_name} and {g2.metric.cli_name}")
    if not (g1.is_finalized and g2.is_finalized):
        raise UsageError("both graphs must be finalized")


def ggm_init_combined(ids, dists, boundary, data, metric, params, seed):
    """Seed a merge from finalized rows already expressed in the combined id space."""
    data = data if isinstance(data, Dataset) else Dataset(data)
    metric = Metric.parse(metric)
    n_tot, k = ids.shape
    if n_tot != data.n:
        raise UsageError(f"graph has {n_tot} rows but combined dataset has {data.n}")
    if k != params.k:
        raise UsageError(f"graph degree {k} does not match params.k={params.k}")
    if not 0 < boundary < n_tot:
        raise UsageError(f"boundary {boundary} must split {n_tot} objects")
    seg = params.effective_seg_size
    graph = KnnGraph.empty(n_tot, k, metric, seg)
    res_ids = np.full((n_tot, k), SENTINEL_ID, dtype=np.int64)
    res_d = np.full((n_tot, k), np.inf, dtype=np.float32)
    err = np.zeros(n_tot, dtype=np.int8)
    uniforms = np.random.default_rng(seed).random((n_tot, k))
    _ggm_init(data.vectors, int(metric), np.ascontiguousarray(ids, dtype=np.int64),
              np.ascontiguousarray(dists, dtype=np.float32), boundary, seg, uniforms,
              graph.ids, graph.dists, graph.flags, res_ids, res_d, err)
    if err.any():
        i = int(np.argmax(err))
        other = n_tot - boundary if i < boundary else boundary
        raise UsageError(
            f"object {i}: the other subset ({other} objects) is too small to draw "
            f"{k - (k + 1) // 2} distinct cross samples per segment"
        )
    _sort_rows(res_ids, res_d)
    return graph, MergeContext(boundary, res_ids, res_d, data)


def ggm_init(g1, g2, data, seed=0, params=None):
    """Combined half-seeded graph over ``S1 + S2`` and its merge context.

    ``g2``'s ids are re-based by ``g1.n``; ``data`` holds S1 rows then S2 rows.
    """
    _check_pair(g1, g2)
    params = params or BuildParams(k=g1.k, p=max(1, g1.k // 2), deterministic=True)
    data = data if isinstance(data, Dataset) else Dataset(data)
    if data.n != g1.n + g2.n:
        raise UsageError(f"combined dataset has {data.n} rows, graphs have {g1.n} + {g2.n}")
    for g, size in ((g1, g1.n), (g2, g2.n)):
        live = g.ids[g.ids != SENTINEL_ID]
        if live.size and (live.min() < 0 or live.max() >= size):
            raise UsageError("input graphs must use their own local id spaces")
    ids2 = np.where(g2.ids == SENTINEL_ID, SENTINEL_ID, g2.ids + g1.n)
    ids = np.concatenate([g1.ids, ids2])
    dists = np.concatenate([g1.dists, g2.dists])
    return ggm_init_combined(ids, dists, g1.n, data, g1.metric, params, seed)


def ggm_refine(graph, ctx, params, history=None):
    """NN-Descent rounds that only evaluate pairs from different subsets."""
    return run_iterations(graph, ctx.data, params, boundary=ctx.boundary, history=history)


def ggm_finalize(graph, ctx):
    """k nearest distinct entries of each refined list together with its reserve."""
    n, k = graph.ids.shape
    out_ids = np.full((n, k), SENTINEL_ID, dtype=np.int64)
    out_d = np.full((n, k), np.inf, dtype=np.float32)
    _ggm_finalize(graph.ids, graph.dists, ctx.reserved_ids, ctx.reserved_dists, out_ids, out_d)
    return KnnGraph(out_ids, out_d, np.full((n, k), OLD, dtype=np.uint8), graph.metric, None)


def ggm_merge(g1, g2, data1, data2, params, seed=None, history=None):
    """Merge two finalized graphs; returns the finalized graph over ``S1 + S2``."""
    data = combine_datasets(data1, data2)
    seed = params.seed if seed is None else seed
    graph, ctx = ggm_init(g1, g2, data, seed, params)
    ggm_refine(graph, ctx, params, history)
    return ggm_finalize(graph, ctx)
