"""NN-Descent with fixed-size sampling, batched distance tables and selective update.

One iteration is three phases over the whole graph:

* **sample**: per object, the first ``p`` NEW and first ``p`` OLD neighbors in
  ``(dist, id)`` order, plus bounded reverse samples (capacity ``2p``),
  sorted and deduplicated;
* **join**: per object, a triangular NEW-NEW table and a tiled NEW-OLD table;
* **update**: per sampled neighbor, the nearest candidate of each role is
  offered to its list (or every computed pair when selective update is off).

Updates are bucketed by ``(target row, target segment)`` and each bucket is
applied by a single worker, so distinct segments of one list are written in
parallel while a segment is never touched by two workers at once. Results
do not depend on the thread count.
"""

import logging
import math
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import UsageError
from .evaluate import phi
from .graph import Dataset, KnnGraph
from .knnlist import (
    INSERTED,
    NEW,
    OLD,
    SENTINEL_ID,
    entry_less,
    segment_insert,
    sorted_order,
)
from .metrics import Metric, check_domain, distance

log = logging.getLogger(__name__)

EARLY_EXIT_C = 0.001
_UPDATE_BUFFER = 1 << 22
_TILE = 16


@dataclass(frozen=True)
class BuildParams:
    k: int = 32
    p: int = 12
    max_iter: int = 8
    seed: int = 0
    seg_size: int = 32
    selective_update: bool = True
    segmented_locks: bool = True
    deterministic: bool = False
    early_exit: float | None = None
    block_size: int = 65536

    def __post_init__(self):
        if self.k < 2:
            raise UsageError(f"k must be >= 2, got {self.k}")
        if not 1 <= self.p < self.k:
            raise UsageError(f"p must satisfy 1 <= p < k, got p={self.p}, k={self.k}")
        if self.max_iter < 1:
            raise UsageError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.seg_size < 1:
            raise UsageError(f"seg_size must be >= 1, got {self.seg_size}")
        if self.block_size < 1:
            raise UsageError("block_size must be positive")
        if self.early_exit is not None and self.early_exit < 0:
            raise UsageError("early_exit threshold must be non-negative")

    @property
    def effective_seg_size(self):
        # Without striping the whole list is one segment guarded as a unit.
        return self.seg_size if self.segmented_locks else self.k

    @property
    def n_segments(self):
        return -(-self.k // self.effective_seg_size)

    @property
    def update_cap(self):
        """Upper bound on candidates emitted by one local join."""
        m = 2 * self.p
        if self.selective_update:
            return 3 * m
        return m * (m - 1) + 2 * m * m


@dataclass
class SampleLists:
    """Per-object NEW and OLD samples; rows padded with -1 past the counts."""

    new_lists: np.ndarray
    new_counts: np.ndarray
    old_lists: np.ndarray
    old_counts: np.ndarray

    @property
    def capacity(self):
        return self.new_lists.shape[1]

    def new(self, s):
        return self.new_lists[s, : self.new_counts[s]]

    def old(self, s):
        return self.old_lists[s, : self.old_counts[s]]


@dataclass
class DistanceTable:
    """Distances of one local join.

    ``new_new[u*(u-1)//2 + v]`` holds d(NEW_u, NEW_v) for ``u > v``;
    ``new_old[u*q + j]`` holds d(NEW_u, OLD_j). Skipped pairs hold inf.
    """

    new_ids: np.ndarray
    old_ids: np.ndarray
    new_new: np.ndarray
    new_old: np.ndarray
    evaluations: int = 0

    def nn(self, u, v):
        if u == v:
            raise IndexError("no self distance in the NEW-NEW table")
        if u < v:
            u, v = v, u
        return self.new_new[u * (u - 1) // 2 + v]

    def no(self, u, j):
        return self.new_old[u * len(self.old_ids) + j]


@dataclass
class IterationStats:
    iteration: int
    phi: float
    inserted: int
    offered: int
    dist_evals: int
    same_subset_evals: int = 0
    seconds: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# pair indexing
# --------------------------------------------------------------------------


def pair_index(t):
    """Map a task index onto the local NEW pair ``(u, v)`` with ``u > v``."""
    if t < 0:
        raise ValueError("task index must be non-negative")
    u = math.ceil(math.sqrt(2 * t + 2.25) - 0.5)
    return u, t - u * (u - 1) // 2


def pair_index_array(t):
    t = np.asarray(t, dtype=np.int64)
    u = np.ceil(np.sqrt(2.0 * t + 2.25) - 0.5).astype(np.int64)
    return u, t - u * (u - 1) // 2


@numba.njit(cache=True, inline="always")
def _pair_u(t):
    return np.int64(math.ceil(math.sqrt(2.0 * t + 2.25) - 0.5))


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _class_size(n, s, j):
    if j >= n:
        return 0
    return (n - j + s - 1) // s


@numba.njit(parallel=True, cache=True)
def _init_random(data, kind, ids, dists, flags, seg_size, uniforms):
    n, k = ids.shape
    s = (k + seg_size - 1) // seg_size
    for i in numba.prange(n):
        row_ids = ids[i]
        row_d = dists[i]
        row_f = flags[i]
        u_pos = 0
        for j in range(s):
            lo = j * seg_size
            hi = min(lo + seg_size, k)
            m = hi - lo
            own = i % s == j
            avail = _class_size(n, s, j) - (1 if own else 0)
            picked = np.empty(m, dtype=np.int64)
            cnt = 0
            # Floyd's sampling of m distinct ranks out of avail
            for t in range(avail - m, avail):
                r = np.int64(uniforms[i, u_pos] * (t + 1))
                u_pos += 1
                if r > t:
                    r = t
                dup = False
                for c in range(cnt):
                    if picked[c] == r:
                        dup = True
                        break
                picked[cnt] = t if dup else r
                cnt += 1
            for c in range(m):
                v = j + picked[c] * s
                if own and v >= i:
                    v += s
                d = np.float32(distance(kind, data[i], data[v]))
                segment_insert(row_ids, row_d, row_f, lo, hi, v, d, NEW)


def _check_layout(n, k, seg_size):
    s = -(-k // seg_size)
    for j in range(s):
        m = min(seg_size, k - j * seg_size)
        size = (n - j + s - 1) // s if j < n else 0
        if size - 1 < m:
            raise UsageError(
                f"n={n} too small for k={k} with {s} segments: residue class {j} "
                f"has {size} objects for {m} slots"
            )


def init_random_graph(data, params, metric=Metric.SQEUCLIDEAN):
    """k distinct random neighbors per object, all NEW, segment-sorted."""
    data = data if isinstance(data, Dataset) else Dataset(data)
    metric = Metric.parse(metric)
    n, k = data.n, params.k
    if n <= k:
        raise UsageError(f"need n > k, got n={n}, k={k}")
    seg = params.effective_seg_size
    _check_layout(n, k, seg)
    graph = KnnGraph.empty(n, k, metric, seg)
    uniforms = np.random.default_rng(params.seed).random((n, k))
    _init_random(data.vectors, int(metric), graph.ids, graph.dists, graph.flags, seg, uniforms)
    return graph


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


@numba.njit(parallel=True, cache=True)
def _sample_forward(ids, dists, flags, p, new_lists, new_cnt, old_lists, old_cnt):
    n, k = ids.shape
    for s in numba.prange(n):
        order = np.empty(k, dtype=np.int64)
        sorted_order(ids[s], dists[s], order)
        nn = 0
        no = 0
        for t in range(k):
            slot = order[t]
            v = ids[s, slot]
            if v == SENTINEL_ID:
                break
            if flags[s, slot] == NEW:
                if nn < p:
                    new_lists[s, nn] = v
                    nn += 1
                    flags[s, slot] = OLD
            elif no < p:
                old_lists[s, no] = v
                no += 1
        new_cnt[s] = nn
        old_cnt[s] = no


@numba.njit(cache=True)
def _sample_reverse(source_order, lists, counts, fwd_counts, cap):
    for idx in range(source_order.shape[0]):
        s = source_order[idx]
        for t in range(fwd_counts[s]):
            v = lists[s, t]
            c = counts[v]
            if c < cap:
                lists[v, c] = s
                counts[v] = c + 1


@numba.njit(parallel=True, cache=True)
def _sort_dedup(lists, counts):
    for s in numba.prange(lists.shape[0]):
        c = counts[s]
        if c == 0:
            continue
        row = np.sort(lists[s, :c])
        w = 0
        for t in range(c):
            if t == 0 or row[t] != row[t - 1]:
                lists[s, w] = row[t]
                w += 1
        for t in range(w, lists.shape[1]):
            lists[s, t] = -1
        counts[s] = w


def parallel_sample(graph, params, rng=None):
    """Build NEW/OLD sample lists and mark forward-sampled NEW entries OLD.

    Reverse samples are appended in ascending source order when
    ``params.deterministic``; otherwise in a random order.
    """
    n, p = graph.n, params.p
    cap = 2 * p
    new_lists = np.full((n, cap), -1, dtype=np.int64)
    old_lists = np.full((n, cap), -1, dtype=np.int64)
    new_cnt = np.zeros(n, dtype=np.int64)
    old_cnt = np.zeros(n, dtype=np.int64)
    _sample_forward(graph.ids, graph.dists, graph.flags, p, new_lists, new_cnt, old_lists, old_cnt)
    if params.deterministic:
        order = np.arange(n, dtype=np.int64)
    else:
        order = (rng or np.random.default_rng()).permutation(n).astype(np.int64)
    _sample_reverse(order, new_lists, new_cnt, new_cnt.copy(), cap)
    _sample_reverse(order, old_lists, old_cnt, old_cnt.copy(), cap)
    _sort_dedup(new_lists, new_cnt)
    _sort_dedup(old_lists, old_cnt)
    return SampleLists(new_lists, new_cnt, old_lists, old_cnt)


# --------------------------------------------------------------------------
# local join
# --------------------------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _same_subset(a, b, boundary):
    return (a < boundary) == (b < boundary)


@numba.njit(cache=True)
def _join_tables(data, kind, new_ids, m, old_ids, q, tri, rect, boundary, counters):
    """Fill one object's tables. ``counters`` gets [evals, same-subset evals]."""
    restrict = boundary >= 0
    inf = np.float32(np.inf)
    n_tri = m * (m - 1) // 2
    for t in range(n_tri):
        u = _pair_u(t)
        v = t - u * (u - 1) // 2
        a = new_ids[u]
        b = new_ids[v]
        if restrict and _same_subset(a, b, boundary):
            tri[t] = inf
            continue
        tri[t] = np.float32(distance(kind, data[a], data[b]))
        counters[0] += 1
        if restrict and _same_subset(a, b, boundary):
            counters[1] += 1
    for i0 in range(0, m, _TILE):
        i1 = min(i0 + _TILE, m)
        for j0 in range(0, q, _TILE):
            j1 = min(j0 + _TILE, q)
            for i in range(i0, i1):
                a = new_ids[i]
                for j in range(j0, j1):
                    b = old_ids[j]
                    if a == b or (restrict and _same_subset(a, b, boundary)):
                        rect[i * q + j] = inf
                        continue
                    rect[i * q + j] = np.float32(distance(kind, data[a], data[b]))
                    counters[0] += 1
                    if restrict and _same_subset(a, b, boundary):
                        counters[1] += 1


@numba.njit(parallel=True, cache=True)
def _join_block(data, kind, new_lists, new_cnt, old_lists, old_cnt, lo, hi, tri, rect, boundary, counters):
    for b in numba.prange(hi - lo):
        s = lo + b
        counters[b, 0] = 0
        counters[b, 1] = 0
        m = new_cnt[s]
        if m == 0:
            continue
        _join_tables(data, kind, new_lists[s], m, old_lists[s], old_cnt[s], tri[b], rect[b], boundary, counters[b])


# --------------------------------------------------------------------------
# candidate selection
# --------------------------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _tri_at(u, v):
    if u > v:
        return u * (u - 1) // 2 + v
    return v * (v - 1) // 2 + u


@numba.njit(cache=True)
def _emit(new_ids, m, old_ids, q, tri, rect, selective, out_t, out_c, out_d):
    """Write (target, candidate, dist) offers; returns how many were written."""
    inf = np.float32(np.inf)
    w = 0
    if selective:
        for u in range(m):
            bd = inf
            bi = SENTINEL_ID
            for v in range(m):
                if v == u:
                    continue
                d = tri[_tri_at(u, v)]
                if entry_less(d, new_ids[v], bd, bi):
                    bd = d
                    bi = new_ids[v]
            if bd < inf:
                out_t[w] = new_ids[u]
                out_c[w] = bi
                out_d[w] = bd
                w += 1
            bd = inf
            bi = SENTINEL_ID
            for j in range(q):
                d = rect[u * q + j]
                if entry_less(d, old_ids[j], bd, bi):
                    bd = d
                    bi = old_ids[j]
            if bd < inf:
                out_t[w] = new_ids[u]
                out_c[w] = bi
                out_d[w] = bd
                w += 1
        for j in range(q):
            bd = inf
            bi = SENTINEL_ID
            for u in range(m):
                d = rect[u * q + j]
                if entry_less(d, new_ids[u], bd, bi):
                    bd = d
                    bi = new_ids[u]
            if bd < inf:
                out_t[w] = old_ids[j]
                out_c[w] = bi
                out_d[w] = bd
                w += 1
    else:
        n_tri = m * (m - 1) // 2
        for t in range(n_tri):
            d = tri[t]
            if d < inf:
                u = _pair_u(t)
                v = t - u * (u - 1) // 2
                out_t[w] = new_ids[u]
                out_c[w] = new_ids[v]
                out_d[w] = d
                out_t[w + 1] = new_ids[v]
                out_c[w + 1] = new_ids[u]
                out_d[w + 1] = d
                w += 2
        for u in range(m):
            for j in range(q):
                d = rect[u * q + j]
                if d < inf:
                    out_t[w] = new_ids[u]
                    out_c[w] = old_ids[j]
                    out_d[w] = d
                    out_t[w + 1] = old_ids[j]
                    out_c[w + 1] = new_ids[u]
                    out_d[w + 1] = d
                    w += 2
    return w


@numba.njit(parallel=True, cache=True)
def _emit_block(new_lists, new_cnt, old_lists, old_cnt, lo, hi, tri, rect, selective, out_t, out_c, out_d, out_n):
    for b in numba.prange(hi - lo):
        s = lo + b
        m = new_cnt[s]
        if m == 0:
            out_n[b] = 0
            continue
        out_n[b] = _emit(new_lists[s], m, old_lists[s], old_cnt[s], tri[b], rect[b], selective,
                         out_t[b], out_c[b], out_d[b])


# --------------------------------------------------------------------------
# graph update
# --------------------------------------------------------------------------


@numba.njit(cache=True)
def _bucket(out_t, out_c, out_n, n_rows, s):
    """Stable counting sort of offers by (target row, target segment)."""
    n_keys = n_rows * s
    starts = np.zeros(n_keys + 1, dtype=np.int64)
    for b in range(out_n.shape[0]):
        for e in range(out_n[b]):
            starts[out_t[b, e] * s + out_c[b, e] % s + 1] += 1
    for key in range(n_keys):
        starts[key + 1] += starts[key]
    total = starts[n_keys]
    order_b = np.empty(total, dtype=np.int64)
    order_e = np.empty(total, dtype=np.int64)
    fill = starts[:-1].copy()
    for b in range(out_n.shape[0]):
        for e in range(out_n[b]):
            key = out_t[b, e] * s + out_c[b, e] % s
            pos = fill[key]
            order_b[pos] = b
            order_e[pos] = e
            fill[key] = pos + 1
    return starts, order_b, order_e


@numba.njit(parallel=True, cache=True)
def _apply(ids, dists, flags, seg_size, out_t, out_c, out_d, starts, order_b, order_e):
    n, k = ids.shape
    s = (k + seg_size - 1) // seg_size
    n_keys = starts.shape[0] - 1
    inserted = np.zeros(n_keys, dtype=np.int64)
    for key in numba.prange(n_keys):
        a = starts[key]
        z = starts[key + 1]
        if a == z:
            continue
        row = key // s
        j = key % s
        lo = j * seg_size
        hi = min(lo + seg_size, k)
        cnt = 0
        for pos in range(a, z):
            b = order_b[pos]
            e = order_e[pos]
            if segment_insert(ids[row], dists[row], flags[row], lo, hi, out_c[b, e], out_d[b, e], NEW) == INSERTED:
                cnt += 1
        inserted[key] = cnt
    return inserted.sum()


def _apply_offers(graph, out_t, out_c, out_d, out_n):
    s = -(-graph.k // graph.seg_size)
    starts, ob, oe = _bucket(out_t, out_c, out_n, graph.n, s)
    return int(_apply(graph.ids, graph.dists, graph.flags, graph.seg_size, out_t, out_c, out_d, starts, ob, oe))


# --------------------------------------------------------------------------
# public single-step API
# --------------------------------------------------------------------------


def _table_shapes(cap):
    return max(cap * (cap - 1) // 2, 1), max(cap * cap, 1)


def local_join(data, metric, samples, obj, boundary=-1):
    """Distance tables of one object's local join."""
    vectors = data.vectors if isinstance(data, Dataset) else np.ascontiguousarray(data, dtype=np.float32)
    new_ids = samples.new(obj).copy()
    old_ids = samples.old(obj).copy()
    m, q = len(new_ids), len(old_ids)
    tri = np.empty(m * (m - 1) // 2, dtype=np.float32)
    rect = np.empty(m * q, dtype=np.float32)
    counters = np.zeros(2, dtype=np.int64)
    if m:
        _join_tables(vectors, int(Metric.parse(metric)), new_ids, m, old_ids, q, tri, rect, boundary, counters)
    else:
        rect[:] = np.inf
    return DistanceTable(new_ids, old_ids, tri, rect, int(counters[0]))


def get_nearest_object(u, candidates, dists=None, lanes=32):
    """Nearest candidate to ``u`` by ``(dist, id)``; ``(SENTINEL_ID, inf)`` if none.

    ``candidates`` may be a mapping id -> dist. The minimum is reduced in
    groups of ``lanes`` padded with sentinels, halving the stride each round.
    """
    if dists is None:
        items = dict(candidates)
        cand = np.fromiter(items.keys(), dtype=np.int64, count=len(items))
        dist = np.fromiter(items.values(), dtype=np.float64, count=len(items))
    else:
        cand = np.asarray(candidates, dtype=np.int64).ravel()
        dist = np.asarray(dists, dtype=np.float64).ravel()
        if cand.shape != dist.shape:
            raise ValueError("candidates and dists differ in length")
    if cand.size == 0:
        return SENTINEL_ID, math.inf
    pad = (-cand.size) % lanes
    cand = np.concatenate([cand, np.full(pad, SENTINEL_ID, dtype=np.int64)]).reshape(-1, lanes)
    dist = np.concatenate([dist, np.full(pad, np.inf)]).reshape(-1, lanes)
    stride = lanes // 2
    while stride > 0:
        a_i, b_i = cand[:, :stride], cand[:, stride : 2 * stride]
        a_d, b_d = dist[:, :stride], dist[:, stride : 2 * stride]
        take = (b_d < a_d) | ((b_d == a_d) & (b_i < a_i))
        cand = np.where(take, b_i, a_i)
        dist = np.where(take, b_d, a_d)
        stride //= 2
    best = 0
    for w in range(1, cand.shape[0]):
        if dist[w, 0] < dist[best, 0] or (dist[w, 0] == dist[best, 0] and cand[w, 0] < cand[best, 0]):
            best = w
    return int(cand[best, 0]), float(dist[best, 0])


def update_step(graph, samples, tables, params):
    """Apply the offers of the given per-object tables; returns the insert count.

    ``tables`` maps object id to its :class:`DistanceTable`; objects are
    processed in ascending id order.
    """
    objs = sorted(tables)
    cap = params.update_cap
    out_t = np.zeros((len(objs), cap), dtype=np.int64)
    out_c = np.zeros((len(objs), cap), dtype=np.int64)
    out_d = np.zeros((len(objs), cap), dtype=np.float32)
    out_n = np.zeros(len(objs), dtype=np.int64)
    for b, s in enumerate(objs):
        t = tables[s]
        m, q = len(t.new_ids), len(t.old_ids)
        if m:
            out_n[b] = _emit(t.new_ids, m, t.old_ids, q, t.new_new, t.new_old,
                             params.selective_update, out_t[b], out_c[b], out_d[b])
    if graph.seg_size is None:
        graph.seg_size = graph.k
    return _apply_offers(graph, out_t, out_c, out_d, out_n)


# --------------------------------------------------------------------------
# iteration driver
# --------------------------------------------------------------------------


def _iterate(graph, data, params, boundary, iteration, rng):
    """One full sample/join/update round over every object."""
    t0 = time.perf_counter()
    samples = parallel_sample(graph, params, rng)
    t1 = time.perf_counter()

    n = graph.n
    cap = params.update_cap
    block = max(1, min(params.block_size, _UPDATE_BUFFER // cap, n))
    tri_w, rect_w = _table_shapes(2 * params.p)
    tri = np.empty((block, tri_w), dtype=np.float32)
    rect = np.empty((block, rect_w), dtype=np.float32)
    counters = np.zeros((block, 2), dtype=np.int64)
    out_t = np.empty((block, cap), dtype=np.int64)
    out_c = np.empty((block, cap), dtype=np.int64)
    out_d = np.empty((block, cap), dtype=np.float32)
    out_n = np.zeros(block, dtype=np.int64)
    kind = int(graph.metric)
    join_s = update_s = 0.0
    inserted = offered = evals = same = 0
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        a = time.perf_counter()
        _join_block(data, kind, samples.new_lists, samples.new_counts, samples.old_lists,
                    samples.old_counts, lo, hi, tri, rect, boundary, counters)
        b = time.perf_counter()
        _emit_block(samples.new_lists, samples.new_counts, samples.old_lists, samples.old_counts,
                    lo, hi, tri, rect, params.selective_update, out_t, out_c, out_d, out_n)
        out_n[hi - lo :] = 0
        inserted += _apply_offers(graph, out_t, out_c, out_d, out_n)
        c = time.perf_counter()
        join_s += b - a
        update_s += c - b
        offered += int(out_n.sum())
        evals += int(counters[: hi - lo, 0].sum())
        same += int(counters[: hi - lo, 1].sum())
    return IterationStats(
        iteration=iteration,
        phi=phi(graph),
        inserted=inserted,
        offered=offered,
        dist_evals=evals,
        same_subset_evals=same,
        seconds={"sample": t1 - t0, "join": join_s, "update": update_s},
    )


def run_iterations(graph, data, params, boundary=-1, history=None):
    """Refine a segmented graph in place for up to ``params.max_iter`` rounds.

    With ``boundary >= 0`` only pairs straddling the boundary are evaluated.
    """
    vectors = data.vectors if isinstance(data, Dataset) else data
    rng = None if params.deterministic else np.random.default_rng()
    for it in range(1, params.max_iter + 1):
        stats = _iterate(graph, vectors, params, boundary, it, rng)
        log.info(
            "iter %d phi=%.6g inserted=%d evals=%d sample=%.3fs join=%.3fs update=%.3fs",
            it, stats.phi, stats.inserted, stats.dist_evals,
            stats.seconds["sample"], stats.seconds["join"], stats.seconds["update"],
        )
        if history is not None:
            history.append(stats)
        if params.early_exit is not None and stats.inserted < params.early_exit * graph.n * graph.k:
            break
    return graph


def construct(data, metric, params, history=None):
    """Build a finalized approximate k-NN graph.

    ``history``, if given, receives one :class:`IterationStats` per round;
    entry 0 describes the random initial graph.
    """
    metric = Metric.parse(metric)
    data = data if isinstance(data, Dataset) else Dataset(data)
    check_domain(metric, data.vectors)
    t0 = time.perf_counter()
    graph = init_random_graph(data, params, metric)
    if history is not None:
        history.append(IterationStats(0, phi(graph), 0, 0, data.n * params.k,
                                      seconds={"init": time.perf_counter() - t0}))
    run_iterations(graph, data, params, history=history)
    return graph.finalize()

