"""Ground-truth oracle and graph quality measures."""

import math

import numba
import numpy as np

from ._schedule import round_robin
from .errors import UsageError
from .knnlist import OLD, SENTINEL_ID, entry_less
from .metrics import Metric, check_domain, distance

_BF_BLOCK = 256


def phi(graph):
    """Sum of every stored neighbor distance (exactly rounded)."""
    dists = graph.dists if hasattr(graph, "dists") else np.asarray(graph)
    return math.fsum(dists.ravel().tolist())


@numba.njit(cache=True, inline="always")
def _push(ids, dists, k, j, d):
    if not entry_less(d, j, dists[k - 1], ids[k - 1]):
        return
    i = k - 1
    while i > 0 and entry_less(d, j, dists[i - 1], ids[i - 1]):
        ids[i] = ids[i - 1]
        dists[i] = dists[i - 1]
        i -= 1
    ids[i] = j
    dists[i] = d


@numba.njit(parallel=True, cache=True)
def _bf_round(data, kind, tiles, block, ids, dists):
    n, k = ids.shape
    evals = np.zeros(tiles.shape[0], dtype=np.int64)
    for r in numba.prange(tiles.shape[0]):
        bi = tiles[r, 0]
        bj = tiles[r, 1]
        i0 = bi * block
        i1 = min(i0 + block, n)
        j0 = bj * block
        j1 = min(j0 + block, n)
        cnt = 0
        for i in range(i0, i1):
            start = i + 1 if bi == bj else j0
            for j in range(start, j1):
                d = np.float32(distance(kind, data[i], data[j]))
                cnt += 1
                _push(ids[i], dists[i], k, j, d)
                _push(ids[j], dists[j], k, i, d)
        evals[r] = cnt
    return evals.sum()


def brute_force_graph(data, metric, k, return_evals=False):
    """Exact k-NN graph by evaluating every unordered pair once."""
    from .graph import Dataset, KnnGraph

    data = data if isinstance(data, Dataset) else Dataset(data)
    metric = Metric.parse(metric)
    check_domain(metric, data.vectors)
    n = data.n
    if n <= k:
        raise UsageError(f"need n > k, got n={n}, k={k}")
    ids = np.full((n, k), SENTINEL_ID, dtype=np.int64)
    dists = np.full((n, k), np.inf, dtype=np.float32)
    nb = -(-n // _BF_BLOCK)
    rounds = [[(b, b) for b in range(nb)]] + round_robin(nb)
    evals = 0
    for rnd in rounds:
        tiles = np.asarray(rnd, dtype=np.int64).reshape(-1, 2)
        evals += int(_bf_round(data.vectors, int(metric), tiles, _BF_BLOCK, ids, dists))
    graph = KnnGraph(ids, dists, np.full((n, k), OLD, dtype=np.uint8), metric, None)
    return (graph, evals) if return_evals else graph


def recall_at_k(graph, truth, k_eval=10, ties=True):
    """Fraction of true top-``k_eval`` neighbors found, averaged over objects.

    ``truth`` is a graph or an id matrix. When both sides carry distances
    and ``ties`` is set, an entry at or below the true k-th distance counts
    as correct, so equally distant alternatives are not penalized.
    """
    g_ids = np.asarray(getattr(graph, "ids", graph))
    t_ids = np.asarray(getattr(truth, "ids", truth))
    if g_ids.shape[0] != t_ids.shape[0]:
        raise UsageError(f"graphs differ in size: {g_ids.shape[0]} vs {t_ids.shape[0]}")
    if k_eval < 1 or k_eval > g_ids.shape[1] or k_eval > t_ids.shape[1]:
        raise UsageError(
            f"k_eval={k_eval} exceeds graph degree {g_ids.shape[1]} or truth degree {t_ids.shape[1]}"
        )
    g = g_ids[:, :k_eval]
    t = t_ids[:, :k_eval]
    hit = (g[:, :, None] == t[:, None, :]).any(axis=2)
    g_d = getattr(graph, "dists", None)
    t_d = getattr(truth, "dists", None)
    if ties and g_d is not None and t_d is not None:
        hit |= g_d[:, :k_eval] <= t_d[:, k_eval - 1 : k_eval]
    found = np.minimum(hit.sum(axis=1), k_eval)
    return float(found.sum()) / (g.shape[0] * k_eval)
