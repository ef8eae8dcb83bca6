import numpy as np
import pytest

from conftest import uniform
from gnnd.builder import BuildParams, construct
from gnnd.errors import UsageError
from gnnd.evaluate import brute_force_graph, recall_at_k
from gnnd.graph import Dataset, KnnGraph
from gnnd.knnlist import NEW, OLD, SENTINEL_ID
from gnnd.merge import MergeContext, ggm_finalize, ggm_init, ggm_init_combined, ggm_merge, ggm_refine
from gnnd.metrics import metric_eval


def finalized(ids, dists, metric="l2"):
    return KnnGraph.from_arrays(np.array(ids), np.array(dists, dtype=np.float32), metric)


def test_init_keeps_front_half_and_draws_cross_samples():
    x = uniform(12, 3, seed=1)
    # S1 = objects 0..5, S2 = 6..11, k = 4, one segment
    g1 = brute_force_graph(x[:6], "l2", 4)
    g2 = brute_force_graph(x[6:], "l2", 4)
    params = BuildParams(k=4, p=2, seg_size=4, deterministic=True)
    graph, ctx = ggm_init(g1, g2, x, seed=3, params=params)
    for i in range(12):
        a, b, c, d = (g1.ids[i] if i < 6 else g2.ids[i - 6] + 6).tolist()
        row = dict(zip(graph.ids[i].tolist(), graph.flags[i].tolist()))
        assert row[a] == OLD and row[b] == OLD
        cross = [v for v in row if v not in (a, b)]
        assert len(set(cross)) == 2
        assert all((v >= 6) != (i >= 6) for v in cross)
        assert all(row[v] == NEW for v in cross)
        for v, dv in zip(graph.ids[i], graph.dists[i]):
            assert dv == np.float32(metric_eval("l2", x[i], x[v]))
        assert ctx.reserved(i)[0].tolist() == [c, d]


def test_init_is_deterministic():
    x = uniform(400, 4)
    g1 = construct(x[:200], "l2", BuildParams(k=8, p=4, seg_size=3))
    g2 = construct(x[200:], "l2", BuildParams(k=8, p=4, seg_size=3))
    params = BuildParams(k=8, p=4, seg_size=3)
    a, _ = ggm_init(g1, g2, x, seed=5, params=params)
    b, _ = ggm_init(g1, g2, x, seed=5, params=params)
    np.testing.assert_array_equal(a.ids, b.ids)
    a.validate(allow_sentinels=True)


def test_other_subset_too_small():
    x = uniform(8, 2)
    g1 = brute_force_graph(x[:7], "l2", 4)
    g2 = finalized([[0]], [[0.0]])  # degree mismatch is caught first
    with pytest.raises(UsageError):
        ggm_init(g1, g2, x)
    params = BuildParams(k=4, p=2, seg_size=4)
    ids = np.vstack([g1.ids, [[0, 1, 2, 3]]])
    dists = np.vstack([g1.dists, np.ones((1, 4), dtype=np.float32)])
    with pytest.raises(UsageError):
        ggm_init_combined(ids, dists, 7, x, "l2", params, seed=0)


def test_metric_mismatch():
    x = uniform(20, 2, positive=True)
    g1 = brute_force_graph(x[:10], "l2", 3)
    g2 = brute_force_graph(x[10:], "chi2", 3)
    with pytest.raises(UsageError):
        ggm_merge(g1, g2, x[:10], x[10:], BuildParams(k=3, p=1))


def context(reserved_ids, reserved_dists, n=4):
    return MergeContext(2, np.array(reserved_ids, dtype=np.int64),
                        np.array(reserved_dists, dtype=np.float32), Dataset(uniform(n, 2)))


def test_finalize_dominance_reentry_and_dedup():
    refined = KnnGraph(np.array([[2, 3], [2, 3], [0, 1], [0, 1]], dtype=np.int64),
                       np.array([[0.1, 0.2], [0.1, 0.2], [0.1, 0.2], [0.1, 0.2]], dtype=np.float32),
                       np.zeros((4, 2), dtype=np.uint8), "l2", 2)
    s = SENTINEL_ID
    ctx = context([[1, s], [0, s], [3, s], [2, s]], [[0.05, np.inf], [0.5, np.inf], [0.2, np.inf], [0.1, np.inf]])
    out = ggm_finalize(refined, ctx)
    assert out.ids[0].tolist() == [1, 2]        # closer reserve re-enters
    assert out.ids[1].tolist() == [2, 3]        # farther reserve stays out
    assert out.ids[2].tolist() == [0, 1]        # reserve ties lose to smaller id
    assert out.ids[3].tolist() == [0, 2]        # equal-distance reserve beats a farther entry
    dup = context([[3, s]] * 4, [[0.2, np.inf]] * 4)
    assert ggm_finalize(refined, dup).ids[0].tolist() == [2, 3]  # same id kept once


def test_refine_never_evaluates_same_subset_pairs():
    x = uniform(1200, 6, seed=2)
    params = BuildParams(k=10, p=5, seg_size=4, max_iter=4)
    g1 = construct(x[:600], "l2", params)
    g2 = construct(x[600:], "l2", params)
    graph, ctx = ggm_init(g1, g2, x, params=params)
    history = []
    ggm_refine(graph, ctx, params, history)
    assert len(history) == 4
    assert sum(h.dist_evals for h in history) > 0
    assert all(h.same_subset_evals == 0 for h in history)


def test_merge_quality_and_shape():
    x = uniform(3000, 8, seed=4)
    params = BuildParams(k=16, p=8, seg_size=8)
    truth = brute_force_graph(x, "l2", 10)
    direct = recall_at_k(construct(x, "l2", params), truth, 10)
    g1 = construct(x[:1500], "l2", params)
    g2 = construct(x[1500:], "l2", params)
    merged = ggm_merge(g1, g2, x[:1500], x[1500:], BuildParams(k=16, p=8, seg_size=8, max_iter=4))
    assert merged.n == 3000
    merged.validate()
    assert recall_at_k(merged, truth, 10) >= direct - 0.05


def test_merge_deterministic():
    x = uniform(1000, 4, seed=6)
    params = BuildParams(k=8, p=4, seg_size=4, deterministic=True, max_iter=3)
    g1 = construct(x[:500], "l2", params)
    g2 = construct(x[500:], "l2", params)
    a = ggm_merge(g1, g2, x[:500], x[500:], params)
    b = ggm_merge(g1, g2, x[:500], x[500:], params)
    np.testing.assert_array_equal(a.ids, b.ids)
    np.testing.assert_array_equal(a.dists, b.dists)


def test_external_ids_are_reserved_and_survive():
    x = uniform(40, 2, seed=7)
    g = brute_force_graph(x, "l2", 4)
    ids = g.ids.copy()
    dists = g.dists.copy()
    ids[:, 0] = 1000 + np.arange(40)  # objects outside both subsets, nearest of all
    dists[:, 0] = 0.0
    params = BuildParams(k=4, p=2, seg_size=4, max_iter=2)
    graph, ctx = ggm_init_combined(ids, dists, 20, x, "l2", params, seed=1)
    assert (graph.ids < 40).all() | (graph.ids == SENTINEL_ID).all()
    ggm_refine(graph, ctx, params)
    out = ggm_finalize(graph, ctx)
    assert out.ids[:, 0].tolist() == (1000 + np.arange(40)).tolist()
