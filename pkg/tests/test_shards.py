import json

import numpy as np
import pytest

from conftest import uniform
from gnnd import shards
from gnnd.builder import BuildParams, construct
from gnnd.errors import UsageError
from gnnd.io import read_graph_header, write_vecs
from gnnd.merge import ggm_merge
from gnnd.shards import (
    ShardCache,
    ShardManifest,
    build_shards,
    export_graph,
    ingest,
    merge_all,
    merge_seed,
    partition,
    pipeline_schedule,
    run_pipeline,
    shard_seed,
)

PARAMS = BuildParams(k=8, p=4, seg_size=4, max_iter=3, deterministic=True, seed=5)


def test_partition_ranges(tmp_path):
    m = partition(uniform(20000, 2), 5000, tmp_path, k=8)
    assert m.shard_ranges == [(0, 5000), (5000, 10000), (10000, 15000), (15000, 20000)]
    assert len(m.schedule) == 6
    assert sorted(m.schedule) == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["metric"] == "l2" and doc["shards"][3]["range"] == [15000, 20000]
    loaded = ShardManifest.load(tmp_path)
    assert loaded.shard_ranges == m.shard_ranges and loaded.schedule == m.schedule


def test_partition_rejects_tiny_last_shard(tmp_path):
    with pytest.raises(UsageError):
        partition(uniform(20001, 2), 5000, tmp_path, k=8)
    with pytest.raises(UsageError):
        partition(uniform(100, 2), 8, tmp_path, k=8)


def test_partition_from_file(tmp_path):
    x = uniform(300, 3)
    write_vecs(tmp_path / "x.fvecs", x)
    m = partition(tmp_path / "x.fvecs", 100, tmp_path / "run", k=8)
    assert m.n == 300 and m.d == 3 and m.shard_count == 3


def test_missing_source_is_io_error(tmp_path):
    with pytest.raises(OSError):
        partition(tmp_path / "nope.fvecs", 100, tmp_path / "run", k=8)


def test_manifest_validation(tmp_path):
    partition(uniform(300, 2), 100, tmp_path, k=8)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["schedule"] = doc["schedule"][:-1]
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        ShardManifest.load(tmp_path)


def simulate(steps, count):
    """Replay a plan against a two-slot cache; returns shard loads."""
    resident, loads = [], 0
    for step in steps:
        for s in step.pair:
            if s not in resident:
                loads += 1
                resident = [r for r in resident if r in step.pair][-1:] + [s]
        assert set(step.prefetch) <= set(range(count)) - set(step.pair)
    return loads


@pytest.mark.parametrize("count", [2, 3, 4, 5, 8])
def test_plan_is_valid(tmp_path, count):
    m = partition(uniform(100 * count, 2), 100, tmp_path, k=8)
    steps = pipeline_schedule(m)
    assert sorted(s.pair for s in steps) == sorted(m.schedule)
    waves = {}
    for s in steps:
        waves.setdefault(s.wave, []).append(s.pair)
    for pairs in waves.values():
        flat = [x for p in pairs for x in p]
        assert len(flat) == len(set(flat))
    assert [s.wave for s in steps] == sorted(s.wave for s in steps)
    for a, b in zip(steps, steps[1:]):
        assert set(a.prefetch) == set(b.pair) - set(a.pair)
    assert steps[-1].prefetch == ()
    assert simulate(steps, count) < 2 * len(steps) or count == 2
    if count == 2:
        assert [s.pair for s in steps] == [(0, 1)]


def test_shard_cache_capacity(tmp_path):
    m = partition(uniform(400, 2), 100, tmp_path, k=8)
    cache = ShardCache(m)
    cache.get(0)
    cache.get(1, keep=(0,))
    cache.get(2, keep=(1,))
    assert cache.resident == [1, 2]
    assert cache.peak == 2
    with pytest.raises(RuntimeError):
        cache.get(3, keep=(1, 2))


def test_build_skips_completed_shards(tmp_path, monkeypatch):
    m = partition(uniform(300, 3), 100, tmp_path, k=8)
    build_shards(m, PARAMS)
    calls = []
    monkeypatch.setattr(shards, "construct", lambda *a, **kw: calls.append(a))
    build_shards(m, PARAMS)
    assert calls == []


def test_two_shard_pipeline_equals_in_memory_merge(tmp_path):
    x = uniform(600, 4, seed=2)
    m = run_pipeline(x, tmp_path, PARAMS, 300)
    out = export_graph(m)
    g1 = construct(x[:300], "l2", BuildParams(**{**PARAMS.__dict__, "seed": shard_seed(PARAMS.seed, 0)}))
    g2 = construct(x[300:], "l2", BuildParams(**{**PARAMS.__dict__, "seed": shard_seed(PARAMS.seed, 1)}))
    ref = ggm_merge(g1, g2, x[:300], x[300:], PARAMS, seed=merge_seed(PARAMS.seed, 0, 1))
    assert out.ids.tobytes() == ref.ids.tobytes()
    assert out.dists.tobytes() == ref.dists.tobytes()


def test_pipeline_rerun_bit_identical(tmp_path):
    x = uniform(800, 4, seed=3)
    a = export_graph(run_pipeline(x, tmp_path / "a", PARAMS, 200))
    b = export_graph(run_pipeline(x, tmp_path / "b", PARAMS, 200))
    assert a.ids.tobytes() == b.ids.tobytes() and a.dists.tobytes() == b.dists.tobytes()
    a.validate()


def test_pipeline_requires_resume_flag(tmp_path):
    x = uniform(400, 2)
    run_pipeline(x, tmp_path, PARAMS, 200)
    with pytest.raises(UsageError):
        run_pipeline(x, tmp_path, PARAMS, 200)
    with pytest.raises(UsageError):
        run_pipeline(x, tmp_path, PARAMS, 100, resume=True)


def test_resume_after_interruption_completes_remaining_only(tmp_path, monkeypatch):
    x = uniform(800, 4, seed=4)
    reference = export_graph(run_pipeline(x, tmp_path / "ref", PARAMS, 200))

    real = shards.merge_pair
    seen = []

    def flaky(m, i, j, params, cache=None):
        if len(seen) == 3:
            raise KeyboardInterrupt
        seen.append((i, j))
        return real(m, i, j, params, cache)

    monkeypatch.setattr(shards, "merge_pair", flaky)
    with pytest.raises(KeyboardInterrupt):
        run_pipeline(x, tmp_path / "run", PARAMS, 200)
    monkeypatch.setattr(shards, "merge_pair", real)

    m = ShardManifest.load(tmp_path / "run")
    assert sorted(m.done) == sorted(seen)
    build_shards(m, PARAMS)
    merged, peak = merge_all(m, PARAMS)
    assert merged == 3 and peak <= 2
    out = export_graph(m)
    assert out.ids.tobytes() == reference.ids.tobytes()


def test_interrupted_commit_rolls_forward(tmp_path, monkeypatch):
    x = uniform(400, 4, seed=5)
    reference = export_graph(run_pipeline(x, tmp_path / "ref", PARAMS, 200))
    m = partition(x, 200, tmp_path / "run", PARAMS.k)
    build_shards(m, PARAMS)

    def crash(journal):
        raise KeyboardInterrupt

    monkeypatch.setattr(shards, "_roll_forward", crash)
    with pytest.raises(KeyboardInterrupt):
        merge_all(m, PARAMS)
    monkeypatch.undo()
    assert list((tmp_path / "run" / "markers").glob("*.commit"))
    merged, _ = merge_all(m, PARAMS)
    assert merged == 0
    assert export_graph(m).ids.tobytes() == reference.ids.tobytes()


def test_merged_files_use_global_ids(tmp_path):
    m = run_pipeline(uniform(600, 3), tmp_path, PARAMS, 200)
    for s in m.shards:
        assert read_graph_header(m.path(s.graph_file)).global_ids


def test_multiple_workers_complete_schedule(tmp_path):
    x = uniform(1200, 4, seed=6)
    m = partition(x, 200, tmp_path, PARAMS.k)
    build_shards(m, PARAMS)
    merged, peak = merge_all(m, PARAMS, workers=2)
    assert merged == 15 and peak <= 2
    m = ShardManifest.load(tmp_path)
    assert sorted(m.done) == sorted(m.schedule)
    export_graph(m).validate()


def test_ingest_appends_shards(tmp_path):
    x = uniform(900, 4, seed=7)
    run_pipeline(x[:600], tmp_path, PARAMS, 200)
    m = ingest(tmp_path, x[600:], PARAMS)
    assert m.n == 900 and m.shard_count == 5
    assert sorted(m.done) == sorted(m.schedule) and len(m.schedule) == 10
    g = export_graph(m)
    assert g.n == 900
    g.validate()
    with pytest.raises(UsageError):
        ingest(tmp_path, uniform(300, 5), PARAMS)


def test_shard_subgraphs_are_local_and_accurate(tmp_path):
    from gnnd.evaluate import brute_force_graph, recall_at_k
    from gnnd.io import read_graph

    x = uniform(2000, 16, seed=8)
    params = BuildParams(deterministic=True)
    m = build_shards(partition(x, 1000, tmp_path, params.k), params)
    for s in m.shards:
        g = read_graph(m.path(s.graph_file))
        assert g.ids.min() >= 0 and g.ids.max() < s.size
        truth = brute_force_graph(x[s.lo:s.hi], "l2", 10)
        assert recall_at_k(g, truth, 10) >= 0.95


def test_merged_lists_accumulate_partner_ids(tmp_path):
    from gnnd.io import read_graph
    from gnnd.shards import merge_pair

    m = partition(uniform(600, 3, seed=9), 200, tmp_path, PARAMS.k)
    build_shards(m, PARAMS)
    merge_pair(m, 0, 1, PARAMS)
    merge_pair(m, 0, 2, PARAMS)
    g0 = read_graph(m.path(m.shards[0].graph_file))
    assert ((g0.ids >= 200) & (g0.ids < 400)).any()  # from the first partner
    assert (g0.ids >= 400).any()                      # and the second
    g2 = read_graph(m.path(m.shards[2].graph_file))
    assert g2.ids.max() < 600
