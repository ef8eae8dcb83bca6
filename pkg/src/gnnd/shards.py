"""Out-of-core construction: partition into shards, build each, merge every pair.

Directory layout under a pipeline root::

    manifest.json
    shards/shard-0000.fvecs     shard vectors
    graphs/shard-0000.knng      shard sub-graph (local ids until first merged)
    markers/                    completion markers and per-shard locks

A merge step commits its two output files through a journal marker so an
interrupted step is either rolled forward on resume or redone from the
untouched inputs. Markers are authoritative; the manifest's ``done`` list
mirrors them.
"""

import json
import logging
import multiprocessing
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from ._schedule import round_robin
from .builder import BuildParams, construct
from .errors import FormatError, UsageError
from .graph import Dataset, KnnGraph
from .io import load_vecs, read_graph, read_vecs, write_graph, write_vecs
from .knnlist import OLD, SENTINEL_ID
from .merge import ggm_finalize, ggm_init_combined, ggm_refine
from .metrics import Metric, check_domain

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST = "manifest.json"


def shard_seed(seed, index):
    return int(np.random.SeedSequence([seed, 1, index]).generate_state(1)[0])


def merge_seed(seed, i, j):
    return int(np.random.SeedSequence([seed, 2, i, j]).generate_state(1)[0])


@dataclass
class ShardInfo:
    index: int
    lo: int
    hi: int
    vec_file: str
    graph_file: str

    @property
    def size(self):
        return self.hi - self.lo

    def to_json(self):
        return {"index": self.index, "range": [self.lo, self.hi],
                "vec_file": self.vec_file, "graph_file": self.graph_file}


@dataclass
class ShardManifest:
    n: int
    d: int
    k: int
    metric: Metric
    shard_size: int
    shards: list
    schedule: list
    done: list = field(default_factory=list)
    root: Path = Path(".")
    version: int = MANIFEST_VERSION

    @property
    def shard_count(self):
        return len(self.shards)

    @property
    def shard_ranges(self):
        return [(s.lo, s.hi) for s in self.shards]

    def path(self, rel):
        return self.root / rel

    def marker(self, name):
        return self.root / "markers" / name

    def to_json(self):
        return {
            "version": self.version,
            "n": self.n,
            "d": self.d,
            "k": self.k,
            "metric": self.metric.cli_name,
            "shard_size": self.shard_size,
            "shards": [s.to_json() for s in self.shards],
            "schedule": [list(p) for p in self.schedule],
            "done": [list(p) for p in self.done],
        }

    def save(self):
        with FileLock(str(self.root / (MANIFEST + ".lock"))):
            self.done = sorted(p for p in self.schedule if _merge_done(self, *p))
            tmp = self.root / (MANIFEST + ".tmp")
            tmp.write_text(json.dumps(self.to_json(), indent=2) + "\n")
            os.replace(tmp, self.root / MANIFEST)

    @classmethod
    def load(cls, root):
        root = Path(root)
        path = root / MANIFEST if root.is_dir() else root
        try:
            doc = json.loads(path.read_text())
            shards = [ShardInfo(s["index"], s["range"][0], s["range"][1], s["vec_file"], s["graph_file"])
                      for s in doc["shards"]]
            m = cls(doc["n"], doc["d"], doc["k"], Metric.parse(doc["metric"]), doc["shard_size"],
                    shards, [tuple(p) for p in doc["schedule"]], [tuple(p) for p in doc["done"]],
                    path.parent, doc["version"])
        except (KeyError, TypeError, IndexError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: malformed manifest ({exc})") from None
        if m.version != MANIFEST_VERSION:
            raise FormatError(f"{path}: unsupported manifest version {m.version}")
        m.validate()
        return m

    def validate(self):
        pos = 0
        for idx, s in enumerate(self.shards):
            if s.index != idx or s.lo != pos or s.hi <= s.lo:
                raise FormatError(f"shard ranges do not partition [0, {self.n})")
            pos = s.hi
        if pos != self.n:
            raise FormatError(f"shard ranges cover [0, {pos}) but n={self.n}")
        pairs = [tuple(sorted(p)) for p in self.schedule]
        expected = {(i, j) for i in range(self.shard_count) for j in range(i + 1, self.shard_count)}
        if len(pairs) != len(set(pairs)) or set(pairs) != expected:
            raise FormatError("merge schedule must list every shard pair exactly once")


@dataclass(frozen=True)
class PlanStep:
    pair: tuple
    wave: int
    prefetch: tuple = ()


# --------------------------------------------------------------------------
# markers
# --------------------------------------------------------------------------


def _touch_exclusive(path):
    """Create a marker file; False if it already exists."""
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        return False
    os.write(fd, f"{os.getpid()} {time.time():.3f}\n".encode())
    os.close(fd)
    return True


def _built(m, i):
    return m.marker(f"build-{i:04d}.done").exists()


def _merge_done(m, i, j):
    return m.marker(f"merge-{i:04d}-{j:04d}.done").exists()


# --------------------------------------------------------------------------
# partition
# --------------------------------------------------------------------------


def partition(source, shard_size, root, k, metric=Metric.SQEUCLIDEAN):
    """Split ``source`` (vecs path or matrix) into shard files under ``root``."""
    metric = Metric.parse(metric)
    if shard_size <= k:
        raise UsageError(f"shard_size must exceed k ({shard_size} <= {k})")
    if isinstance(source, (str, os.PathLike)):
        vectors = load_vecs(source, mmap=True)
    else:
        vectors = source.vectors if isinstance(source, Dataset) else np.asarray(source)
    if vectors.ndim != 2 or vectors.shape[0] < 1:
        raise UsageError("source must be a non-empty 2-d matrix")
    n, d = vectors.shape
    bounds = [(lo, min(lo + shard_size, n)) for lo in range(0, n, shard_size)]
    last = bounds[-1][1] - bounds[-1][0]
    if last <= k:
        raise UsageError(
            f"last shard would hold {last} objects, not more than k={k}; choose another shard size"
        )
    root = Path(root)
    for sub in ("shards", "graphs", "markers"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    shards = []
    for idx, (lo, hi) in enumerate(bounds):
        info = ShardInfo(idx, lo, hi, f"shards/shard-{idx:04d}.fvecs", f"graphs/shard-{idx:04d}.knng")
        block = np.asarray(vectors[lo:hi], dtype=np.float32)
        check_domain(metric, block)
        if not np.all(np.isfinite(block)):
            raise UsageError(f"shard {idx} contains non-finite components")
        write_vecs(root / info.vec_file, block)
        shards.append(info)
    schedule = [(i, j) for i in range(len(shards)) for j in range(i + 1, len(shards))]
    m = ShardManifest(n, d, k, metric, shard_size, shards, schedule, [], root)
    m.save()
    return m


# --------------------------------------------------------------------------
# per-shard builds
# --------------------------------------------------------------------------


def build_shards(manifest, params):
    """Build every shard lacking a completion marker; returns the manifest."""
    m = manifest
    _check_params(m, params)
    for s in m.shards:
        if _built(m, s.index):
            log.info("shard %d already built, skipping", s.index)
            continue
        data = read_vecs(m.path(s.vec_file))
        graph = construct(data, m.metric, replace(params, seed=shard_seed(params.seed, s.index)))
        write_graph(graph, m.path(s.graph_file))
        _touch_exclusive(m.marker(f"build-{s.index:04d}.done"))
        log.info("built shard %d (%d objects)", s.index, s.size)
    return m


def _check_params(m, params):
    if params.k != m.k:
        raise UsageError(f"params.k={params.k} but the manifest was partitioned for k={m.k}")


# --------------------------------------------------------------------------
# shard residency
# --------------------------------------------------------------------------


class ShardCache:
    """Holds the vectors of at most ``capacity`` shards; records the peak."""

    def __init__(self, manifest, capacity=2):
        self.manifest = manifest
        self.capacity = capacity
        self._data = {}
        self.peak = 0
        self.loads = 0

    def get(self, index, keep=()):
        if index not in self._data:
            for other in [i for i in self._data if i not in keep]:
                if len(self._data) < self.capacity:
                    break
                del self._data[other]
            if len(self._data) >= self.capacity:
                raise RuntimeError("shard cache over capacity")
            self._data[index] = read_vecs(self.manifest.path(self.manifest.shards[index].vec_file)).vectors
            self.loads += 1
            self.peak = max(self.peak, len(self._data))
        return self._data[index]

    @property
    def resident(self):
        return sorted(self._data)


def _prefetch(manifest, shard_indices):
    """Ask the OS to read ahead the next step's files without loading them."""
    advise = getattr(os, "posix_fadvise", None)
    if advise is None:
        return
    for i in shard_indices:
        s = manifest.shards[i]
        for rel in (s.vec_file, s.graph_file):
            try:
                fd = os.open(manifest.path(rel), os.O_RDONLY)
            except OSError:
                continue
            try:
                advise(fd, 0, 0, os.POSIX_FADV_WILLNEED)
            except OSError:
                pass
            finally:
                os.close(fd)


# --------------------------------------------------------------------------
# merge schedule
# --------------------------------------------------------------------------


def pipeline_schedule(manifest):
    """Execution order for the merge schedule.

    Pairs are grouped in waves of shard-disjoint pairs (safe to run
    concurrently); consecutive steps are arranged to share a shard where
    possible so only one new shard must be read. ``prefetch`` names the
    shards the following step needs that the current one does not hold.
    """
    count = manifest.shard_count
    waves = round_robin(count)
    wanted = {tuple(sorted(p)) for p in manifest.schedule}
    order = []
    for w, pairs in enumerate(waves):
        pairs = [p for p in pairs if p in wanted]
        prev = order[-1][0] if order else None
        if prev is not None:
            # start the wave with a pair that reuses a resident shard
            pairs.sort(key=lambda p: (not set(p) & set(prev), p))
        order.extend((p, w) for p in pairs)
    steps = []
    for idx, (pair, w) in enumerate(order):
        nxt = order[idx + 1][0] if idx + 1 < len(order) else ()
        steps.append(PlanStep(pair, w, tuple(s for s in nxt if s not in pair)))
    return steps


def _load_graph(m, index):
    s = m.shards[index]
    graph, header = read_graph(m.path(s.graph_file), return_header=True)
    if graph.n != s.size or graph.k != m.k:
        raise FormatError(f"shard {index} graph is {graph.n}x{graph.k}, expected {s.size}x{m.k}")
    if not header.global_ids:
        graph.ids += s.lo
    return graph


def _to_combined(ids, a, b):
    n_a = a.size
    n_tot = n_a + b.size
    in_a = (ids >= a.lo) & (ids < a.hi)
    in_b = (ids >= b.lo) & (ids < b.hi)
    out = ids + n_tot
    out[in_a] = ids[in_a] - a.lo
    out[in_b] = ids[in_b] - b.lo + n_a
    return out


def _from_combined(ids, a, b):
    n_a = a.size
    n_tot = n_a + b.size
    out = ids - n_tot
    in_a = ids < n_a
    in_b = (ids >= n_a) & (ids < n_tot)
    out[in_a] = ids[in_a] + a.lo
    out[in_b] = ids[in_b] - n_a + b.lo
    return out


def merge_pair(manifest, i, j, params, cache=None):
    """Merge shards ``i`` and ``j`` and commit both rewritten sub-graphs."""
    m = manifest
    if _merge_done(m, i, j):
        return False
    cache = cache or ShardCache(m)
    a, b = m.shards[i], m.shards[j]
    xa = cache.get(i, keep=(j,))
    xb = cache.get(j, keep=(i,))
    ga = _load_graph(m, i)
    gb = _load_graph(m, j)
    ids = _to_combined(np.concatenate([ga.ids, gb.ids]), a, b)
    dists = np.concatenate([ga.dists, gb.dists])
    data = Dataset(np.concatenate([xa, xb]))
    graph, ctx = ggm_init_combined(ids, dists, a.size, data, m.metric, params, merge_seed(params.seed, i, j))
    ggm_refine(graph, ctx, params)
    merged = ggm_finalize(graph, ctx)
    out = _from_combined(merged.ids, a, b)
    wide = bool(out.max() > np.iinfo(np.uint32).max)
    journal = m.marker(f"merge-{i:04d}-{j:04d}.commit")
    staged = []
    for info, rows in ((a, slice(0, a.size)), (b, slice(a.size, None))):
        part = KnnGraph(out[rows].copy(), merged.dists[rows].copy(),
                        np.full((info.size, m.k), OLD, dtype=np.uint8), m.metric, None)
        tmp = m.path(info.graph_file + ".next")
        write_graph(part, tmp, global_ids=True, wide_ids=wide)
        staged.append((tmp, m.path(info.graph_file)))
    journal.write_text("\n".join(f"{s}\t{d}" for s, d in staged) + "\n")
    _roll_forward(journal)
    _touch_exclusive(m.marker(f"merge-{i:04d}-{j:04d}.done"))
    journal.unlink()
    log.info("merged shards %d and %d", i, j)
    return True


def _roll_forward(journal):
    for line in journal.read_text().splitlines():
        src, dst = line.split("\t")
        if os.path.exists(src):
            os.replace(src, dst)


def recover(manifest):
    """Finish merge commits interrupted between their file renames."""
    m = manifest
    for journal in sorted((m.root / "markers").glob("merge-*.commit")):
        _roll_forward(journal)
        _touch_exclusive(journal.with_suffix(".done"))
        journal.unlink()


def _run_plan(manifest, params, steps, lock_timeout):
    m = manifest
    cache = ShardCache(m)
    merged = 0
    pending = [s for s in steps if not _merge_done(m, *s.pair)]
    while pending:
        progressed = False
        for step in list(pending):
            i, j = step.pair
            if _merge_done(m, i, j):
                pending.remove(step)
                continue
            locks = [FileLock(str(m.marker(f"shard-{x:04d}.lock"))) for x in (i, j)]
            try:
                for lock in locks:
                    lock.acquire(timeout=lock_timeout)
            except Timeout:
                for lock in locks:
                    if lock.is_locked:
                        lock.release()
                continue
            try:
                _prefetch(m, step.prefetch)
                if merge_pair(m, i, j, params, cache):
                    merged += 1
                    m.save()
            finally:
                for lock in reversed(locks):
                    lock.release()
            pending.remove(step)
            progressed = True
        if pending and not progressed:
            time.sleep(0.05)
    return merged, cache.peak


def _worker(root, params, lock_timeout):
    m = ShardManifest.load(root)
    return _run_plan(m, params, pipeline_schedule(m), lock_timeout)


def merge_all(manifest, params, workers=1):
    """Run every outstanding merge step; returns (steps merged, peak resident shards).

    With ``workers > 1`` independent steps run in separate processes that
    coordinate through per-shard file locks and completion markers.
    """
    m = manifest
    _check_params(m, params)
    missing = [s.index for s in m.shards if not _built(m, s.index)]
    if missing:
        raise UsageError(f"shards {missing} have not been built")
    recover(m)
    if workers <= 1:
        result = _run_plan(m, params, pipeline_schedule(m), lock_timeout=0)
    else:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(workers) as pool:
            parts = pool.starmap(_worker, [(str(m.root), params, 0)] * workers)
        result = (sum(p[0] for p in parts), max(p[1] for p in parts))
    m.save()
    return result


def export_graph(manifest):
    """Concatenate every shard's sub-graph into one graph over global ids."""
    m = manifest
    parts = [_load_graph(m, s.index) for s in m.shards]
    ids = np.concatenate([g.ids for g in parts])
    dists = np.concatenate([g.dists for g in parts])
    graph = KnnGraph(ids, dists, np.full(ids.shape, OLD, dtype=np.uint8), m.metric, None)
    if np.any(graph.ids == SENTINEL_ID):
        raise FormatError("exported graph has unfilled slots")
    return graph


def run_pipeline(source, root, params, shard_size, metric=Metric.SQEUCLIDEAN, resume=False, workers=1):
    """Partition (unless resuming), build shards, merge all pairs, export."""
    root = Path(root)
    if resume and (root / MANIFEST).exists():
        m = ShardManifest.load(root)
        if m.shard_size != shard_size or m.metric != Metric.parse(metric):
            raise UsageError("resume requested with a different shard size or metric")
    else:
        if (root / MANIFEST).exists():
            raise UsageError(f"{root} already holds a pipeline; pass resume to continue it")
        m = partition(source, shard_size, root, params.k, metric)
    build_shards(m, params)
    merge_all(m, params, workers)
    return m


def ingest(root, source, params):
    """Append a batch as new shards and merge them against every existing shard."""
    m = ShardManifest.load(root)
    _check_params(m, params)
    if isinstance(source, (str, os.PathLike)):
        vectors = load_vecs(source, mmap=True)
    else:
        vectors = np.asarray(getattr(source, "vectors", source))
    if vectors.ndim != 2 or vectors.shape[1] != m.d:
        raise UsageError(f"batch dimension {vectors.shape[-1]} does not match d={m.d}")
    n_new = vectors.shape[0]
    bounds = [(lo, min(lo + m.shard_size, n_new)) for lo in range(0, n_new, m.shard_size)]
    if bounds[-1][1] - bounds[-1][0] <= m.k:
        raise UsageError(f"last new shard would hold {bounds[-1][1] - bounds[-1][0]} objects (<= k)")
    first_new = m.shard_count
    for lo, hi in bounds:
        idx = m.shard_count
        info = ShardInfo(idx, m.n + lo, m.n + hi, f"shards/shard-{idx:04d}.fvecs", f"graphs/shard-{idx:04d}.knng")
        block = np.asarray(vectors[lo:hi], dtype=np.float32)
        check_domain(m.metric, block)
        write_vecs(m.path(info.vec_file), block)
        m.shards.append(info)
    m.n += n_new
    m.schedule += [(i, j) for j in range(first_new, m.shard_count) for i in range(j)]
    m.save()
    build_shards(m, params)
    merge_all(m, params)
    return m
