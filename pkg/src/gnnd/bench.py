"""Ablation harness: full update vs selective update vs striped segments.

Variants share seeds and data. Timings are wall-clock per phase; JIT
compilation is excluded by a warm-up build on a tiny dataset.
"""

import csv
import io
import itertools
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .builder import BuildParams, construct
from .evaluate import recall_at_k
from .graph import Dataset
from .metrics import Metric

CSV_HEADER = ["variant", "n", "d", "k", "p", "iter", "phase", "seconds", "recall_at_10", "phi", "dist_evals"]
PHASES = ("sample", "join", "update")

VARIANTS = {
    "GNND-r1": dict(selective_update=False, segmented_locks=False),
    "GNND-r2": dict(selective_update=True, segmented_locks=False),
    "GNND": dict(selective_update=True, segmented_locks=True),
}


@dataclass
class BenchRun:
    variant: str
    n: int
    d: int
    params: BuildParams
    history: list
    seconds: float
    recall: float | None = None

    @property
    def iterations(self):
        return self.history[1:]

    def phase_seconds(self, phase):
        return [s.seconds[phase] for s in self.iterations]

    @property
    def phi_series(self):
        return [s.phi for s in self.history]

    @property
    def dist_evals(self):
        return sum(s.dist_evals for s in self.iterations)

    @property
    def inserted(self):
        return sum(s.inserted for s in self.iterations)


@dataclass
class BenchReport:
    runs: list = field(default_factory=list)

    def by_variant(self, name):
        return [r for r in self.runs if r.variant == name]

    def summary_rows(self):
        for r in self.runs:
            yield [r.variant, r.n, r.d, r.params.k, r.params.p, len(r.iterations), "total",
                   f"{r.seconds:.6f}", "" if r.recall is None else f"{r.recall:.6f}",
                   f"{r.history[-1].phi:.6f}", r.dist_evals]

    def trace_rows(self):
        for r in self.runs:
            for s in r.iterations:
                for phase in PHASES:
                    yield [r.variant, r.n, r.d, r.params.k, r.params.p, s.iteration, phase,
                           f"{s.seconds[phase]:.6f}", "", f"{s.phi:.6f}", s.dist_evals]

    def write_csv(self, out=None, trace=False):
        """Summary (one row per grid point and variant) or per-phase trace as CSV."""
        close = False
        if out is None:
            out = sys.stdout
        elif not hasattr(out, "write"):
            out = open(out, "w", newline="")
            close = True
        try:
            w = csv.writer(out, lineterminator="\n")
            w.writerow(CSV_HEADER)
            w.writerows(self.trace_rows() if trace else self.summary_rows())
        finally:
            if close:
                out.close()

    def to_csv(self, trace=False):
        buf = io.StringIO()
        self.write_csv(buf, trace)
        return buf.getvalue()


def _warm_up(metric, d):
    x = np.random.default_rng(0).random((64, d), dtype=np.float32) + 0.5
    for kw in VARIANTS.values():
        construct(x, metric, BuildParams(k=8, p=4, max_iter=1, seg_size=4, deterministic=True, **kw))


def expand_grid(grid):
    """Accept a list of dicts, or a dict of lists (cartesian product)."""
    if isinstance(grid, dict):
        keys = list(grid)
        return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    return list(grid)


def run_ablation(data, metric, grid, base=None, truth=None, variants=None, warm_up=True):
    """Run every variant on every grid point; returns a :class:`BenchReport`."""
    data = data if isinstance(data, Dataset) else Dataset(data)
    metric = Metric.parse(metric)
    base = base or BuildParams(deterministic=True)
    names = variants or list(VARIANTS)
    if warm_up:
        _warm_up(metric, data.d)
    report = BenchReport()
    for point in expand_grid(grid):
        for name in names:
            params = replace(base, **point, **VARIANTS[name])
            history = []
            t0 = time.perf_counter()
            graph = construct(data, metric, params, history=history)
            elapsed = time.perf_counter() - t0
            recall = None
            if truth is not None:
                recall = recall_at_k(graph, truth, min(10, graph.k, getattr(truth, "k", 10)))
            report.runs.append(BenchRun(name, data.n, data.d, params, history, elapsed, recall))
    return report
