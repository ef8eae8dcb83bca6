"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 format error.
"""

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numba

from . import io as gio
from .bench import run_ablation
from .builder import BuildParams, construct
from .errors import DomainError, FormatError, UsageError
from .evaluate import brute_force_graph, phi, recall_at_k
from .merge import ggm_merge
from .metrics import Metric
from .shards import MANIFEST, ShardManifest, export_graph, ingest, run_pipeline

EXIT_USAGE = 1
EXIT_IO = 2
EXIT_FORMAT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _int_list(text):
    return [_positive(t) for t in text.split(",") if t]


def _add_build_flags(p, k_default=32, p_default=12, k_type=_positive):
    p.add_argument("--metric", default="l2", choices=["l2", "cosine", "chi2"])
    p.add_argument("--k", type=k_type, default=k_default)
    p.add_argument("--p", type=k_type, default=p_default)
    p.add_argument("--iters", type=_positive, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seg-size", type=_positive, default=32)
    p.add_argument("--threads", type=_positive, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--no-selective-update", action="store_true")
    p.add_argument("--no-segment-locks", action="store_true")


def build_parser():
    parser = _Parser(prog="gnnd", description="Approximate k-NN graph construction.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build", help="build a k-NN graph from a vector file")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    _add_build_flags(p)

    p = sub.add_parser("merge", help="merge two graphs over disjoint datasets")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--in2", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--graph2", required=True)
    p.add_argument("--out", required=True)
    _add_build_flags(p, k_default=None, p_default=None)

    p = sub.add_parser("build-sharded", help="out-of-core build through shards")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True, help="pipeline directory; final graph is OUT/graph.knng")
    p.add_argument("--shard-size", type=_positive, required=True)
    p.add_argument("--resume", action="store_true")
    _add_build_flags(p)

    p = sub.add_parser("ingest", help="add a batch to an existing sharded build")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True, help="pipeline directory")
    _add_build_flags(p)

    p = sub.add_parser("oracle", help="exact k-NN graph by brute force")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True, help=".knng graph or .ivecs id file")
    p.add_argument("--metric", default="l2", choices=["l2", "cosine", "chi2"])
    p.add_argument("--k", type=_positive, default=32)
    p.add_argument("--threads", type=_positive, default=None)

    p = sub.add_parser("eval", help="Recall@k and phi of a graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--truth", "--graph2", dest="truth", required=True)
    p.add_argument("--at", type=_positive, default=10)

    p = sub.add_parser("bench", help="ablation over update/segment variants, CSV out")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", default=None, help="summary CSV (default stdout); trace goes to OUT.trace.csv")
    p.add_argument("--truth", default=None)
    p.add_argument("--at", type=_positive, default=10)
    _add_build_flags(p, k_default=[32], p_default=[12], k_type=_int_list)
    return parser


def _params(args, k=None, p=None):
    return BuildParams(
        k=args.k if k is None else k,
        p=args.p if p is None else p,
        max_iter=args.iters,
        seed=args.seed,
        seg_size=args.seg_size,
        selective_update=not args.no_selective_update,
        segmented_locks=not args.no_segment_locks,
        deterministic=args.deterministic,
    )


def _require_file(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such file: {path}")


def _report(history):
    for s in history:
        secs = " ".join(f"{k}={v:.3f}s" for k, v in s.seconds.items())
        print(f"iter {s.iteration}: phi={s.phi:.6g} inserted={s.inserted} dist_evals={s.dist_evals} {secs}",
              file=sys.stderr)


def _load_truth(path):
    if str(path).endswith(".ivecs"):
        return gio.read_ground_truth(path)
    return gio.read_graph(path)


def cmd_build(args):
    params = _params(args)
    _require_file(args.inp)
    data = gio.read_vecs(args.inp)
    history = []
    graph = construct(data, args.metric, params, history=history)
    gio.write_graph(graph, args.out)
    _report(history)
    print(f"wrote {args.out}: n={graph.n} k={graph.k}", file=sys.stderr)


def cmd_merge(args):
    for path in (args.inp, args.in2, args.graph, args.graph2):
        _require_file(path)
    if os.path.samefile(args.graph, args.graph2) or os.path.samefile(args.inp, args.in2):
        raise UsageError("inputs must describe two disjoint datasets, got the same file twice")
    g1 = gio.read_graph(args.graph)
    g2 = gio.read_graph(args.graph2)
    if g1.k != g2.k:
        raise UsageError(f"graphs differ in degree ({g1.k} vs {g2.k})")
    if g1.metric != g2.metric:
        raise UsageError(f"graphs differ in metric ({g1.metric.cli_name} vs {g2.metric.cli_name})")
    if Metric.parse(args.metric) != g1.metric:
        raise UsageError(f"--metric {args.metric} does not match the graphs' {g1.metric.cli_name}")
    if args.k is not None and args.k != g1.k:
        raise UsageError(f"--k {args.k} does not match the graphs' degree {g1.k}")
    params = _params(args, k=g1.k, p=min(12, g1.k - 1) if args.p is None else args.p)
    d1 = gio.read_vecs(args.inp)
    d2 = gio.read_vecs(args.in2)
    if d1.n != g1.n or d2.n != g2.n:
        raise UsageError("graph sizes do not match their vector files")
    history = []
    merged = ggm_merge(g1, g2, d1, d2, params, history=history)
    gio.write_graph(merged, args.out)
    _report(history)
    print(f"wrote {args.out}: n={merged.n} k={merged.k}", file=sys.stderr)


def cmd_build_sharded(args):
    params = _params(args)
    if args.shard_size <= params.k:
        raise UsageError(f"--shard-size must exceed --k ({args.shard_size} <= {params.k})")
    _require_file(args.inp)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    m = run_pipeline(args.inp, root, params, args.shard_size, args.metric, resume=args.resume)
    graph = export_graph(m)
    gio.write_graph(graph, root / "graph.knng", wide_ids=bool(graph.ids.max() > 0xFFFFFFFF))
    print(f"{m.shard_count} shards, {len(m.done)} merges, phi={phi(graph):.6g}, "
          f"{time.perf_counter() - t0:.2f}s; wrote {root / 'graph.knng'}", file=sys.stderr)


def cmd_ingest(args):
    params = _params(args)
    _require_file(args.inp)
    root = Path(args.out)
    if not (root / MANIFEST).exists():
        raise UsageError(f"{root} holds no sharded build")
    m = ShardManifest.load(root)
    if Metric.parse(args.metric) != m.metric:
        raise UsageError(f"--metric {args.metric} does not match the build's {m.metric.cli_name}")
    m = ingest(root, args.inp, params)
    graph = export_graph(m)
    gio.write_graph(graph, root / "graph.knng", wide_ids=bool(graph.ids.max() > 0xFFFFFFFF))
    print(f"{m.shard_count} shards, n={m.n}; wrote {root / 'graph.knng'}", file=sys.stderr)


def cmd_oracle(args):
    _require_file(args.inp)
    data = gio.read_vecs(args.inp)
    graph = brute_force_graph(data, args.metric, args.k)
    if str(args.out).endswith(".ivecs"):
        gio.write_ground_truth(args.out, graph)
    else:
        gio.write_graph(graph, args.out)
    print(f"wrote {args.out}: n={graph.n} k={graph.k}", file=sys.stderr)


def cmd_eval(args):
    _require_file(args.graph)
    _require_file(args.truth)
    graph = gio.read_graph(args.graph)
    truth = _load_truth(args.truth)
    r = recall_at_k(graph, truth, args.at)
    print(f"recall@{args.at}\t{r:.6f}")
    print(f"phi\t{phi(graph):.6f}")


def cmd_bench(args):
    _require_file(args.inp)
    grid = [dict(k=k, p=p) for k in args.k for p in args.p]
    for point in grid:
        if not 1 <= point["p"] < point["k"]:
            raise UsageError(f"p must satisfy 1 <= p < k, got p={point['p']}, k={point['k']}")
    base = _params(args, k=max(args.k), p=1)
    data = gio.read_vecs(args.inp)
    truth = _load_truth(args.truth) if args.truth else None
    report = run_ablation(data, args.metric, grid, base=base, truth=truth)
    report.write_csv(args.out)
    if args.out:
        report.write_csv(str(args.out) + ".trace.csv", trace=True)


COMMANDS = {
    "build": cmd_build,
    "merge": cmd_merge,
    "build-sharded": cmd_build_sharded,
    "ingest": cmd_ingest,
    "oracle": cmd_oracle,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s", stream=sys.stderr)
        if getattr(args, "threads", None):
            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        COMMANDS[args.command](args)
    except (UsageError, DomainError) as exc:
        print(f"gnnd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"gnnd: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"gnnd: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
