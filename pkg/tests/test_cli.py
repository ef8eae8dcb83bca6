import csv
import io

import numpy as np
import pytest

from conftest import uniform
from gnnd.cli import main
from gnnd.io import read_graph, read_graph_header, read_ground_truth, write_graph, write_vecs
from gnnd.evaluate import brute_force_graph


@pytest.fixture
def files(tmp_path):
    x = uniform(1200, 6, seed=1)
    write_vecs(tmp_path / "base.fvecs", x)
    write_vecs(tmp_path / "a.fvecs", x[:600])
    write_vecs(tmp_path / "b.fvecs", x[600:])
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


BUILD = ("--k", 16, "--p", 6, "--iters", 3, "--seg-size", 8)


def test_build_writes_graph_and_stats(files, capsys):
    assert run("build", "--in", files / "base.fvecs", "--metric", "l2", *BUILD, "--out", files / "g.knng") == 0
    assert read_graph_header(files / "g.knng").n == 1200
    err = capsys.readouterr().err
    assert "iter 3: phi=" in err and "update=" in err


def test_build_deterministic_is_reproducible(files):
    for name in ("1.knng", "2.knng"):
        assert run("build", "--in", files / "base.fvecs", *BUILD, "--deterministic", "--seed", 7,
                   "--out", files / name) == 0
    assert (files / "1.knng").read_bytes() == (files / "2.knng").read_bytes()


@pytest.mark.parametrize("argv", [
    ("--k", 32, "--p", 40),
    ("--k", 0),
    ("--metric", "hamming"),
    ("--iters", "x"),
])
def test_invalid_flags_fail_fast(files, argv):
    assert run("build", "--in", files / "base.fvecs", "--out", files / "x.knng", *argv) == 1
    assert not (files / "x.knng").exists()


def test_unknown_subcommand():
    assert run("serve") == 1


def test_missing_input_is_io_error(files):
    assert run("build", "--in", files / "nope.fvecs", "--out", files / "x.knng") == 2


def test_corrupt_input_is_format_error(files):
    (files / "bad.fvecs").write_bytes(b"\x02\x00\x00\x00\x00\x00")
    assert run("build", "--in", files / "bad.fvecs", "--out", files / "x.knng") == 3
    (files / "bad.knng").write_bytes(b"NOTAGRAPH" * 4)
    assert run("eval", "--graph", files / "bad.knng", "--truth", files / "bad.knng") == 3


def test_domain_error_is_usage_error(files):
    write_vecs(files / "neg.fvecs", -uniform(50, 2))
    assert run("build", "--in", files / "neg.fvecs", "--metric", "chi2", "--k", 4, "--p", 2,
               "--out", files / "x.knng") == 1


def test_merge(files):
    for part in ("a", "b"):
        assert run("build", "--in", files / f"{part}.fvecs", *BUILD, "--out", files / f"{part}.knng") == 0
    assert run("merge", "--in", files / "a.fvecs", "--in2", files / "b.fvecs", "--graph", files / "a.knng",
               "--graph2", files / "b.knng", "--p", 6, "--iters", 2, "--seg-size", 8,
               "--out", files / "ab.knng") == 0
    merged = read_graph(files / "ab.knng")
    assert merged.n == 1200 and merged.k == 16
    merged.validate()


def test_merge_same_file_twice(files):
    run("build", "--in", files / "a.fvecs", *BUILD, "--out", files / "a.knng")
    assert run("merge", "--in", files / "a.fvecs", "--in2", files / "a.fvecs", "--graph", files / "a.knng",
               "--graph2", files / "a.knng", "--out", files / "x.knng") == 1


def test_merge_degree_mismatch(files):
    run("build", "--in", files / "a.fvecs", *BUILD, "--out", files / "a.knng")
    run("build", "--in", files / "b.fvecs", "--k", 12, "--p", 6, "--out", files / "b.knng")
    assert run("merge", "--in", files / "a.fvecs", "--in2", files / "b.fvecs", "--graph", files / "a.knng",
               "--graph2", files / "b.knng", "--out", files / "x.knng") == 1


def test_build_sharded_resume_and_rerun(files):
    args = ("build-sharded", "--in", files / "base.fvecs", "--shard-size", 300, *BUILD, "--deterministic")
    assert run(*args, "--out", files / "p1") == 0
    assert read_graph_header(files / "p1" / "graph.knng").n == 1200
    assert run(*args, "--out", files / "p1") == 1  # existing run needs --resume
    assert run(*args, "--out", files / "p1", "--resume") == 0
    assert run(*args, "--out", files / "p2") == 0
    assert (files / "p1" / "graph.knng").read_bytes() == (files / "p2" / "graph.knng").read_bytes()
    assert run("build-sharded", "--in", files / "base.fvecs", "--shard-size", 16, "--k", 16, "--p", 6,
               "--out", files / "p3") == 1


def test_ingest(files):
    assert run("build-sharded", "--in", files / "a.fvecs", "--shard-size", 300, *BUILD, "--out", files / "p") == 0
    assert run("ingest", "--in", files / "b.fvecs", *BUILD, "--out", files / "p") == 0
    assert read_graph_header(files / "p" / "graph.knng").n == 1200
    assert run("ingest", "--in", files / "b.fvecs", *BUILD, "--out", files / "nowhere") == 1


def test_oracle_evaluated_against_itself(files, capsys):
    assert run("oracle", "--in", files / "base.fvecs", "--k", 10, "--out", files / "gt.knng") == 0
    capsys.readouterr()
    assert run("eval", "--graph", files / "gt.knng", "--truth", files / "gt.knng", "--at", 10) == 0
    out = capsys.readouterr().out.split()
    assert out[0] == "recall@10" and float(out[1]) == 1.0 and out[2] == "phi"


def test_oracle_ivecs_output(files):
    assert run("oracle", "--in", files / "base.fvecs", "--k", 10, "--out", files / "gt.ivecs") == 0
    assert read_ground_truth(files / "gt.ivecs").shape == (1200, 10)


def test_eval_approximate_graph(files, capsys):
    run("build", "--in", files / "base.fvecs", *BUILD, "--out", files / "g.knng")
    write_graph(brute_force_graph(uniform(1200, 6, seed=1), "l2", 10), files / "gt.knng")
    capsys.readouterr()
    assert run("eval", "--graph", files / "g.knng", "--graph2", files / "gt.knng") == 0
    value = float(capsys.readouterr().out.split()[1])
    assert 0.0 <= value <= 1.0


def test_eval_degree_too_small(files):
    run("oracle", "--in", files / "a.fvecs", "--k", 5, "--out", files / "gt.knng")
    assert run("eval", "--graph", files / "gt.knng", "--truth", files / "gt.knng", "--at", 10) == 1


def test_bench_csv(files, capsys):
    assert run("bench", "--in", files / "a.fvecs", "--k", "12,16", "--p", 6, "--iters", 2, "--seg-size", 4) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == ["variant", "n", "d", "k", "p", "iter", "phase", "seconds", "recall_at_10", "phi", "dist_evals"]
    assert len(rows) == 1 + 2 * 3
    assert run("bench", "--in", files / "a.fvecs", "--k", 12, "--p", 6, "--iters", 2,
               "--out", files / "b.csv") == 0
    assert (files / "b.csv").read_text().startswith("variant,n,d,k,p,iter,phase")
    assert (files / "b.csv.trace.csv").exists()
    assert run("bench", "--in", files / "a.fvecs", "--k", 12, "--p", 12) == 1


def test_threads_flag(files):
    assert run("build", "--in", files / "base.fvecs", *BUILD, "--threads", 1, "--out", files / "g.knng") == 0


def test_module_entry_point(files):
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "gnnd", "oracle", "--in", str(files / "a.fvecs"), "--k", "3",
                          "--out", str(files / "o.knng")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert np.all(read_graph(files / "o.knng").ids < 600)
