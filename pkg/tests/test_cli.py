import json
import subprocess
import sys

import numpy as np
import pytest

from learnedlsh.cli import RunConfig, UsageError, inspect_file, main, parse_config_text, run_bench
from learnedlsh.evaluation import read_reports_csv
from learnedlsh.neural import init_mlp, mlp_to_bytes
from learnedlsh.vecdata import Dataset, read_vectors, write_vectors

FAST_LLSH = [
    "--L", "4", "--k", "3", "--m1", "8", "--m2", "4", "--m3", "6",
    "--max-epochs", "5", "--ae-epochs", "3",
]  # fmt: skip


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture()
def dataset(tmp_path):
    path = tmp_path / "u.llshbin"
    assert run("gen", "--kind", "uniform", "--n", 2000, "--d", 12, "--seed", 1, "--out", path) == 0
    return path


class TestGen:
    def test_shape_and_repeatability(self, tmp_path):
        a, b = tmp_path / "a.llshbin", tmp_path / "b.llshbin"
        for p in (a, b):
            assert run("gen", "--kind", "uniform", "--n", 10000, "--d", 100, "--seed", 1, "--out", p) == 0
        ds = read_vectors(a)
        assert (ds.n, ds.dim) == (10000, 100)
        assert a.read_bytes() == b.read_bytes()

    def test_csv_output(self, tmp_path):
        assert run("gen", "--kind", "normal", "--n", 5, "--d", 3, "--out", tmp_path / "x.csv") == 0
        assert read_vectors(tmp_path / "x.csv").n == 5

    def test_invalid_kind(self, tmp_path, capsys):
        assert run("gen", "--kind", "cauchy", "--n", 5, "--d", 3, "--out", tmp_path / "x") == 1
        assert "error" in capsys.readouterr().err

    def test_invalid_size(self, tmp_path):
        assert run("gen", "--kind", "normal", "--n", 0, "--d", 3, "--out", tmp_path / "x") == 1


class TestBuildAndQuery:
    def test_e2lsh_build_inspect_query(self, tmp_path, dataset, capsys):
        idx = tmp_path / "e.e2lx"
        assert run("build", "--data", dataset, "--algorithm", "e2lsh", "--L", 6, "--k", 4, "--out", idx) == 0
        info = inspect_file(str(idx))
        assert info["type"] == "E2LX" and info["entries"] == 6 * 2000
        assert info["entries_per_table"] == [2000] * 6

        queries = tmp_path / "q.llshbin"
        write_vectors(read_vectors(dataset).subset(np.array([3, 1500])), queries)
        out = tmp_path / "res.jsonl"
        assert run("query", "--data", dataset, "--queries", queries, "--index", idx, "--topk", 3, "--out", out) == 0
        lines = [json.loads(x) for x in out.read_text().splitlines()]
        assert [x["query"] for x in lines] == [0, 1]
        assert lines[0]["neighbors"][0] == [3, 0.0]
        assert lines[1]["neighbors"][0] == [1500, 0.0]

    def test_llsh_build_reports_fitting_rate(self, tmp_path, dataset, capsys):
        idx, report = tmp_path / "l.llix", tmp_path / "r.json"
        with pytest.warns(UserWarning, match="not fewer"):  # toy widths at d=12
            code = run("build", "--data", dataset, "--algorithm", "llsh", *FAST_LLSH, "--out", idx, "--report", report)
        assert code == 0
        rep = json.loads(report.read_text())
        assert 0.0 <= rep["fitting_rate"] <= 1.0
        assert rep["train_time_ns"] > 0 and rep["config"]["L"] == 4
        assert inspect_file(str(idx))["entries"] == 4 * 2000
        model = inspect_file(str(idx) + ".llm1")
        assert model["type"] == "LLM1" and model["encoder_sizes"] == [12, 8, 4]

        queries = tmp_path / "q.llshbin"
        write_vectors(read_vectors(dataset).subset(np.array([42])), queries)
        capsys.readouterr()
        assert run("query", "--data", dataset, "--queries", queries, "--index", idx, "--topk", 2) == 0
        line = json.loads(capsys.readouterr().out)
        assert line["neighbors"][0] == [42, 0.0]

    def test_tree_query_without_index(self, tmp_path, dataset, capsys):
        queries = tmp_path / "q.csv"
        write_vectors(Dataset.from_points(np.full((1, 12), 0.5)), queries)
        outs = []
        for alg in ("brute", "kdtree", "balltree"):
            capsys.readouterr()
            assert run("query", "--data", dataset, "--queries", queries, "--algorithm", alg, "--topk", 5) == 0
            outs.append(capsys.readouterr().out)
        assert outs[0] == outs[1] == outs[2]

    def test_empty_query_file(self, tmp_path, dataset, capsys):
        queries = tmp_path / "empty.csv"
        queries.write_text("")
        capsys.readouterr()
        assert run("query", "--data", dataset, "--queries", queries) == 0
        assert capsys.readouterr().out == ""

    def test_topk_zero_is_usage_error(self, tmp_path, dataset):
        assert run("query", "--data", dataset, "--queries", dataset, "--topk", 0) == 1

    def test_missing_dataset_names_path(self, tmp_path, capsys):
        missing = tmp_path / "nope.llshbin"
        assert run("build", "--data", missing, "--algorithm", "e2lsh") == 2
        assert str(missing) in capsys.readouterr().err

    def test_dimension_mismatch_is_data_error(self, tmp_path, dataset):
        queries = tmp_path / "q.csv"
        write_vectors(Dataset.from_points(np.zeros((1, 5))), queries)
        assert run("query", "--data", dataset, "--queries", queries) == 2

    def test_bad_autoencoder_shape(self, dataset):
        assert run("build", "--data", dataset, "--algorithm", "llsh", "--m1", 32) == 1

    def test_corrupt_index(self, tmp_path, dataset):
        bad = tmp_path / "bad.e2lx"
        bad.write_bytes(b"E2LX" + bytes(10))
        assert run("query", "--data", dataset, "--queries", dataset, "--index", bad) == 2


class TestConfig:
    def test_parse_and_reject_unknown(self):
        assert parse_config_text("L = 5\n# note\nr=2.5  # inline\nalgorithm=brute\n") == {
            "L": 5,
            "r": 2.5,
            "algorithm": "brute",
        }
        with pytest.raises(UsageError, match="unknown key"):
            parse_config_text("Lx=3")
        with pytest.raises(UsageError):
            parse_config_text("L=three")
        with pytest.raises(UsageError):
            parse_config_text("just words")

    def test_file_with_flag_override(self, tmp_path, dataset):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"data={dataset}\nalgorithm=e2lsh\nL=2\nk=2\n")
        report = tmp_path / "r.json"
        assert run("build", "--config", cfg, "--L", 3, "--report", report) == 0
        assert json.loads(report.read_text())["config"]["L"] == 3

    def test_unknown_key_in_file_exits_1(self, tmp_path, dataset):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("colour=blue\n")
        assert run("bench", "--config", cfg) == 1

    def test_unknown_flag_exits_1(self):
        assert run("bench", "--colour", "blue") == 1

    @pytest.mark.parametrize(
        "kw",
        [dict(algorithm="annoy"), dict(topk=0), dict(sweep_axis="r", sweep_grid="1"), dict(sweep_axis="n"),
         dict(seeds="a,b"), dict(kind="zipf")],
    )  # fmt: skip
    def test_check(self, kw):
        with pytest.raises(UsageError):
            RunConfig(**kw).check()


class TestBench:
    def test_exact_algorithms_agree(self, tmp_path):
        csv_path = tmp_path / "b.csv"
        code = run(
            "bench", "--algorithm", "brute,kdtree,balltree", "--n", 1500, "--d", 8,
            "--queries", 40, "--seeds", "0,1", "--out-csv", csv_path,
        )  # fmt: skip
        assert code == 0
        text = csv_path.read_text()
        assert text.startswith("# learnedlsh bench report v1")
        rows = read_reports_csv(text)
        assert len(rows) == 6
        assert {r["recall_at_k"] for r in rows} == {"1.0"}

    def test_sweep_over_n(self, tmp_path):
        json_path = tmp_path / "b.jsonl"
        code = run(
            "bench", "--algorithm", "e2lsh", "--d", 10, "--L", 4, "--k", 4, "--queries", 20,
            "--sweep-axis", "n", "--sweep-grid", "1000,2000,4000", "--out-json", json_path,
        )  # fmt: skip
        assert code == 0
        rows = [json.loads(x) for x in json_path.read_text().splitlines()]
        assert [r["n"] for r in rows] == [1000, 2000, 4000]
        sizes = [r["index_bytes"] for r in rows]
        assert sizes == sorted(sizes)

    def test_sweep_over_k_for_llsh(self):
        cfg = RunConfig(
            algorithm="llsh", n=800, d=12, L=3, m1=8, m2=4, m3=6, max_epochs=3, ae_epochs=2,
            queries=10, sweep_axis="K", sweep_grid="2,4", hash_reps=1,
        )  # fmt: skip
        reports = run_bench(cfg)
        assert [r.config["k"] for r in reports] == [2, 4]
        assert all(r.fitting_rate is not None for r in reports)

    def test_rows_reproduce_from_echo(self):
        cfg = RunConfig(algorithm="e2lsh", n=1000, d=6, L=3, k=3, queries=25, seeds="4", hash_reps=1)
        first = run_bench(cfg)[0]
        echo = dict(first.config)
        again = run_bench(RunConfig(**echo))[0]
        assert again.recall_at_k == first.recall_at_k
        assert again.index_bytes == first.index_bytes

    def test_queries_are_held_out(self):
        cfg = RunConfig(algorithm="brute", n=300, d=4, queries=50, hash_reps=1)
        report = run_bench(cfg)[0]
        assert (report.n, report.n_queries) == (300, 50)

    def test_too_many_queries_from_file(self, tmp_path, dataset):
        assert run("bench", "--data", dataset, "--queries", 2000, "--algorithm", "brute") == 1


class TestInspect:
    def test_dataset_and_mlp(self, tmp_path, dataset, capsys):
        assert inspect_file(str(dataset)) == {"type": "llshbin", "count": 2000, "dim": 12}
        mlp = tmp_path / "n.mlp1"
        mlp.write_bytes(mlp_to_bytes(init_mlp([5, 3, 2], np.random.default_rng())))
        assert inspect_file(str(mlp)) == {"type": "MLP1", "sizes": [5, 3, 2]}
        assert run("inspect", mlp) == 0

    def test_unknown_file(self, tmp_path):
        junk = tmp_path / "junk"
        junk.write_bytes(b"hello")
        assert run("inspect", junk) == 2
        assert run("inspect", tmp_path / "missing") == 2


def test_module_entry_point(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "learnedlsh", "gen", "--kind", "normal", "--n", "3", "--d", "2", "--out",
         str(tmp_path / "m.llshbin")],
        capture_output=True,
    )  # fmt: skip
    assert out.returncode == 0
    bad = subprocess.run([sys.executable, "-m", "learnedlsh", "frobnicate"], capture_output=True)
    assert bad.returncode == 1
