import csv
import json

import numpy as np
import pytest

from smcluster.cli import main, read_clustering, sweep_cell_seed
from smcluster.data import PointRecord, gen_gmm, GmmGenConfig, write_points

NIG = '{"kind": "nig", "mu0": 0, "lambda": 0.0002, "a": 2, "b": 0.5}'


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def labels_of(path):
    with open(path) as fh:
        return {row["id"]: row["cluster"] for row in csv.DictReader(fh)}


def same_partition(a, b):
    groups = lambda d: {frozenset(k for k in d if d[k] == v) for v in set(d.values())}
    return groups(a) == groups(b)


@pytest.fixture
def small_gmm(tmp_path):
    path = tmp_path / "gmm.csv"
    write_points(gen_gmm(GmmGenConfig(n=60, seed=4)), path)
    return path


@pytest.fixture
def two_group_file(tmp_path):
    rng = np.random.default_rng(0)
    recs = []
    for k in range(12):
        g = k % 2
        recs.append(PointRecord(f"p{k}", rng.normal([0.0, 0.0] if g == 0 else [60.0, -60.0], 0.4), g))
    path = tmp_path / "two.csv"
    write_points(recs, path)
    return path


class TestGenerate:
    def test_byte_identical_rerun(self, tmp_path, capsys):
        a, b = tmp_path / "a.pts", tmp_path / "b.pts"
        assert run(["generate", "gmm", "--seed", 1, "-o", a], capsys)[0] == 0
        assert run(["generate", "gmm", "--seed", 1, "-o", b], capsys)[0] == 0
        assert a.read_bytes() == b.read_bytes()
        meta = json.loads((tmp_path / "a.pts.meta.json").read_text())
        assert meta["seed"] == 1 and len(meta["config_hash"]) == 16

    def test_circles_labels(self, tmp_path, capsys):
        p = tmp_path / "c.pts"
        assert run(["generate", "circles", "--seed", 7, "-o", p], capsys)[0] == 0
        assert len(set(read_clustering(p).values())) == 15

    def test_invalid_kind(self, tmp_path, capsys):
        code, _, err = run(["generate", "spirals", "-o", tmp_path / "x"], capsys)
        assert code == 2 and "usage" in err

    def test_outdir_override(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("SMCLUSTER_OUTDIR", str(tmp_path))
        assert run(["generate", "circles", "-o", "rel.pts"], capsys)[0] == 0
        assert (tmp_path / "rel.pts").exists()

    def test_unwritable(self, tmp_path, capsys):
        code, _, _ = run(["generate", "circles", "-o", tmp_path / "missing" / "x.pts"], capsys)
        assert code == 3


class TestRun:
    def test_split_m1_equals_greedy(self, small_gmm, tmp_path, capsys):
        g, s = tmp_path / "g.csv", tmp_path / "s.csv"
        base = ["run", "-i", small_gmm, "--model", NIG, "--seed", 3, "--shuffle-seed", 2]
        assert run(base + ["--algorithm", "greedy", "-o", g], capsys)[0] == 0
        assert run(base + ["--algorithm", "split-smc", "--m", 1, "-o", s], capsys)[0] == 0
        assert labels_of(g) == labels_of(s)

    def test_smc_and_split_agree_on_two_groups(self, two_group_file, tmp_path, capsys):
        a, b, tr = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "t.jsonl"
        base = ["run", "-i", two_group_file, "--model", NIG, "--m", 20]
        assert run(base + ["--algorithm", "smc", "-o", a], capsys)[0] == 0
        code, out, _ = run(base + ["--algorithm", "split-smc", "-o", b, "--trace", tr], capsys)
        assert code == 0
        assert same_partition(labels_of(a), labels_of(b))
        assert set(labels_of(b)) == {f"p{k}" for k in range(12)}
        trace = [json.loads(line) for line in tr.read_text().splitlines()]
        assert [r["step"] for r in trace] == list(range(1, 13))
        assert max(r["n_subproblems"] for r in trace) >= 2
        assert json.loads(out)["f1"] == 1.0

    def test_gibbs_zero_budget_singletons(self, small_gmm, tmp_path, capsys):
        o = tmp_path / "o.csv"
        code, out, _ = run(["run", "-i", small_gmm, "--model", NIG, "--algorithm", "gibbs",
                            "--budget-seconds", 0, "-o", o], capsys)
        assert code == 0
        assert len(set(labels_of(o).values())) == 60
        summary = json.loads(out)
        assert summary["budget_exceeded"] is True

    def test_summary_fields_and_reproducible(self, small_gmm, tmp_path, capsys):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        base = ["run", "-i", small_gmm, "--model", NIG, "--m", 10, "--shuffle-seed", 5]
        code, out, _ = run(base + ["-o", a], capsys)
        run(base + ["-o", b], capsys)
        assert a.read_bytes() == b.read_bytes()
        summary = json.loads(out)
        for key in ("log_posterior", "runtime_seconds", "model_evaluations", "f1"):
            assert key in summary

    def test_config_file_and_validation(self, small_gmm, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"algorithm": "smc", "m": 0, "input": str(small_gmm)}))
        code, _, err = run(["run", "--config", cfg], capsys)
        assert code == 2 and "m must be" in err
        cfg.write_text(json.dumps({"algorithm": "smc", "bogus": 1}))
        assert run(["run", "--config", cfg], capsys)[0] == 2
        cfg.write_text(json.dumps({"algorithm": "smc", "m": 5, "input": str(small_gmm), "model": json.loads(NIG),
                                   "surrogate": {"kind": "nig", "a": 1, "b": 2}}))
        assert run(["run", "--config", cfg], capsys)[0] == 2  # m_prime missing
        assert run(["run", "--config", cfg, "--m-prime", 3], capsys)[0] == 0

    def test_mwg_and_agglom(self, small_gmm, tmp_path, capsys):
        sur = '{"kind": "nig", "mu0": 0, "lambda": 0.0002, "a": 2, "b": 2}'
        code, out, _ = run(["run", "-i", small_gmm, "--model", NIG, "--algorithm", "mwg", "--surrogate", sur,
                            "--patience", 5], capsys)
        assert code == 0 and json.loads(out)["sweeps"] >= 5
        code, out, _ = run(["run", "-i", small_gmm, "--model", NIG, "--algorithm", "agglom",
                            "--batch-size", 50, "--patience", 20], capsys)
        assert code == 0 and json.loads(out)["n_clusters"] <= 60

    def test_missing_input(self, capsys):
        assert run(["run", "--algorithm", "smc"], capsys)[0] == 2

    def test_bigram_fragments(self, tmp_path, capsys):
        frag = tmp_path / "f.jsonl"
        names = ["Ada Lovelace", "ada lovelace", "Alan Turing", "A. Turing", "Grace Hopper", "grace hopper"]
        frag.write_text("".join(json.dumps({"id": k, "attributes": {"name": n}, "gold_entity": n.lower()[:3]})
                                + "\n" for k, n in enumerate(names)))
        code, out, _ = run(["run", "-i", frag, "--kind", "fragments", "--model", '{"kind": "bigram"}',
                            "--m", 5], capsys)
        assert code == 0 and "f1" in json.loads(out)
        frag.write_text('{"id": 1, "attributes": {"city": "Oslo"}}\n')
        code, _, err = run(["run", "-i", frag, "--kind", "fragments", "--model", '{"kind": "bigram"}'], capsys)
        assert code == 2 and "name" in err


class TestEval:
    def write(self, path, labels):
        with open(path, "w") as fh:
            fh.write("id,cluster\n" + "".join(f"{k},{v}\n" for k, v in labels.items()))
        return path

    def parse(self, out):
        return {k: float(v) for k, v in (line.split("=") for line in out.splitlines())}

    def test_identical(self, tmp_path, capsys):
        p = self.write(tmp_path / "p.csv", {k: k // 3 for k in range(9)})
        code, out, _ = run(["eval", p, p], capsys)
        assert code == 0 and self.parse(out)["f1"] == 1.0

    def test_singletons_recall(self, tmp_path, capsys):
        pred = self.write(tmp_path / "p.csv", {k: k for k in range(50)})
        gold = self.write(tmp_path / "g.csv", {k: k // 5 for k in range(50)})
        rep = self.parse(run(["eval", pred, gold], capsys)[1])
        assert rep["recall"] == pytest.approx(0.2, abs=1e-12) and rep["precision"] == 1.0

    def test_missing_id(self, tmp_path, capsys):
        pred = self.write(tmp_path / "p.csv", {k: 0 for k in range(4)})
        gold = self.write(tmp_path / "g.csv", {k: 0 for k in range(5)})
        code, _, err = run(["eval", pred, gold], capsys)
        assert code == 2 and "'4'" in err

    def test_gold_from_points_and_log_posterior(self, small_gmm, tmp_path, capsys):
        o = tmp_path / "o.csv"
        code, out, _ = run(["run", "-i", small_gmm, "--model", NIG, "--m", 5, "--shuffle-seed", 1, "-o", o], capsys)
        summary = json.loads(out)
        code, out, _ = run(["eval", o, small_gmm, "--data", small_gmm, "--model", NIG], capsys)
        rep = self.parse(out)
        assert code == 0
        assert rep["f1"] == pytest.approx(summary["f1"], abs=1e-12)
        assert rep["log_posterior"] == pytest.approx(summary["log_posterior"], rel=1e-10)


class TestSweep:
    def sweep(self, data, out, capsys, *extra):
        return run(["sweep", "-i", data, "--model", NIG, "-o", out, *extra], capsys)

    def rows(self, path):
        with open(path) as fh:
            return list(csv.DictReader(fh))

    def test_row_count_and_determinism(self, small_gmm, tmp_path, capsys):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        args = ("--algorithms", "greedy,smc", "--ms", "2,4", "-R", "2")
        assert self.sweep(small_gmm, a, capsys, *args)[0] == 0
        self.sweep(small_gmm, b, capsys, *args)
        rows = self.rows(a)
        assert len(rows) == 4
        assert {r["algorithm"] for r in rows} == {"greedy", "smc"}
        drop = lambda rs: [{k: v for k, v in r.items() if not k.startswith("runtime")} for r in rs]
        assert drop(rows) == drop(self.rows(b))

    def test_single_cell_matches_run(self, small_gmm, tmp_path, capsys):
        s = tmp_path / "s.csv"
        self.sweep(small_gmm, s, capsys, "--algorithms", "smc", "--ms", "4", "--seed", 9)
        row = self.rows(s)[0]
        seed = sweep_cell_seed(9, 0, 0)
        code, out, _ = run(["run", "-i", small_gmm, "--model", NIG, "--algorithm", "smc", "--m", 4,
                            "--seed", seed, "--shuffle-seed", seed], capsys)
        summary = json.loads(out)
        assert float(row["f1_mean"]) == pytest.approx(summary["f1"], abs=1e-12)
        assert float(row["log_posterior_mean"]) == pytest.approx(summary["log_posterior"], rel=1e-12)
        assert float(row["f1_std"]) == 0.0

    def test_failed_cell_recorded(self, small_gmm, tmp_path, capsys):
        s = tmp_path / "s.csv"
        code, _, _ = self.sweep(small_gmm, s, capsys, "--grid", '{"m": [0, 2]}')
        assert code == 0
        rows = self.rows(s)
        assert rows[0]["failed"] == "1" and "m must be" in rows[0]["errors"]
        assert rows[1]["failed"] == "0"

    def test_bad_grid(self, small_gmm, tmp_path, capsys):
        assert self.sweep(small_gmm, tmp_path / "s.csv", capsys, "--grid", '{"colour": [1]}')[0] == 2


class TestHelp:
    def test_help_config(self, capsys):
        code, out, _ = run(["--help-config"], capsys)
        assert code == 0 and "m_prime" in out and "algorithm" in out

    def test_no_command(self, capsys):
        assert run([], capsys)[0] == 2
