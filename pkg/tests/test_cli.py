import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from fgsn import evaluation, model
from fgsn.cli import main, read_results

SIM_ARGS = ["--points", "3000", "--k-fine", "20", "--k-coarse", "4", "--length", "2", "--max-features", "400", "--train-pairs", "2", "--feature-dim", "4"]
NOISELESS = ["--pixel-noise", "0", "--outlier-rate", "0", "--mislabel-base", "0", "--mislabel-slope", "0", "--jitter", "0"]


def run(*argv):
    return main([str(a) for a in argv])


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def pipeline(root: Path, seed=7, extra=()):
    """Run every command once into ``root``; returns the exit codes."""
    sim, clu, trn, loc, ev = (root / d for d in ("sim", "cluster", "train", "loc", "eval"))
    for d in (sim, clu, trn, loc, ev):
        d.mkdir(parents=True)
    codes = [run("simulate", "--out", sim, "--seed", seed, *SIM_ARGS, *extra)]
    codes.append(run("cluster", "--data", sim / "train", "--out", clu, "--seed", seed, "--k", 5, "--samples", 300, "--pca-dim", 3))
    codes.append(run("train", "--data", sim / "train", "--out", trn, "--seed", seed, "--k", 5, "--iterations", 6, "--recluster-interval", 3, "--pca-dim", 3, "--hidden", 4))
    codes.append(run("infer", "--head", trn / "head.json", "--features", sim / "train" / "ref_000.fmap", "--out", trn / "ref_000.smap", "--patch", 32, "--stride", 16, "--core", 8))
    for method in ("plain", "ssmc", "gsmc", "pfsl"):
        codes.append(
            run("localize", "--scene", sim / "scene.json", "--queries", sim / "queries", "--out", loc / f"{method}.csv", "--method", method, "--seed", seed,
                "--iterations", 200, "--yaw-samples", 36, "--score-points", 300, "--particles", 50)
        )
    codes.append(
        run("evaluate", "--results", *(loc / f"{m}.csv" for m in ("plain", "ssmc", "gsmc", "pfsl")), "--out", ev,
            "--clusters", clu / "ref_000.lmap", "--classes", sim / "train" / "ref_000.classes.lmap")
    )
    return codes


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    return a, pipeline(a), b, pipeline(b)


class TestPipeline:
    def test_all_commands_succeed(self, runs):
        _, codes_a, _, codes_b = runs
        assert codes_a == [0] * len(codes_a) and codes_b == codes_a

    def test_byte_identical_reruns(self, runs):
        a, _, b, _ = runs
        ta, tb = tree_bytes(a), tree_bytes(b)
        assert ta.keys() == tb.keys()
        assert [k for k in ta if ta[k] != tb[k]] == []

    def test_expected_artifacts(self, runs):
        a = runs[0]
        for rel in ("sim/scene.json", "sim/trajectory.json", "sim/queries/q0000.lmap", "cluster/centroids.json", "train/head.json",
                    "train/ref_000.smap", "train/ref_000.lmap", "eval/recall.txt", "eval/inlier_ratio_cdf.png", "eval/contingency.png", "eval/nmi.txt"):
            assert (a / rel).is_file(), rel

    def test_one_row_per_query(self, runs):
        a = runs[0]
        n_queries = len(list((a / "sim" / "queries").glob("*.pose.json")))
        with open(a / "loc" / "ssmc.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == n_queries
        assert list(rows[0]) == ["query_id", "method", "position_error_m", "rotation_error_deg", "inlier_count", "inlier_ratio"]

    def test_recall_table_matches_library(self, runs):
        a = runs[0]
        vals = read_results(a / "loc" / "ssmc.csv")["ssmc"]
        want = evaluation.recall_table([(p, r) for _, p, r, _, _ in vals])
        assert evaluation.format_recall(want) in (a / "eval" / "recall.txt").read_text()

    def test_contingency_shape_is_classes_by_clusters(self, runs):
        a = runs[0]
        classes = model.load_artifact(a / "sim" / "train" / "ref_000.classes.lmap", "label").num_classes
        clusters = model.load_artifact(a / "cluster" / "ref_000.lmap", "label").num_classes
        rows = (a / "eval" / "contingency.csv").read_text().strip().splitlines()
        assert (len(rows), len(rows[0].split(","))) == (classes, clusters)

    def test_nmi_matches_contingency(self, runs):
        a = runs[0]
        table = np.loadtxt(a / "eval" / "contingency.csv", delimiter=",")
        assert float((a / "eval" / "nmi.txt").read_text()) == pytest.approx(evaluation.nmi_from_table(table), abs=1e-12)


def test_noiseless_ssmc_full_recall(tmp_path):
    sim, out = tmp_path / "sim", tmp_path / "res.csv"
    sim.mkdir()
    assert run("simulate", "--out", sim, "--seed", 1, *SIM_ARGS, *NOISELESS) == 0
    assert run("localize", "--scene", sim / "scene.json", "--queries", sim / "queries", "--out", out, "--method", "ssmc", "--seed", 1, "--iterations", 200) == 0
    vals = read_results(out)["ssmc"]
    assert evaluation.recall_table([(p, r) for _, p, r, _, _ in vals])[0] == 100.0


def test_all_zero_errors_table(tmp_path, capsys):
    res = tmp_path / "r.csv"
    res.write_text("query_id,method,position_error_m,rotation_error_deg,inlier_count,inlier_ratio\n0,ssmc,0.0,0.0,10,1.0\n1,ssmc,0.0,0.0,12,1.0\n")
    assert run("evaluate", "--results", res, "--out", tmp_path) == 0
    assert "100.0 / 100.0 / 100.0" in capsys.readouterr().out
    assert "100.0 / 100.0 / 100.0" in (tmp_path / "recall.txt").read_text()


def test_empty_results(tmp_path):
    res = tmp_path / "r.csv"
    res.write_text("query_id,method,position_error_m,rotation_error_deg,inlier_count,inlier_ratio\n")
    assert run("evaluate", "--results", res, "--out", tmp_path) == 2


class TestErrors:
    def test_missing_output_dir(self, tmp_path, capsys):
        assert run("simulate", "--out", tmp_path / "nope", "--seed", 1) == 2
        assert "does not exist" in capsys.readouterr().err

    def test_zero_fine_labels(self, tmp_path):
        assert run("simulate", "--out", tmp_path, "--seed", 1, "--k-fine", 0) == 1

    def test_bogus_method_lists_valid(self, tmp_path, capsys):
        code = run("localize", "--scene", "s", "--queries", "q", "--out", tmp_path / "o.csv", "--method", "bogus", "--seed", 0)
        assert code == 1
        err = capsys.readouterr().err
        assert all(m in err for m in ("plain", "ssmc", "gsmc", "pfsl"))

    def test_seed_required(self, tmp_path):
        assert run("simulate", "--out", tmp_path) == 1

    def test_unknown_flag(self, tmp_path):
        assert run("simulate", "--out", tmp_path, "--seed", 1, "--bogus") == 1

    def test_help_exits_zero(self):
        assert run("--help") == 0
        assert run("localize", "--help") == 0

    def test_missing_input(self, tmp_path):
        assert run("localize", "--scene", tmp_path / "x.json", "--queries", tmp_path, "--out", tmp_path / "o.csv", "--method", "ssmc", "--seed", 0) == 2

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        model.save_artifact(cfg, model.RunConfig({"bogus": 1}))
        assert run("simulate", "--config", cfg, "--out", tmp_path, "--seed", 1) == 1


class TestConfigPrecedence:
    def _points(self, out):
        return len(model.load_artifact(out / "scene.json"))

    def test_file_overrides_default_and_flag_overrides_file(self, tmp_path):
        cfg = tmp_path / "run.json"
        small = {"k_fine": 20, "k_coarse": 4, "length": 1.0, "max_features": 100, "train_pairs": 1, "feature_dim": 2}
        model.save_artifact(cfg, model.RunConfig({**small, "points": 1500, "seed": 3}))
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir()
        b.mkdir()
        # seed comes from the file, so the flag is optional
        assert run("simulate", "--config", cfg, "--out", a) == 0
        assert self._points(a) == 1500
        assert run("simulate", "--config", cfg, "--out", b, "--points", 1800) == 0
        assert self._points(b) == 1800


def test_console_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "fgsn.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "simulate" in proc.stdout and "evaluate" in proc.stdout
