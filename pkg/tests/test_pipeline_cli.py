import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from lmkrec.cli import main
from lmkrec.config import PipelineConfig, load_config, parse_config_text
from lmkrec.errors import ParamError
from lmkrec.pipeline import run_pipeline, training_split
from lmkrec.recognition import predict, read_predictions_csv
from lmkrec.store import load_descriptors
from lmkrec.synth import SynthSpec, generate_synthetic, write_synthetic

SMALL = SynthSpec(num_landmarks=12, images_per_landmark=10, queries_per_landmark=6,
                  num_distractor_queries=60, num_nonlandmark_refs=30, dim=64, seed=5)
PRED_FILES = ("predictions_raw.csv", "predictions_rule1.csv", "predictions_rule2.csv",
              "predictions_rerank.csv")


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    data = generate_synthetic(SMALL)
    paths = write_synthetic(data, root)
    return data, {k: str(v) for k, v in paths.items()}


def base_config(paths, out_dir, **kw):
    values = dict(queries=[paths["queries"]], index=[paths["index"]],
                  nonlandmark=[paths["nonlandmark"]], truth=paths["truth"], out_dir=str(out_dir),
                  cap=8, rerank=True, n_trees=20, min_leaf=3)
    values.update(kw)
    return PipelineConfig(**values)


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestPipeline:
    def test_rules_disabled_equals_predict(self, dataset, tmp_path):
        data, paths = dataset
        cfg = base_config(paths, tmp_path, rule1=False, rule2=False, rerank=False)
        run_pipeline(cfg)
        direct = predict(data.queries, data.index)
        got = read_predictions_csv(tmp_path / "predictions_raw.csv")
        assert [(p.query_id, p.landmark) for p in got] == [(p.query_id, p.landmark) for p in direct]
        assert [p.confidence for p in got] == [float(f"{p.confidence:.6f}") for p in direct]
        assert not (tmp_path / "predictions_rule1.csv").exists()

    def test_all_stages_written_and_report(self, dataset, tmp_path):
        _, paths = dataset
        report = run_pipeline(base_config(paths, tmp_path))
        for name in PRED_FILES + ("neighbors.csv", "rerank_features.csv", "rerank_model.json"):
            assert (tmp_path / name).exists(), name
        assert set(report["gap"]) == {"raw", "rule1", "rule2", "rerank"}
        assert all(0.0 <= v <= 1.0 for v in report["gap"].values())
        assert "gap_holdout" in report and 0.0 <= report["map_at_100"] <= 1.0
        on_disk = json.loads((tmp_path / "report.json").read_text())
        assert on_disk["gap"] == report["gap"] and "timings" not in on_disk

    def test_identical_feature_sets_match_single(self, dataset, tmp_path):
        _, paths = dataset
        copies = {}
        for key in ("queries", "index", "nonlandmark"):
            copies[key] = str(tmp_path / f"{key}_copy.lmke")
            shutil.copy(paths[key], copies[key])
        run_pipeline(base_config(paths, tmp_path / "single"))
        run_pipeline(base_config(paths, tmp_path / "double",
                                 queries=[paths["queries"], copies["queries"]],
                                 index=[paths["index"], copies["index"]],
                                 nonlandmark=[paths["nonlandmark"], copies["nonlandmark"]]))
        for name in PRED_FILES:
            assert read(tmp_path / "single" / name) == read(tmp_path / "double" / name), name

    def test_repeat_runs_byte_identical(self, dataset, tmp_path):
        _, paths = dataset
        run_pipeline(base_config(paths, tmp_path / "a"))
        run_pipeline(base_config(paths, tmp_path / "b", workers=3))
        for name in PRED_FILES + ("rerank_model.json", "neighbors.csv"):
            assert read(tmp_path / "a" / name) == read(tmp_path / "b" / name), name
        ra = json.loads(read(tmp_path / "a" / "report.json"))
        rb = json.loads(read(tmp_path / "b" / "report.json"))
        ra.pop("config"), rb.pop("config"), ra.pop("files"), rb.pop("files")
        assert ra == rb

    def test_stage_error_names_stage(self, dataset, tmp_path):
        _, paths = dataset
        cfg = base_config(paths, tmp_path, nonlandmark=[str(tmp_path / "missing.lmke")])
        with pytest.raises(Exception) as info:
            run_pipeline(cfg)
        assert info.value.stage == "load"

    def test_training_split(self):
        ids = [f"q{i}" for i in range(11)]
        train, hold = training_split(ids, 0.5, 3)
        assert len(train) == 6 and train.isdisjoint(hold) and train | hold == set(ids)
        assert training_split(ids, 0.5, 3) == (train, hold)


class TestConfig:
    def test_parse_and_override(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("# experiment\nqueries = a.lmke, b.lmke\nindex = i.lmke,j.lmke\n"
                            "nonlandmark = n.lmke,m.lmke\nk_agg = 5\nrule2 = false\ntau = 0.25  # lower\n")
        cfg = load_config(cfg_file, {"tau": 0.4})
        assert cfg.queries == ["a.lmke", "b.lmke"]
        assert cfg.k_agg == 5 and cfg.rule2 is False and cfg.tau == 0.4

    def test_unknown_key(self):
        with pytest.raises(ParamError):
            parse_config_text("bogus = 1\n")

    def test_bad_value(self):
        with pytest.raises(ParamError):
            parse_config_text("k_search = many\n")

    def test_rule1_needs_nonlandmark(self):
        with pytest.raises(ParamError):
            PipelineConfig(queries=["q"], index=["i"]).validate()


def cli(*args):
    return main([str(a) for a in args])


class TestCli:
    def test_stagewise_equals_orchestrated(self, dataset, tmp_path):
        _, p = dataset
        run_pipeline(base_config(p, tmp_path / "run"))
        s = tmp_path / "stages"
        s.mkdir()
        sets = ["--queries", p["queries"], "--index", p["index"]]
        assert cli("search", *sets, "--out", s / "neighbors.csv") == 0
        assert cli("predict", *sets, "--out", s / "raw.csv") == 0
        assert cli("postprocess", "--predictions", s / "raw.csv", "--queries", p["queries"],
                   "--nonlandmark", p["nonlandmark"], "--rules", "1", "--out", s / "rule1.csv") == 0
        assert cli("postprocess", "--predictions", s / "rule1.csv", "--rules", "2", "--cap", 8,
                   "--out", s / "rule2.csv") == 0
        rr = sets + ["--nonlandmark", p["nonlandmark"], "--predictions", s / "rule2.csv"]
        assert cli("rerank-train", *rr, "--truth", p["truth"], "--n-trees", 20, "--min-leaf", 3,
                   "--out", s / "model.json") == 0
        assert cli("rerank-apply", *rr, "--model", s / "model.json", "--out", s / "rerank.csv") == 0
        run = tmp_path / "run"
        pairs = [("neighbors.csv", "neighbors.csv"), ("predictions_raw.csv", "raw.csv"),
                 ("predictions_rule1.csv", "rule1.csv"), ("predictions_rule2.csv", "rule2.csv"),
                 ("rerank_model.json", "model.json"), ("predictions_rerank.csv", "rerank.csv")]
        for a, b in pairs:
            assert read(run / a) == read(s / b), a

    def test_run_subcommand_with_config(self, dataset, tmp_path, capsys):
        _, p = dataset
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(f"queries = {p['queries']}\nindex = {p['index']}\n"
                       f"nonlandmark = {p['nonlandmark']}\ntruth = {p['truth']}\nout_dir = ignored\n")
        out = tmp_path / "out"
        assert cli("run", "--config", cfg, "--set", "cap=8", "--out-dir", out) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["gap"]["rule2"] >= 0 and (out / "predictions_rule2.csv").exists()
        assert "cap = 8" in json.loads((out / "report.json").read_text())["config"]

    def test_evaluate_prints_scores(self, dataset, tmp_path, capsys):
        _, p = dataset
        run_pipeline(base_config(p, tmp_path, rerank=False))
        capsys.readouterr()
        assert cli("evaluate", "--predictions", tmp_path / "predictions_rule2.csv", "--truth", p["truth"],
                   "--neighbors", tmp_path / "neighbors.csv", "--index", p["index"],
                   "--trace", tmp_path / "trace.csv") == 0
        line = capsys.readouterr().out
        report = json.loads((tmp_path / "report.json").read_text())
        assert f"gap_at_1={report['gap']['rule2']:.6f}" in line
        assert f"map_at_100={report['map_at_100']:.6f}" in line
        assert (tmp_path / "trace.csv").read_text().startswith("rank,query_id")

    def test_error_exit_and_json_line(self, tmp_path, capsys):
        code = cli("evaluate", "--predictions", tmp_path / "nope.csv", "--truth", tmp_path / "t.csv")
        assert code != 0
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["stage"] == "evaluate" and err["error"] and err["message"]

    def test_build_index_from_npy(self, tmp_path):
        mat = np.array([[3.0, 4.0], [0.0, 2.0]])
        np.save(tmp_path / "m.npy", mat)
        (tmp_path / "ids.txt").write_text("a\nb\n")
        (tmp_path / "labels.txt").write_text("5\n-1\n")
        assert cli("build-index", "--input", tmp_path / "m.npy", "--ids", tmp_path / "ids.txt",
                   "--labels", tmp_path / "labels.txt", "--output", tmp_path / "o.lmke") == 0
        out = load_descriptors(tmp_path / "o.lmke")
        assert out.ids == ("a", "b") and out.labels.tolist() == [5, -1] and out.normalized
        assert np.allclose(out.matrix, [[0.6, 0.8], [0.0, 1.0]], atol=1e-7)

    def test_build_index_zero_row_fails(self, tmp_path, capsys):
        np.save(tmp_path / "z.npy", np.zeros((1, 3)))
        assert cli("build-index", "--input", tmp_path / "z.npy", "--output", tmp_path / "o.lmke") != 0
        assert json.loads(capsys.readouterr().err.strip())["error"] == "ZeroVectorError"

    def test_check_grad(self, capsys):
        assert cli("check-grad") == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines and all(line.startswith("PASS") for line in lines)


def test_determinism_across_thread_counts(dataset, tmp_path):
    """Separate processes with different BLAS thread and worker counts."""
    _, p = dataset
    outs = []
    for threads, workers in (("1", 1), ("4", 8)):
        env = dict(os.environ, OPENBLAS_NUM_THREADS=threads, OMP_NUM_THREADS=threads,
                   MKL_NUM_THREADS=threads)
        out = tmp_path / f"t{threads}"
        subprocess.run([sys.executable, "-m", "lmkrec", "run", "--set", f"queries={p['queries']}",
                        "--set", f"index={p['index']}", "--set", f"nonlandmark={p['nonlandmark']}",
                        "--set", f"truth={p['truth']}", "--set", "rerank=true", "--set", "n_trees=10",
                        "--workers", str(workers), "--out-dir", str(out)],
                       check=True, env=env, capture_output=True)
        outs.append(out)
    for name in PRED_FILES + ("neighbors.csv",):
        assert read(outs[0] / name) == read(outs[1] / name), name
