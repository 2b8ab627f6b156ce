import csv
import json
import subprocess
import sys

import pytest

from dfid import cli
from dfid import experiment as ex
from dfid.errors import NumericError, SplitError

from conftest import SMOKE


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Dataset and trained components produced through the CLI, in pipeline order."""
    d = tmp_path_factory.mktemp("cli")
    common = ("--config", SMOKE, "--seed", 7)
    assert run("synth", *common, "--out", d / "data") == 0
    assert run("train-teacher", *common, "--dataset", d / "data", "--out", d / "teacher.ckpt") == 0
    assert run("train-recon", *common, "--dataset", d / "data", "--out", d / "ops") == 0
    assert run("train-extractor", *common, "--dataset", d / "data", "--teacher", d / "teacher.ckpt",
               "--schedule", "20:1,0;20:0,1", "--out", d / "student.ckpt") == 0
    assert run("train-detector", *common, "--dataset", d / "data", "--student", d / "student.ckpt",
               "--teacher", d / "teacher.ckpt", "--ops", d / "ops", "--folds", 2,
               "--out", d / "det") == 0
    return d


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestPipeline:
    def test_dataset_files(self, work):
        names = {p.name for p in (work / "data").iterdir()}
        assert {"manifest.json", "test.csv", "recon_train.csv"} <= names

    def test_teacher_and_student(self, work):
        assert (work / "teacher.ckpt").exists() and (work / "teacher.ckpt.json").exists()
        side = json.loads((work / "student.ckpt.json").read_text())
        assert [h["epochs"] for h in side["history"]] == [20, 20]

    def test_extract(self, work):
        assert run("extract", "--student", work / "student.ckpt", "--dataset", work / "data",
                   "--split", "validation", "--out", work / "feats.csv") == 0
        rows = read_csv(work / "feats.csv")
        assert rows[0][:3] == ["sample_id", "identity", "label"]
        assert len(rows[0]) == 3 + 16 and len(rows) > 1

    def test_detector_folds(self, work):
        folds = json.loads((work / "det" / "folds.json").read_text())["folds"]
        assert [f["rotation"] for f in folds] == [0, 1]
        assert (work / "det" / "fold_1" / "bundle.json").exists()

    def test_score(self, work):
        src = work / "data" / "test.csv"
        assert run("score", "--bundle", work / "det", "--input", src, "--out", work / "s.csv") == 0
        rows = read_csv(work / "s.csv")
        assert rows[0] == ["sample_id", "identity", "label", "score"]
        assert len(rows) == len(read_csv(src))
        assert run("score", "--bundle", work / "det" / "fold_1", "--input", src, "--identity", 2,
                   "--out", work / "s2.csv") == 0
        assert {r[1] for r in read_csv(work / "s2.csv")[1:]} == {"2"}

    def test_score_is_repeatable(self, work):
        src = work / "data" / "test.csv"
        run("score", "--bundle", work / "det", "--input", src, "--out", work / "a.csv")
        run("score", "--bundle", work / "det", "--input", src, "--out", work / "b.csv")
        assert (work / "a.csv").read_bytes() == (work / "b.csv").read_bytes()

    @pytest.mark.parametrize("df,rc", [("A", "A"), ("B", "A"), ("B", "B")])
    def test_residuals(self, work, df, rc):
        out = work / f"res_{df}{rc}" / "residuals.csv"
        assert run("residuals", "--ops", work / "ops", "--dataset", work / "data",
                   "--df-family", df, "--recon-family", rc, "--out", out) == 0
        info = json.loads((out.parent / "residual_cdf.json").read_text())
        assert (info["df_family"], info["recon_family"]) == (df, rc)
        assert 0.0 <= info["near_idem_fraction"] <= 1.0

    def test_train_recon_single_identity(self, work):
        assert run("train-recon", "--config", SMOKE, "--dataset", work / "data", "--identity", 1,
                   "--epochs", 3, "--out", work / "ops1") == 0
        assert set(json.loads((work / "ops1" / "operators.json").read_text())) == {"1"}


class TestEvalAndReport:
    def test_eval_then_report(self, tmp_path, capsys):
        assert run("eval", "--config", SMOKE, "--seed", 7, "--out", tmp_path) == 0
        shown = capsys.readouterr().out
        assert "proposed" in shown and "residuals A/A" in shown
        assert run("report", "--out", tmp_path) == 0
        assert (tmp_path / "report.txt").read_text().strip() == capsys.readouterr().out.strip()

    def test_report_schema_check(self, tmp_path):
        (tmp_path / "report.json").write_text(json.dumps({"schema": 99, "mode": "theory"}))
        assert run("report", "--report", tmp_path / "report.json") == cli.EXIT_CONFIG

    def test_theory(self, tmp_path):
        assert run("theory", "--u0", 0, "--u1", 2, "--sigma-mu", 0.3, "--k", 1, "--reps", 200,
                   "--mc-n", 10_000, "--out", tmp_path) == 0
        rep = json.loads((tmp_path / "theory_report.json").read_text())
        assert rep["n_samples"] == 10_000
        assert {"delta_u", "sigma_mu", "gap"} <= set(read_csv(tmp_path / "sweep.csv")[0])

    def test_theory_mode_eval(self, tmp_path):
        cfg = tmp_path / "t.yaml"
        cfg.write_text("mode: theory\ntheory:\n  reps: 200\n  report_mc_n: 1000\n")
        assert run("eval", "--config", cfg, "--out", tmp_path / "o") == 0
        assert (tmp_path / "o" / "theory_sweep.csv").exists()


class TestExitCodes:
    def test_config_error(self, tmp_path):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("detector:\n  learning_rate: 1\n")
        assert run("eval", "--config", cfg, "--out", tmp_path) == cli.EXIT_CONFIG

    def test_missing_out(self):
        assert run("synth", "--config", SMOKE) == cli.EXIT_CONFIG

    def test_missing_file(self, tmp_path):
        assert run("extract", "--student", tmp_path / "none.ckpt", "--dataset", tmp_path,
                   "--out", tmp_path / "f.csv") == cli.EXIT_IO

    def test_training_failure(self, tmp_path):
        cfg = tmp_path / "t.yaml"
        cfg.write_text("data: {K: 4, frames_per_session: 30}\nteacher: {epochs: 0, min_accuracy: 1.01}\n")
        assert run("eval", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_NUMERIC

    def test_mapping(self):
        assert cli.exit_code(ex.StageError("x", SplitError("s"))) == cli.EXIT_CONFIG
        assert cli.exit_code(NumericError("n")) == cli.EXIT_NUMERIC
        assert cli.exit_code(FileNotFoundError("f")) == cli.EXIT_IO
        with pytest.raises(RuntimeError):
            cli.exit_code(RuntimeError("other"))

    def test_bad_identity_argument(self, work):
        assert run("train-recon", "--dataset", work / "data", "--identity", "x",
                   "--out", work / "o") == cli.EXIT_CONFIG

    def test_console_script(self):
        res = subprocess.run([sys.executable, "-m", "dfid.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "train-detector" in res.stdout
        res = subprocess.run([sys.executable, "-m", "dfid.cli", "eval", "--mode", "nope"],
                             capture_output=True, text=True)
        assert res.returncode == 2
