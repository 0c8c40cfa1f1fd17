import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from conformal_forest.cli import main
from conformal_forest.datasets import make_blobs, make_linear

LABELS = ["ant", "bee", "cat", "dog"]


def write_csv(path, data, target="target", labels=None):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(data.n_features)] + [target])
        for x, y in zip(data.features, data.targets):
            w.writerow([repr(float(v)) for v in x] + [labels[int(y)] if labels else repr(float(y))])
    return path


def read_rows(path):
    with path.open() as fh:
        return list(csv.reader(fh))


@pytest.fixture
def clf_files(tmp_path):
    data = make_blobs(260, 4, seed=3)
    train = write_csv(tmp_path / "train.csv", data.subset(np.arange(200)), labels=LABELS)
    test = write_csv(tmp_path / "test.csv", data.subset(np.arange(200, 260)), labels=LABELS)
    return tmp_path, train, test


@pytest.fixture
def reg_files(tmp_path):
    data = make_linear(260, seed=4)
    train = write_csv(tmp_path / "train.csv", data.subset(np.arange(200)))
    test = write_csv(tmp_path / "test.csv", data.subset(np.arange(200, 260)))
    return tmp_path, train, test


def fit_args(train, bundle, *extra):
    return ["fit", "--train", str(train), "--target", "target", "--bundle", str(bundle),
            "--n-estimators", "15", *extra]


class TestFitPredict:
    @pytest.mark.parametrize("method", ["split", "cv", "bootstrap"])
    def test_classification_pipeline(self, clf_files, method, capsys):
        d, train, test = clf_files
        assert main(fit_args(train, d / "m.npz", "--task", "classification", "--method", method,
                             "--cv-folds", "3", "--alpha", "0.1")) == 0
        manifest = json.loads((d / "m.manifest.json").read_text())
        assert manifest["resolved"]["method"] == method and manifest["config"]["alpha"] == [0.1]
        assert main(["predict", "--bundle", str(d / "m.npz"), "--test", str(test),
                     "--output", str(d / "p.csv")]) == 0
        rows = read_rows(d / "p.csv")
        assert rows[0] == ["prediction", "set"] and len(rows) == 61
        for pred, members in rows[1:]:
            assert pred in LABELS and all(m in LABELS for m in members.split("|") if m)
        capsys.readouterr()
        assert main(["evaluate", "--predictions", str(d / "p.csv"), "--truth", str(test),
                     "--target", "target", "--json", str(d / "r.json")]) == 0
        out = capsys.readouterr().out
        report = json.loads(out.strip().splitlines()[-1])
        assert report == json.loads((d / "r.json").read_text())
        assert report["n_evaluated"] == 60 and report["coverage"] >= 0.7
        assert "coverage" in out.splitlines()[0]

    @pytest.mark.parametrize("method", ["split", "cv", "bootstrap"])
    def test_regression_pipeline(self, reg_files, method):
        d, train, test = reg_files
        assert main(fit_args(train, d / "m.npz", "--task", "regression", "--method", method)) == 0
        assert main(["predict", "--bundle", str(d / "m.npz"), "--test", str(test), "--alpha", "0.2",
                     "--output", str(d / "p.csv")]) == 0
        rows = read_rows(d / "p.csv")
        assert rows[0] == ["prediction", "lo", "hi"]
        for p, lo, hi in rows[1:]:
            assert float(lo) <= float(p) <= float(hi)

    def test_unbounded_intervals_print_inf(self, tmp_path):
        train = write_csv(tmp_path / "t.csv", make_linear(6, seed=1))
        assert main(fit_args(train, tmp_path / "m.npz", "--task", "regression", "--method", "split")) == 0
        assert main(["predict", "--bundle", str(tmp_path / "m.npz"), "--test", str(train), "--alpha", "0.05",
                     "--output", str(tmp_path / "p.csv")]) == 0
        for _, lo, hi in read_rows(tmp_path / "p.csv")[1:]:
            assert (lo, hi) == ("-inf", "inf")

    def test_max_threshold_lists_every_label(self, tmp_path):
        data = make_blobs(12, 4, seed=2)
        data.targets[:4] = np.arange(4)
        train = write_csv(tmp_path / "t.csv", data, labels=LABELS)
        assert main(fit_args(train, tmp_path / "m.npz", "--task", "classification", "--method", "split")) == 0
        assert main(["predict", "--bundle", str(tmp_path / "m.npz"), "--test", str(train), "--alpha", "0.05",
                     "--output", str(tmp_path / "p.csv")]) == 0
        for _, members in read_rows(tmp_path / "p.csv")[1:]:
            assert members == "|".join(LABELS)

    def test_zero_threshold_gives_point_intervals(self, tmp_path):
        data = make_linear(40, seed=3)
        data.targets[:] = 2.5
        train = write_csv(tmp_path / "t.csv", data)
        assert main(fit_args(train, tmp_path / "m.npz", "--task", "regression", "--method", "split")) == 0
        assert main(["predict", "--bundle", str(tmp_path / "m.npz"), "--test", str(train),
                     "--output", str(tmp_path / "p.csv")]) == 0
        for p, lo, hi in read_rows(tmp_path / "p.csv")[1:]:
            assert p == lo == hi == "2.5"

    def test_rerun_is_byte_identical(self, clf_files):
        d, train, test = clf_files
        outputs = []
        for k, threads in enumerate(["1", "0", "1"]):
            bundle = d / f"m{k}.npz"
            assert main(fit_args(train, bundle, "--task", "classification", "--method", "bootstrap",
                                 "--k-init", "auto", "--lambda-init", "auto", "--seed", "5",
                                 "--threads", threads)) == 0
            assert main(["predict", "--bundle", str(bundle), "--test", str(test), "--threads", threads,
                         "--output", str(d / f"p{k}.csv")]) == 0
            outputs.append((bundle.read_bytes(), bundle.with_suffix(".manifest.json").read_bytes(),
                            (d / f"p{k}.csv").read_bytes()))
        assert outputs[0] == outputs[1] == outputs[2]

    def test_config_file_and_overrides(self, reg_files):
        d, train, _ = reg_files
        (d / "c.json").write_text(json.dumps({"task": "regression", "method": "cv", "cv_folds": 3, "seed": 9}))
        assert main(fit_args(train, d / "m.npz", "--config", str(d / "c.json"), "--cv-folds", "4")) == 0
        resolved = json.loads((d / "m.manifest.json").read_text())["resolved"]
        assert resolved["K"] == 4 and resolved["seed"] == 9

    def test_manifest_resolved_fields(self, clf_files):
        d, train, _ = clf_files
        assert main(fit_args(train, d / "m.npz", "--task", "classification", "--method", "bootstrap",
                             "--k-init", "auto", "--lambda-init", "auto")) == 0
        resolved = json.loads((d / "m.manifest.json").read_text())["resolved"]
        for key in ("B", "B_tilde", "k_star", "lambda_star", "model_seed", "n_bootstraps_seed", "n_tune"):
            assert key in resolved


class TestErrors:
    def test_k_larger_than_n(self, reg_files, capsys):
        d, train, _ = reg_files
        assert main(fit_args(train, d / "m.npz", "--task", "regression", "--cv-folds", "500")) == 2
        assert "K" in capsys.readouterr().err

    def test_schema_mismatch(self, reg_files, tmp_path):
        d, train, _ = reg_files
        assert main(fit_args(train, d / "m.npz", "--task", "regression", "--method", "split")) == 0
        (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
        assert main(["predict", "--bundle", str(d / "m.npz"), "--test", str(tmp_path / "bad.csv")]) == 2

    def test_missing_target(self, reg_files):
        d, train, _ = reg_files
        args = fit_args(train, d / "m.npz", "--task", "regression")
        args[args.index("--target") + 1] = "nope"
        assert main(args) == 2

    def test_mutually_required_auto(self, reg_files):
        d, train, _ = reg_files
        assert main(fit_args(train, d / "m.npz", "--task", "classification", "--k-init", "auto")) == 2

    def test_runtime_error_exit_one(self, tmp_path):
        assert main(fit_args(tmp_path / "missing.csv", tmp_path / "m.npz", "--task", "regression")) == 1

    def test_entry_point_subprocess(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "conformal_forest.cli", "evaluate", "--predictions",
                               str(tmp_path / "x.csv"), "--truth", str(tmp_path / "y.csv"), "--target", "t"],
                              capture_output=True, text=True)
        assert proc.returncode == 1 and "error" in proc.stderr


class TestEvaluate:
    def run(self, tmp_path, pred_text, truth_text, capsys):
        (tmp_path / "p.csv").write_text(pred_text)
        (tmp_path / "t.csv").write_text(truth_text)
        code = main(["evaluate", "--predictions", str(tmp_path / "p.csv"), "--truth", str(tmp_path / "t.csv"),
                     "--target", "y"])
        return code, capsys.readouterr().out

    def test_full_sets(self, tmp_path, capsys):
        code, out = self.run(tmp_path, "prediction,set\na,a|b\nb,a|b\n", "y\na\nb\n", capsys)
        assert code == 0 and json.loads(out.splitlines()[-1])["coverage"] == 1.0

    def test_empty_sets(self, tmp_path, capsys):
        code, out = self.run(tmp_path, "prediction,set\na,\nb,\n", "y\na\nb\n", capsys)
        report = json.loads(out.splitlines()[-1])
        assert code == 0 and report["coverage"] == 0.0 and report["mean_size_or_length"] == 0.0

    def test_two_of_three(self, tmp_path, capsys):
        code, out = self.run(tmp_path, "prediction,set\na,a\nb,b|c\na,a\n", "y\na\nc\nb\n", capsys)
        assert json.loads(out.splitlines()[-1])["coverage"] == 2 / 3

    def test_intervals_with_inf(self, tmp_path, capsys):
        code, out = self.run(tmp_path, "prediction,lo,hi\n0,-inf,inf\n1,0.5,1.5\n", "y\n9\n2\n", capsys)
        report = json.loads(out.splitlines()[-1])
        assert report["coverage"] == 0.5 and report["mean_size_or_length"] == "inf"

    def test_length_mismatch(self, tmp_path, capsys):
        code, _ = self.run(tmp_path, "prediction,set\na,a\n", "y\na\nb\n", capsys)
        assert code == 2


class TestBenchmark:
    def test_single_trial_smoke(self, tmp_path):
        out = tmp_path / "b.csv"
        assert main(["benchmark", "--n-trials", "1", "--generator", "blobs", "--task", "classification",
                     "--n-train", "60", "--n-test", "30", "--n-classes", "3", "--n-estimators", "10",
                     "--methods", "split", "cv", "bootstrap", "--cv-folds", "3", "--alpha", "0.1", "0.2",
                     "--output", str(out)]) == 0
        rows = list(csv.DictReader(out.open()))
        assert len(rows) == 6 + 6
        assert sum(r["trial"] == "mean" for r in rows) == 6
        for r in rows:
            assert float(r["fit_seconds"]) >= 0 and float(r["predict_seconds"]) >= 0
            assert 0 <= float(r["coverage"]) <= 1

    def test_split_regression_coverage(self, tmp_path):
        out = tmp_path / "b.csv"
        assert main(["benchmark", "--n-trials", "50", "--generator", "linear", "--task", "regression",
                     "--methods", "split", "--n-estimators", "20", "--alpha", "0.1", "--output", str(out)]) == 0
        rows = list(csv.DictReader(out.open()))
        mean = [r for r in rows if r["trial"] == "mean"][0]
        assert len(rows) == 51 and float(mean["coverage"]) >= 0.88

    def test_csv_resampling(self, reg_files, tmp_path):
        d, train, _ = reg_files
        out = tmp_path / "b.csv"
        assert main(["benchmark", "--n-trials", "2", "--generator", "csv", "--data", str(train), "--target",
                     "target", "--task", "regression", "--n-train", "100", "--n-test", "50",
                     "--n-estimators", "10", "--method", "bootstrap", "--output", str(out)]) == 0
        assert len(list(csv.DictReader(out.open()))) == 3

    def test_csv_needs_data(self):
        assert main(["benchmark", "--generator", "csv", "--task", "regression"]) == 2
