import csv
import json

import pytest

from flexmoe.cli import main

TINY = ["--n_samples", "160", "--d", "16", "--n_heads", "2", "--input_dims", "5,4,3,2"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", *TINY, "--epochs", "2", "--warmup_epochs", "1", "--out", str(out)]) == 0
    return out


def test_train_artifacts(trained):
    sdir = trained / "seed_0"
    for name in ("epochs.csv", "steps.csv", "best.npz", "last.npz", "eval_report.csv"):
        assert (sdir / name).exists(), name
    epochs = rows(sdir / "epochs.csv")
    assert len(epochs) == 3 and epochs[0][0] == "epoch"
    assert (trained / "train_config.yaml").exists()
    assert (trained / "summary.csv").exists()


def test_eval_report_has_three_metrics(trained, capsys):
    code, out, _ = run(capsys, "eval", *TINY, "--out", str(trained))
    assert code == 0 and "accuracy" in out
    report = rows(trained / "seed_0" / "eval_report.csv")
    assert [r[0] for r in report] == ["metric", "accuracy", "macro_f1", "auc_macro"]
    for _, value in report[1:]:
        assert 0.0 <= float(value) <= 1.0


def test_analyze_writes_matrices(trained, capsys):
    code, _, _ = run(capsys, "analyze", *TINY, "--out", str(trained))
    assert code == 0
    act = rows(trained / "seed_0" / "activation_matrix.csv")
    assert len(act[0]) == 17
    assert len(rows(trained / "seed_0" / "bank_similarity_cols.csv")) == 5


def test_synth_writes_manifest(tmp_path, capsys):
    code, _, _ = run(capsys, "synth", *TINY, "--out", str(tmp_path))
    assert code == 0
    assert (tmp_path / "data" / "manifest.yaml").exists()
    assert len(rows(tmp_path / "data" / "labels.csv")) == 161


def test_invalid_top_k_fails_with_json_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", *TINY, "--top_k", "20", "--out", str(tmp_path))
    assert code != 0
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["error"] == "ConfigError" and payload["fields"] == ["top_k"]


def test_unparseable_override(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--epochs", "two", "--out", str(tmp_path))
    assert code == 2
    assert json.loads(err)["fields"] == ["epochs"]


def test_gradcheck_writes_report(tmp_path, capsys):
    code, _, _ = run(capsys, "gradcheck", *TINY, "--max-coords", "2", "--out", str(tmp_path))
    result = json.loads((tmp_path / "gradcheck.json").read_text())
    for group in ("encoders", "filler", "layers", "head", "all"):
        assert group in result
    assert code == (0 if result["all"] < 1e-5 else 1)


def test_determinism_of_step_logs(tmp_path):
    logs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", *TINY, "--epochs", "2", "--warmup_epochs", "1", "--out", str(out)]) == 0
        logs.append((out / "seed_0" / "steps.csv").read_bytes())
    assert logs[0] == logs[1]
