import json
import shutil
import subprocess
import sys

import pytest

from trasend import cli
from trasend.data import DATA_DIR_ENV

CONFIG = {
    "synthetic": {"users": 2, "classes": 2, "samples_per_class": 2},
    "model": {"conv_filters": 4, "gru_units": 8, "heads": 2, "d_k": 4},
    "train": {"epochs": 1, "batch_size": 8, "augment_copies": 1},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "c.json").write_text(json.dumps(CONFIG))
    assert cli.main(["synth", "--config", str(root / "c.json"), "--seed", "3", "--out", str(root / "data")]) == 0
    return root


def run(workspace, *args):
    return cli.main([*args, "--config", str(workspace / "c.json")])


def test_train_writes_report(workspace, capsys):
    out = workspace / "louo"
    assert run(workspace, "train", "--variant", "trasend", "--data", str(workspace / "data"), "--out", str(out)) == 0
    report = json.loads((out / "eval_report.json").read_text())
    assert sorted(report["per_user"]) == ["u00", "u01"]
    assert 0 <= report["aggregate_f1"] <= 1 and report["averaging"] == "macro"
    assert "aggregate macro-F1" in capsys.readouterr().out


def test_fold_evaluate_personalize(workspace):
    data = str(workspace / "data")
    out = workspace / "fold"
    assert run(workspace, "preprocess", "--data", data, "--out", str(out)) == 0
    npz = str(out / "samples.npz")
    assert run(workspace, "train", "--variant", "deepsense", "--fold", "u01", "--data", npz, "--out", str(out)) == 0
    assert json.loads((out / "history.json").read_text())["best_epoch"] == 0
    ck = str(out / "checkpoint")
    assert run(workspace, "evaluate", "--checkpoint", ck, "--user", "u01", "--data", npz, "--out", str(out)) == 0
    assert list(json.loads((out / "evaluation.json").read_text())["per_user"]) == ["u01"]
    assert run(workspace, "personalize", "--checkpoint", ck, "--user", "u01", "--data", npz, "--out", str(out)) == 0
    result = json.loads((out / "personalization.json").read_text())
    assert result["n_adapt"] == 2 and result["n_test"] == 2


def test_unknown_variant_is_usage_error(workspace, capsys):
    assert run(workspace, "train", "--variant", "lstm", "--data", str(workspace / "data")) == 1
    assert "invalid choice" in capsys.readouterr().err


def test_unknown_config_key_is_usage_error(workspace, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epoch": 3}}))
    assert cli.main(["train", "--config", str(bad), "--data", str(workspace / "data")]) == 1
    bad.write_text(json.dumps({"optimizer": {}}))
    assert cli.main(["train", "--config", str(bad), "--data", str(workspace / "data")]) == 1


def test_missing_data_is_data_error(workspace, tmp_path, monkeypatch):
    monkeypatch.delenv(DATA_DIR_ENV, raising=False)
    assert run(workspace, "train", "--data", str(tmp_path / "nowhere")) == 2
    assert run(workspace, "train") == 1  # neither flag nor environment


def test_malformed_csv_is_data_error(workspace, tmp_path):
    broken = tmp_path / "broken"
    shutil.copytree(workspace / "data", broken)
    rec = broken / "u00" / "acc.csv"
    lines = rec.read_text().splitlines()
    lines[5], lines[6] = lines[6], lines[5]
    rec.write_text("\n".join(lines) + "\n")
    assert run(workspace, "preprocess", "--data", str(broken), "--out", str(tmp_path)) == 2


def test_bad_checkpoint_is_data_error(workspace, tmp_path):
    assert run(workspace, "evaluate", "--checkpoint", str(tmp_path), "--data", str(workspace / "data")) == 2


def test_environment_variable_supplies_data(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv(DATA_DIR_ENV, str(workspace / "data"))
    assert run(workspace, "preprocess", "--out", str(tmp_path)) == 0
    assert (tmp_path / "samples.npz").exists()
    # the flag wins over the environment
    assert run(workspace, "preprocess", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)) == 2


def test_gradcheck_suite_exit_codes(workspace, tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(cli, "gradcheck_suite", lambda seed, include_model: {"add": 1e-12, "model": 3e-4})
    assert run(workspace, "validate", "--suite", "gradcheck", "--out", str(tmp_path)) == 3
    assert "FAIL" in capsys.readouterr().out
    monkeypatch.setattr(cli, "gradcheck_suite", lambda seed, include_model: {"add": 1e-12, "model": 2e-9})
    assert run(workspace, "validate", "--suite", "gradcheck", "--out", str(tmp_path)) == 0
    assert json.loads((tmp_path / "gradcheck.json").read_text())["model"] == 2e-9


def test_numeric_failure_exit_code(workspace, monkeypatch):
    from trasend.autodiff import NumericError

    def boom(*a, **k):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(cli, "leave_one_user_out", boom)
    assert run(workspace, "train", "--data", str(workspace / "data")) == 3


def test_permuted_suite_runs_on_synthetic_default(workspace, tmp_path, monkeypatch):
    monkeypatch.delenv(DATA_DIR_ENV, raising=False)
    assert run(workspace, "validate", "--suite", "permuted", "--out", str(tmp_path)) == 0
    result = json.loads((tmp_path / "permuted.json").read_text())
    assert result["chance"] == 0.5 and result["target_user"] == "u00"


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "trasend", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for command in ("synth", "preprocess", "train", "evaluate", "personalize", "validate"):
        assert command in proc.stdout
