import hashlib
import json

import numpy as np
import pytest

from omcl import cli

SMALL = ["--backbone", "mlp", "--widths", "16", "--d", "4", "--epochs", "2", "--no-augment",
         "--n-classes", "6", "--per-class", "30", "--batch-size", "32"]


def run(capsys, *argv):
    code = cli.run(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_split_protocol(tmp_path, capsys):
    code, out, _ = run(capsys, "split", "--dataset", "bloodmnist-dir", "--classes", "8", "--k", "5",
                       "--seed", "2023", "--out", str(tmp_path))
    assert code == 0
    doc = json.loads((tmp_path / "splits.json").read_text())
    assert doc["dataset"] == "bloodmnist-dir" and doc["master_seed"] == 2023
    assert [(len(t["known"]), len(t["unknown"])) for t in doc["trials"]] == [(4, 4)] * 5
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    digest = hashlib.sha256((tmp_path / "splits.json").read_bytes()).hexdigest()
    assert manifest["files"] == {"splits.json": digest}


def test_split_infeasible_is_data_error(tmp_path, capsys):
    code, _, err = run(capsys, "split", "--classes", "4", "--k", "9", "--out", str(tmp_path))
    assert code == 2 and "data error" in err


def test_missing_config_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--config", str(tmp_path / "missing.toml"))
    assert code == 1 and "usage" in err


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train", "--no-such-flag"], ["split", "--k", "x"]])
def test_usage_errors(capsys, argv):
    assert run(capsys, *argv)[0] == 1


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--configs", "2")
    assert code == 0
    assert [line.split()[0] for line in out.splitlines()] == ["cos", "mlas", "oss", "omcl"]


def test_gradcheck_failure_exit(capsys):
    # a tolerance nothing can meet turns the check into a numerical failure
    assert run(capsys, "gradcheck", "--configs", "1", "--tolerance", "1e-30")[0] == 3


def test_train_eval_export_report(tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "train", *SMALL, "--out", str(out))
    assert code == 0 and stdout.startswith("config-digest: ")
    digest = stdout.split()[1]
    report = json.loads((out / "report_trial0.json").read_text())
    assert report["config_digest"] == digest
    manifest = json.loads((out / "manifest.json").read_text())
    assert {"trial0.omcl", "report_trial0.json", "train_log.jsonl", "config.json"} <= set(manifest["files"])
    lines = (out / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(line)["epoch"] for line in lines] == [0, 1]

    code, stdout, _ = run(capsys, "eval", "--checkpoint", str(out / "trial0.omcl"), "--out", str(tmp_path / "ev"))
    assert code == 0 and stdout.split()[1] == digest
    again = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert again == report
    assert (tmp_path / "ev" / "oscr_curve.csv").read_text().startswith("threshold,fpr,ccr\n")

    code, _, _ = run(capsys, "export-embeddings", "--checkpoint", str(out / "trial0.omcl"), "--cap", "3",
                     "--out", str(tmp_path / "ex"))
    assert code == 0
    assert len((tmp_path / "ex" / "embeddings.csv").read_text().splitlines()) == 1 + 3 * 6

    code, stdout, _ = run(capsys, "report", f"OMCL={out}")
    assert code == 0 and "OMCL" in stdout and "AUROC_o%" in stdout


def test_flags_override_config_file(tmp_path, capsys):
    (tmp_path / "c.toml").write_text('epochs = 1\nt = 0.3\nbackbone = "mlp"\n')
    code, stdout, _ = run(capsys, "train", "--config", str(tmp_path / "c.toml"), *SMALL, "--t", "0.05",
                          "--out", str(tmp_path / "o"))
    assert code == 0
    config = json.loads((tmp_path / "o" / "config.json").read_text())
    assert config["t"] == 0.05 and config["epochs"] == 2


def test_train_is_idempotent(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "train", *SMALL, "--out", str(tmp_path / name))[0] == 0
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert a == b


def test_sweep_command(tmp_path, capsys):
    code, stdout, _ = run(capsys, "sweep", *SMALL, "--axis", "t", "--values", "0,0.1", "--out", str(tmp_path))
    assert code == 0
    assert (tmp_path / "sweep.csv").read_text().splitlines()[0] == "value,acc,auroc,oscr"
    assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 3


def test_numerical_failure_exit(tmp_path, capsys):
    with np.errstate(all="ignore"):
        code, _, err = run(capsys, "train", *SMALL, "--lr", "1e300", "--out", str(tmp_path))
    assert code == 3 and "numerical" in err


def test_bad_dataset_is_data_error(tmp_path, capsys):
    code, _, _ = run(capsys, "train", *SMALL, "--dataset", str(tmp_path / "none"), "--out", str(tmp_path / "o"))
    assert code == 2


def test_report_without_reports_is_data_error(tmp_path, capsys):
    assert run(capsys, "report", f"x={tmp_path}")[0] == 2
