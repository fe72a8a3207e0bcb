import json

import pytest

from consolidate import cli


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_no_command_is_usage_error(capsys):
    assert run([], capsys)[0] == 1


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run(["sweep", "--bogus"], capsys)
    assert code == 1 and "unrecognized" in err


def test_unknown_set_key_rejected(capsys, tmp_path):
    code, _, err = run(["train-seq", "--set", "nope=1", "--output-dir", str(tmp_path)], capsys)
    assert code == 1 and "nope" in err
    code, _, err = run(["train-seq", "--set", "noequals", "--output-dir", str(tmp_path)], capsys)
    assert code == 1


def test_unknown_config_keys_rejected(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"run": {"bogus": 1}}))
    assert run(["train-seq", "--config", str(cfg)], capsys)[0] == 1
    cfg.write_text(json.dumps({"options": {"lambdas": [1]}}))
    assert run(["train-seq", "--config", str(cfg)], capsys)[0] == 1
    cfg.write_text(json.dumps({"extra": {}}))
    assert run(["train-seq", "--config", str(cfg)], capsys)[0] == 1


def test_missing_data_names_idx_paths(capsys, tmp_path):
    code, _, err = run(["train-seq", "--data-dir", str(tmp_path / "none"), "--output-dir", str(tmp_path / "o")], capsys)
    assert code == 2
    assert "train-images-idx3-ubyte" in err and "t10k-labels-idx1-ubyte" in err
    assert "CONSOLIDATE_DATA_DIR" in err


def test_demo_explosion_output(capsys, tmp_path):
    code, out, _ = run(["demo-explosion", "--alpha", "0.1", "--lambda", "10", "--omega", "3", "--steps", "10",
                        "--output-dir", str(tmp_path)], capsys)
    assert code == 0
    lines = (tmp_path / "explosion.csv").read_text().splitlines()
    assert lines[0] == "step,original,stabilized"
    step3 = lines[4].split(",")
    assert float(step3[1]) == 8.0 and float(step3[2]) == 0.25**3
    assert "alpha*lambda*omega = 3" in out
    echo = json.loads((tmp_path / "config.json").read_text())
    assert echo["command"] == "demo-explosion" and echo["options"]["omega"] == 3.0


def test_train_seq_and_config_roundtrip(capsys, tmp_path, synthetic_data_dir):
    out1 = tmp_path / "a"
    code, out, _ = run(["train-seq", "--tasks", "2", "--epochs", "1", "--set", "hidden_layer_sizes=16",
                        "--set", "n_importance_samples=50", "--data-dir", synthetic_data_dir,
                        "--lambda", "3", "--seed", "4", "--output-dir", str(out1)], capsys)
    assert code == 0 and "average accuracy" in out
    echo = json.loads((out1 / "config.json").read_text())
    assert echo["run"]["ewc_lambda"] == 3.0 and echo["run"]["seed"] == 4 and echo["run"]["hidden_layer_sizes"] == [16]
    out2 = tmp_path / "b"
    assert run(["train-seq", "--config", str(out1 / "config.json"), "--output-dir", str(out2)], capsys)[0] == 0
    assert (out1 / "runs.csv").read_bytes() == (out2 / "runs.csv").read_bytes()
    assert (out1 / "config.json").read_bytes() == (out2 / "config.json").read_bytes()


def test_sweep_writes_csv_and_svg(capsys, tmp_path, synthetic_data_dir):
    args = ["sweep", "--net", "dense", "--method", "mas", "--lambdas", "0,5", "--runs", "2", "--tasks", "2",
            "--epochs", "1", "--set", "hidden_layer_sizes=16", "--set", "n_importance_samples=50",
            "--data-dir", synthetic_data_dir, "--jobs", "1"]
    assert run(args + ["--output-dir", str(tmp_path / "a")], capsys)[0] == 0
    assert run(args + ["--output-dir", str(tmp_path / "b")], capsys)[0] == 0
    for name in ("runs.csv", "sweep.csv", "sweep.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len((tmp_path / "a" / "sweep.csv").read_text().splitlines()) == 3


def test_prune_and_report(capsys, tmp_path, synthetic_data_dir):
    args = ["prune", "--criteria", "magnitude,mas", "--fractions", "0,0.5,1", "--runs", "2", "--epochs", "1",
            "--set", "hidden_layer_sizes=16", "--set", "n_importance_samples=50",
            "--data-dir", synthetic_data_dir, "--jobs", "1", "--output-dir", str(tmp_path / "p")]
    assert run(args, capsys)[0] == 0
    assert (tmp_path / "p" / "prune.svg").exists()
    code, out, _ = run(["report", str(tmp_path / "p" / "prune.csv"), "--output-dir", str(tmp_path / "r")], capsys)
    assert code == 0 and (tmp_path / "r" / "prune.svg").exists()


def test_report_errors(capsys, tmp_path):
    assert run(["report", "--output-dir", str(tmp_path)], capsys)[0] == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("")
    code, _, err = run(["report", str(bad), "--output-dir", str(tmp_path / "o")], capsys)
    assert code == 2 and "line 1" in err


def test_fetch_data_offline_validation(capsys, tmp_path, synthetic_data_dir):
    code, out, _ = run(["fetch-data", "--data-dir", synthetic_data_dir, "--output-dir", str(tmp_path)], capsys)
    assert code == 0 and "mnist" in out and "300 samples OK" in out
    assert run(["fetch-data", "--data-dir", str(tmp_path / "none"), "--output-dir", str(tmp_path)], capsys)[0] == 2


def test_help_documents_csv_schemas(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    out = capsys.readouterr().out
    assert "sweep.csv" in out and "CONSOLIDATE_DATA_DIR" in out
