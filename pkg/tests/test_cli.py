import json

import pytest

from ciml.cli import main


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_oracle_verify(capsys):
    code, out, _ = run(["oracle", "verify", "--nets", "10", "--bound-nets", "4", "--joints", "10", "--seed", "1"],
                       capsys)
    assert code == 0
    assert "PASS" in out and "FAIL" not in out


def test_usage_errors_exit_64(capsys):
    for argv in (["bogus"], ["oracle", "verify", "--nope"], [], ["demo", "shapes", "--workdir", "x"]):
        code, _, err = run(argv, capsys)
        assert code == 64, argv
        # argparse may print the usage synopsis; exactly one line carries the error prefix
        assert len([line for line in err.splitlines() if line.startswith("CIML-ERR:")]) == 1


def test_missing_config_exits_1(tmp_path, capsys):
    code, _, err = run(["train", "--config", str(tmp_path / "missing.toml"), "--data", str(tmp_path)], capsys)
    assert code == 1
    assert err.startswith("CIML-ERR:") and "missing.toml" in err


def test_bad_dataset_exits_1(tmp_path, capsys):
    code, _, err = run(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path)], capsys)
    assert code == 1 and err.startswith("CIML-ERR:")
    code, _, err = run(["viz-weights", "--weights", str(tmp_path / "none.json")], capsys)
    assert code == 1 and err.startswith("CIML-ERR:")


def test_demo_shapes_generate_is_seeded(tmp_path, capsys):
    for d in ("a", "b"):
        code, _, _ = run(["demo", "shapes", "--generate", "--n", "4", "--size", "32", "--seed", "7",
                          "--workdir", str(tmp_path / d)], capsys)
        assert code == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.raw"))
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_demo_shapes_train_evaluate(tmp_path, capsys):
    wd = str(tmp_path / "w")
    code, out, _ = run(["demo", "shapes", "--generate", "--train", "--evaluate", "--export-figures", "--n", "20",
                        "--size", "32", "--epochs", "2", "--iterations", "1", "--batch-size", "4", "--rows", "2",
                        "--workdir", wd], capsys)
    assert code == 0, out
    assert "dice" in out.lower()
    assert any((tmp_path / "w").rglob("*.png"))


def test_pipeline_end_to_end(tmp_path, capsys):
    data, run_dir = tmp_path / "data", tmp_path / "run"
    code, _, _ = run(["synth", "generate", "--out", str(data), "--n-cases", "2", "--size", "16", "--seed", "3"],
                     capsys)
    assert code == 0
    cfg = json.loads((data / "config.json").read_text())
    cfg["training"]["iterations_per_epoch"] = 2
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    code, out, err = run(["train", "--config", str(tmp_path / "cfg.json"), "--data", str(data),
                          "--out", str(run_dir), "--epochs", "1"], capsys)
    assert code == 0, err
    assert (run_dir / "model.ckpt").exists() and (run_dir / "train_log.jsonl").exists()
    code, out, err = run(["eval", "--checkpoint", str(run_dir / "model.ckpt"), "--data", str(data),
                          "--out", str(tmp_path / "m.csv")], capsys)
    assert code == 0, err
    assert (tmp_path / "m.csv").read_text().startswith("case_id,region,dice,hd95")
    code, out, err = run(["viz-cam", "--checkpoint", str(run_dir / "model.ckpt"), "--data", str(data),
                          "--out", str(tmp_path / "cam"), "--segmentor", "T2", "--region", "WT"], capsys)
    assert code == 0, err
    weights = tmp_path / "cam" / "weights.json"
    assert json.loads(weights.read_text())["averaged_over_cases"] == 2
    code, _, err = run(["viz-weights", "--weights", str(weights), "--out", str(tmp_path / "w.png")], capsys)
    assert code == 0, err
    code, _, err = run(["viz-cam", "--checkpoint", str(run_dir / "model.ckpt"), "--data", str(data),
                        "--region", "NOPE"], capsys)
    assert code == 1 and err.startswith("CIML-ERR:")


def test_train_rejects_mismatched_dataset(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "generate", "--out", str(data), "--n-cases", "1", "--size", "16",
                 "--modalities", "2", "--regions", "1"]) == 0
    capsys.readouterr()
    other = tmp_path / "other"
    assert main(["synth", "generate", "--out", str(other), "--n-cases", "1", "--size", "16"]) == 0
    capsys.readouterr()
    code, _, err = run(["train", "--config", str(other / "config.json"), "--data", str(data), "--out",
                        str(tmp_path / "r"), "--epochs", "1"], capsys)
    assert code == 1 and "lacks modalities" in err


@pytest.mark.parametrize("argv", [["synth", "generate", "--out", "x", "--size", "24"]])
def test_runtime_error_exit_2(argv, tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run(argv, capsys)
    assert code == 2 and err.startswith("CIML-ERR:")
