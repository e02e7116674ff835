"""Subcommand wiring, exit codes, and the machine-readable error line."""

import json

import pytest

from coopmtsp.cli import main


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert main(["gen-data", "--n", "4", "--count", "3", "--seed", "5", "--out", str(out)]) == 0
    return out


def test_gen_data_writes_manifest_and_instances(dataset_dir):
    assert (dataset_dir / "manifest.json").exists()
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    assert manifest["n"] == 4 and manifest["count"] == 3
    for name in manifest["files"]:
        assert (dataset_dir / name).exists()


def test_plan_prints_json(dataset_dir, capsys):
    code = main(
        ["plan", "--dataset", str(dataset_dir), "--index", "1", "--method", "exhaustive"]
    )
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["method"] == "exhaustive" and out["success"] is True
    assert out["cost"] > 0 and out["plan_time_s"] > 0


def test_plan_without_policy_checkpoint_fails(dataset_dir, capsys):
    code = main(["plan", "--dataset", str(dataset_dir), "--method", "policy"])
    assert code == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("error ")
    payload = json.loads(err.removeprefix("error "))
    assert payload["type"] == "MissingCheckpoint"


def test_bench_writes_report(dataset_dir, tmp_path, capsys):
    code = main(
        [
            "bench", "--dataset", str(dataset_dir), "--methods", "greedy,matching",
            "--format", "json", "--out", str(tmp_path),
        ]
    )
    assert code == 0
    rows = json.loads((tmp_path / "benchmark.json").read_text())
    assert {r["method"] for r in rows} == {"greedy", "matching"}
    assert all(r["success_rate"] == 1.0 for r in rows)
    assert "report" in capsys.readouterr().out


def test_bench_unknown_method_error_line(dataset_dir, capsys):
    code = main(["bench", "--dataset", str(dataset_dir), "--methods", "magic"])
    assert code == 2
    payload = json.loads(capsys.readouterr().err.strip().removeprefix("error "))
    assert payload["type"] == "ValueError" and "magic" in payload["message"]


def test_missing_dataset_error_line(tmp_path, capsys):
    code = main(["bench", "--dataset", str(tmp_path / "nope"), "--methods", "greedy"])
    assert code == 2
    payload = json.loads(capsys.readouterr().err.strip().removeprefix("error "))
    assert payload["type"] == "FileNotFoundError"


def test_train_policy_then_plan_with_checkpoint(dataset_dir, tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text(
        "[train]\n"
        "n = 4\niterations = 1\nepisodes_per_iter = 2\nminibatch = 32\n"
        "val_every = 0\nseed = 9\n"
        "\n"
        "[policy]\n"
        "node_dim = 16\ncoop_dim = 8\nheads = 2\nnode_layers = 1\n"
        "coop_layers = 1\ngen_layers = 1\nhead_hidden = 16\nvalue_hidden = 16\n"
    )
    code = main(["train-policy", "--config", str(cfg), "--out", str(tmp_path)])
    assert code == 0
    checkpoint = tmp_path / "policy_n4.npz"
    assert checkpoint.exists() and (tmp_path / "policy_n4_report.csv").exists()
    capsys.readouterr()

    code = main(
        [
            "plan", "--dataset", str(dataset_dir), "--method", "policy",
            "--policy", str(checkpoint),
        ]
    )
    out = json.loads(capsys.readouterr().out)
    assert code in (0, 1)
    assert out["success"] is (code == 0)


def test_train_policy_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nwarp_speed = 9\n")
    code = main(["train-policy", "--config", str(cfg), "--out", str(tmp_path)])
    assert code == 2
    payload = json.loads(capsys.readouterr().err.strip().removeprefix("error "))
    assert payload["type"] == "ValueError" and "warp_speed" in payload["message"]


def test_train_predictor_writes_sidecar(tmp_path, capsys):
    code = main(
        [
            "train-predictor", "--samples", "400", "--epochs", "1",
            "--eval-samples", "100", "--small", "--seed", "3", "--out", str(tmp_path),
        ]
    )
    assert code == 0
    assert (tmp_path / "predictor.npz").exists()
    meta = json.loads((tmp_path / "predictor.meta.json").read_text())
    assert meta["oracle_variant"] == "kinematic"
    assert 0.0 <= meta["metrics"]["mask_accuracy"] <= 1.0
    assert meta["predictor_config"]["hidden"] == 64


def test_grad_check_passes(capsys):
    assert main(["grad-check", "--seed", "1", "--max-entries", "3"]) == 0
    out = capsys.readouterr().out
    assert out.count(" ok") == 2


def test_ablation_axis_choices_rejected_by_parser(dataset_dir):
    with pytest.raises(SystemExit):
        main(["ablate", "--axis", "nonsense", "--dataset", str(dataset_dir)])
