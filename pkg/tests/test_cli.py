import json
from pathlib import Path

import pytest

from hinflow import report
from hinflow.cli import main


@pytest.fixture()
def tiny_config(tmp_path):
    cfg = {
        "run": {
            "task": "place_disc",
            "seed": 3,
            "n_videos": 3,
            "n_demos": 1,
            "video_jitter": 0.15,
            "planner": {"train_steps": 25, "resample": 1},
            "policy": {"pretrain_steps": 25, "batch": 16},
            "online": {"budget": 120},
            "eval": {"cadence": 60, "episodes": 2},
        },
        "paths": {
            "data_dir": str(tmp_path / "data"),
            "checkpoint_dir": str(tmp_path / "ckpt"),
            "report_dir": str(tmp_path / "reports"),
        },
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path, tmp_path


def test_gen_data_and_overwrite_refusal(tiny_config):
    cfg_path, root = tiny_config
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    data = root / "data"
    assert (data / "manifest.json").exists()
    manifest = json.loads((data / "manifest.json").read_text())
    assert len(manifest["files"]["videos"]) == 3
    assert len(manifest["files"]["demos"]) == 1
    # refusal without --overwrite
    assert main(["gen-data", "--config", str(cfg_path)]) == 2
    before = (data / "videos/video_0000.hfc").read_bytes()
    assert main(["gen-data", "--config", str(cfg_path), "--overwrite"]) == 0
    assert (data / "videos/video_0000.hfc").read_bytes() == before


def test_missing_prerequisites_exit_2(tiny_config):
    cfg_path, root = tiny_config
    assert main(["train-planner", "--config", str(cfg_path)]) == 2
    assert main(["train-online", "--config", str(cfg_path)]) == 2
    assert main(["eval", "--config", str(cfg_path), "--policy", str(root / "nope.hfc")]) == 2


def test_unknown_preset_exit_2(tiny_config):
    cfg_path, _ = tiny_config
    assert main(["experiment", "nonsense", "--config", str(cfg_path)]) == 2


def test_bad_config_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"run": {"bogus_key": 1}}))
    assert main(["gen-data", "--config", str(bad)]) == 2


def test_full_staged_pipeline(tiny_config):
    cfg_path, root = tiny_config
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    assert main(["train-planner", "--config", str(cfg_path)]) == 0
    assert (root / "ckpt/planner.hfc").exists()
    assert (root / "ckpt/planner_train.csv").exists()
    assert main(["pretrain-policy", "--config", str(cfg_path)]) == 0
    assert (root / "ckpt/policy_base.hfc").exists()
    assert main(["train-online", "--config", str(cfg_path)]) == 0
    csv_path = root / "reports/hinflow_seed3.csv"
    assert csv_path.exists()
    rows = report.read_csv(csv_path)
    assert rows[0]["env_step"] == "0"
    assert int(rows[-1]["env_step"]) >= 120
    assert (root / "reports/hinflow_seed3.png").exists()
    assert (root / "ckpt/policy_final.hfc").exists()
    # evaluation of the final checkpoint
    assert main([
        "eval", "--config", str(cfg_path),
        "--planner", str(root / "ckpt/planner.hfc"),
        "--policy", str(root / "ckpt/policy_final.hfc"),
        "--episodes", "2",
    ]) == 0


def test_staged_rerun_deterministic(tiny_config):
    cfg_path, root = tiny_config
    for _ in range(2):
        assert main(["gen-data", "--config", str(cfg_path), "--overwrite"]) == 0
        assert main(["train-planner", "--config", str(cfg_path)]) == 0
        assert main(["pretrain-policy", "--config", str(cfg_path)]) == 0
        assert main(["train-online", "--config", str(cfg_path)]) == 0
        csv_text = (root / "reports/hinflow_seed3.csv").read_text()
        stripped = report.strip_wall_clock(csv_text)
        out = root / f"run_{_}.stripped"
        out.write_text(stripped)
    assert (root / "run_0.stripped").read_text() == (root / "run_1.stripped").read_text()
    ck1 = (root / "ckpt/planner.hfc").read_bytes()
    assert main(["train-planner", "--config", str(cfg_path)]) == 0
    assert (root / "ckpt/planner.hfc").read_bytes() == ck1
