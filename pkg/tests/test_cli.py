import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from multidistill.cli import load_run_config, main
from multidistill.errors import ConfigError

ROOT = Path(__file__).resolve().parents[1]


def tiny_run_config(tmp_path, **overrides):
    cfg = {
        "config_version": 1,
        "output": str(tmp_path / "run"),
        "backbone": {"image_size": 8, "patch_size": 2, "embed_dim": 16, "depth": 3, "heads": 2,
                     "num_register_tokens": 1},
        "train": {"batch_size": 8, "base_lr": 2e-3, "epochs": 2, "warmup_epochs": 1, "seed": 0},
        "translator_kind": "cnn",
        "teachers": [{"name": "lin", "grid_side": 4, "channels": 6, "kind": "patch-linear", "seed": 1},
                     {"name": "blur", "grid_side": 4, "channels": 5, "kind": "lowpass", "seed": 2}],
        "data": {"n": 24, "seed": 0},
        "cache": {"shard_size": 10},
        "analysis": {"bin_count": 20, "sample_fraction": 0.5, "norm_map_images": 2},
        "probe": {"n": 16, "steps": 3, "seeds": [0], "kinds": ["vector"]},
    }
    cfg.update(overrides)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_pipeline_end_to_end(tmp_path, capsys):
    cfg = tiny_run_config(tmp_path)
    run = tmp_path / "run"
    assert main(["cache", "--config", str(cfg)]) == 0
    assert (run / "cache" / "manifest.json").exists()
    assert main(["train", "--config", str(cfg)]) == 0
    ckpt = run / "train" / "final.ckpt"
    assert ckpt.exists() and (run / "train" / "metrics.jsonl").exists()
    assert main(["analyze", "--config", str(cfg), "--checkpoint", str(ckpt), "--plots"]) == 0
    for name in ("entropy.json", "pca.json", "cosine.json", "norm_maps.json", "distributions.png", "norm_maps.png"):
        assert (run / "analysis" / name).exists(), name
    entropy = json.loads((run / "analysis" / "entropy.json").read_text())
    assert entropy["bin_count"] == 20 and entropy["num_norms"] == 12 * 16
    maps = json.loads((run / "analysis" / "norm_maps.json").read_text())
    assert len(maps["maps"]) == 2 and len(maps["maps"][0]) == 4
    assert main(["probe", "--config", str(cfg), "--checkpoint", str(ckpt)]) == 0
    rows = json.loads((run / "probe" / "probe_report.json").read_text())["rows"]
    assert {r["encoder"] for r in rows} == {"distilled", "random_init"}


def test_rerun_is_bitwise_reproducible(tmp_path):
    cfg = tiny_run_config(tmp_path)
    run = tmp_path / "run"
    main(["cache", "--config", str(cfg)])
    main(["train", "--config", str(cfg)])
    first = [(run / "cache" / "manifest.json").read_bytes(), (run / "train" / "final.ckpt").read_bytes()]
    main(["cache", "--config", str(cfg)])
    main(["train", "--config", str(cfg)])
    assert first == [(run / "cache" / "manifest.json").read_bytes(), (run / "train" / "final.ckpt").read_bytes()]


def test_train_without_cache(tmp_path, capsys):
    cfg = tiny_run_config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: CACHE_MISSING:")
    assert "cache command" in err[0]


def test_fingerprint_mismatch_refused(tmp_path, capsys):
    cfg = tiny_run_config(tmp_path)
    main(["cache", "--config", str(cfg)])
    assert main(["train", "--config", str(cfg), "--set", "data.seed=7"]) == 2
    assert capsys.readouterr().err.startswith("error: FINGERPRINT_MISMATCH:")


def test_ablate_two_cells(tmp_path, capsys):
    cfg = tiny_run_config(tmp_path)
    main(["cache", "--config", str(cfg)])
    grid = tmp_path / "grid.yaml"
    grid.write_text(yaml.safe_dump({"cells": [{"name": "cos", "delta": {"train.loss.variant": "cos_l1"}},
                                              {"name": "mse", "delta": {"train.loss.variant": "mse"}}]}))
    assert main(["ablate", "--config", str(cfg), "--grid", str(grid)]) == 0
    report = json.loads((tmp_path / "run" / "ablation" / "ablation_report.json").read_text())
    assert [r["name"] for r in report["rows"]] == ["cos", "mse"]
    assert all(r["status"] == "ok" for r in report["rows"])
    assert "| mse | ok |" in capsys.readouterr().out


def test_config_errors(tmp_path, capsys):
    cfg = tiny_run_config(tmp_path, config_version=2)
    assert main(["cache", "--config", str(cfg)]) == 2
    assert capsys.readouterr().err.startswith("error: CONFIG_INVALID:")
    with pytest.raises(ConfigError, match="undeclared"):
        load_run_config(tiny_run_config(tmp_path), ["train.teachers=[ghost]"])
    with pytest.raises(ConfigError):
        load_run_config(tiny_run_config(tmp_path), ["backbone.heads=3"])
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "missing.yaml")
    assert main(["analyze", "--config", str(tiny_run_config(tmp_path)), "--checkpoint", "nope.ckpt"]) == 2


def test_override_parsing(tmp_path):
    cfg = load_run_config(tiny_run_config(tmp_path), ["train.base_lr=1e-4", "translator_kind=linear"])
    assert cfg.train_config().base_lr == 1e-4 and cfg.translator_kind == "linear"


def test_real_teacher_stub_reports_cleanly(tmp_path, capsys):
    cfg = tiny_run_config(tmp_path, teachers=[{"name": "dino", "grid_side": 4, "channels": 8, "real": "dinov2"}])
    assert main(["cache", "--config", str(cfg)]) == 2
    assert capsys.readouterr().err.startswith("error: ADAPTER_UNAVAILABLE:")


def test_shipped_configs_parse():
    cfg = load_run_config(ROOT / "configs" / "desk.yaml")
    assert cfg.backbone_config().grid_side == 8
    from multidistill.cli import load_grid

    assert len(load_grid(ROOT / "configs" / "ablation_grid.yaml")) == 8


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "multidistill.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("cache", "train", "ablate", "analyze", "probe"):
        assert cmd in out.stdout
