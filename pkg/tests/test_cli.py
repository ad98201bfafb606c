import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from age_kit.cli import main
from age_kit.vit import file_sha256


@pytest.fixture
def out(tmp_path):
    return tmp_path / "out"


def run(*argv):
    return main([str(a) for a in argv])


def pipeline_through_masks(cfg, out):
    assert run("pretrain", "--config", cfg, "--output", out) == 0
    assert run("select-head", "--config", cfg, "--output", out) == 0
    assert run("build-masks", "--config", cfg, "--output", out) == 0


def test_help_via_module():
    res = subprocess.run([sys.executable, "-m", "age_kit.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("init", "pretrain", "select-head", "build-masks", "augment", "train", "sweep", "report"):
        assert cmd in res.stdout


def test_init_template(tmp_path, capsys):
    assert run("init", "--profile", "quick") == 0
    assert "learning_rate" in capsys.readouterr().out
    assert run("init", tmp_path / "c.yaml", "--phantom-dir", tmp_path / "ph") == 0
    assert (tmp_path / "c.yaml").is_file()
    rows = list(csv.DictReader((tmp_path / "ph" / "manifest.csv").open()))
    assert len(rows) == 1000 and {r["split"] for r in rows} == {"train", "val", "test"}


def test_full_pipeline(tiny_config, out, capsys):
    pipeline_through_masks(tiny_config, out)
    head = json.loads((out / "heads" / "head_selection.json").read_text())
    assert len(head["per_head"]) == 6 and head["sample_size"] == 10
    assert len((out / "heads" / "head_selection.txt").read_text().splitlines()) >= 8

    index = json.loads((out / "masks" / "index.json").read_text())
    assert len(index["ids"]) == 40
    assert index["checkpoint_sha256"] == file_sha256(out / "pretrain" / "checkpoint.safetensors")
    for sid in index["ids"]:
        with Image.open(out / "masks" / f"{sid}.png") as im:
            assert np.asarray(im).max() == 255  # never an all-erased mask

    assert run("sweep", "--config", tiny_config, "--output", out) == 0
    rows = list(csv.DictReader((out / "results.csv").open()))
    assert len(rows) == 3 * 2
    capsys.readouterr()
    assert run("report", "--config", tiny_config, "--output", out, "--panels", 2) == 0
    text = capsys.readouterr().out
    assert "No erasing" in text and "AGE@0.6 vs none" in text
    panels = sorted((out / "report" / "panels").glob("*.png"))
    assert len(panels) == 2
    with Image.open(panels[0]) as im:
        w, h = im.size
    assert w > 3.5 * h  # four tiles side by side

    assert run("augment", "--config", tiny_config, "--output", out, "--count", 1) == 0
    assert len(list((out / "augment").glob("*.png"))) == 1


def test_sweep_resume_skips_completed(tiny_config, out):
    pipeline_through_masks(tiny_config, out)
    assert run("train", "--config", tiny_config, "--output", out, "--mode", "none", "--seed", 0) == 0
    done = out / "runs" / "none" / "seed_0" / "result.json"
    stamp = done.stat().st_mtime_ns
    assert run("sweep", "--config", tiny_config, "--output", out) == 0
    assert done.stat().st_mtime_ns == stamp
    assert run("sweep", "--config", tiny_config, "--output", out, "--no-resume") == 0
    assert done.stat().st_mtime_ns != stamp


def test_head_override_is_one_based(tiny_config, out):
    assert run("pretrain", "--config", tiny_config, "--output", out) == 0
    assert run("build-masks", "--config", tiny_config, "--output", out, "--head", 6) == 0
    assert json.loads((out / "masks" / "index.json").read_text())["source_head"] == 5
    assert run("build-masks", "--config", tiny_config, "--output", out, "--head", 7) == 2


def test_pretrain_rerun_same_hash(tiny_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("pretrain", "--config", tiny_config, "--output", a) == 0
    assert run("pretrain", "--config", tiny_config, "--output", b) == 0
    assert file_sha256(a / "pretrain" / "checkpoint.safetensors") == file_sha256(b / "pretrain" / "checkpoint.safetensors")


@pytest.mark.parametrize("argv", [
    ["select-head"],                        # no checkpoint yet
    ["build-masks"],
    ["sweep"],
    ["report"],                             # empty results dir
    ["train", "--mode", "AGE"],
])
def test_user_errors_exit_2(tiny_config, out, argv, capsys):
    assert run(*argv, "--config", tiny_config, "--output", out) == 2
    assert "age-kit: error:" in capsys.readouterr().err


def test_age_train_without_masks(tiny_config, out, capsys):
    assert run("pretrain", "--config", tiny_config, "--output", out) == 0
    assert run("train", "--config", tiny_config, "--output", out, "--mode", "AGE") == 2
    assert "mask" in capsys.readouterr().err


def test_missing_dataset_manifest(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"dataset: {{source: manifest, manifest: {tmp_path / 'none.csv'}}}\n")
    assert run("pretrain", "--config", cfg, "--output", tmp_path / "o") == 2
    assert "manifest not found" in capsys.readouterr().err


def test_bad_config_exit_2(tmp_path):
    (tmp_path / "c.yaml").write_text("vit: {depht: 2}\n")
    assert run("pretrain", "--config", tmp_path / "c.yaml") == 2


def test_output_env(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv("AGE_KIT_OUTPUT", str(tmp_path / "root"))
    assert run("pretrain", "--config", tiny_config) == 0
    assert (tmp_path / "root" / "tiny-out" / "pretrain" / "checkpoint.safetensors").is_file()


def test_stale_masks_rejected(tiny_config, out, capsys):
    pipeline_through_masks(tiny_config, out)
    assert run("pretrain", "--config", tiny_config, "--output", out, "--seed", 9) == 0
    assert run("train", "--config", tiny_config, "--output", out, "--mode", "AGE", "--p", 0.6) == 2
    assert "different checkpoint" in capsys.readouterr().err
