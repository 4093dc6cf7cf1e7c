"""Operator-surface behavior: flags, file formats, exit codes, determinism."""

import json
import os

import numpy as np
import pytest

from multilane.cli import build_parser, main
from multilane.protocol import load_dataset


def run_cli(*argv):
    return main(list(argv))


def tiny_config(tmp_path, out_name="run", **train_overrides):
    cfg = {
        "model": {"image_size": 16, "patch_size": 8, "channels": 2, "depth": 2,
                  "dim": 16, "heads": 2, "mlp_ratio": 2, "prompted_layers": [1]},
        "train": {"lr_init": 0.01, "epochs": 1, "batch_size": 8,
                  "num_selectors": 2, "prompt_len": 2, "seed": 3,
                  **train_overrides},
        "data": {"generate": {"seed": 5, "classes": 4, "train_images": 16,
                              "test_images": 10, "max_objects": 2}},
        "benchmark": {"base": 0, "increment": 2, "class_order_seed": 1},
        "backbone_seed": 7,
        "out": str(tmp_path / out_name),
    }
    path = tmp_path / f"{out_name}_config.json"
    path.write_text(json.dumps(cfg))
    return path, cfg


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def test_gen_data_idempotent(tmp_path):
    args = ["gen-data", "--seed", "4", "--classes", "6", "--images", "20",
            "--tail", "0.5", "--image-size", "16", "--channels", "2"]
    assert run_cli(*args, "--out", str(tmp_path / "a")) == 0
    assert run_cli(*args, "--out", str(tmp_path / "b")) == 0
    assert (tmp_path / "a.mlta").read_bytes() == (tmp_path / "b.mlta").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_gen_data_uniform_histogram(tmp_path):
    assert run_cli("gen-data", "--seed", "1", "--classes", "8", "--images", "2000",
                   "--tail", "0", "--image-size", "16", "--channels", "1",
                   "--out", str(tmp_path / "u")) == 0
    meta = json.loads((tmp_path / "u.json").read_text())
    counts = np.array(meta["class_counts"], dtype=float)
    assert counts.std() / counts.mean() < 0.15


def test_gen_data_unwritable_path_is_io_error(tmp_path):
    code = run_cli("gen-data", "--seed", "1", "--classes", "4", "--images", "4",
                   "--image-size", "16", "--out", str(tmp_path / "nodir" / "x"))
    assert code == 4


def test_gen_data_bad_geometry_is_config_error(tmp_path):
    code = run_cli("gen-data", "--seed", "1", "--classes", "4", "--images", "4",
                   "--image-size", "17", "--out", str(tmp_path / "x"))
    assert code == 2


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_writes_all_outputs(tmp_path, capsys):
    cfg_path, cfg = tiny_config(tmp_path)
    assert run_cli("train", "--config", str(cfg_path)) == 0
    out = tmp_path / "run"
    for name in ("effective_config.json", "train_log.jsonl", "reports.json",
                 "reports.csv", "checkpoint.mlta", "checkpoint.json"):
        assert (out / name).exists(), name
    csv_lines = (out / "reports.csv").read_text().strip().split("\n")
    assert len(csv_lines) == 1 + 2  # header + one row per task
    reports = json.loads((out / "reports.json").read_text())
    assert len(reports["steps"]) == 2
    assert 0.0 <= reports["final_map"] <= 1.0
    for line in (out / "train_log.jsonl").read_text().strip().split("\n"):
        entry = json.loads(line)
        assert set(entry) == {"step", "task", "loss", "lr"}


def test_train_ablation_same_schema(tmp_path):
    cfg_path, _ = tiny_config(tmp_path, out_name="qk")
    assert run_cli("train", "--config", str(cfg_path), "--ablate", "querykey") == 0
    out = tmp_path / "qk"
    names = sorted(p.name for p in out.iterdir())
    assert names == ["checkpoint.json", "checkpoint.mlta", "effective_config.json",
                     "reports.csv", "reports.json", "train_log.jsonl"]
    eff = json.loads((out / "effective_config.json").read_text())
    assert eff["train"]["querykey"] is True


def test_train_bad_config_is_exit_2(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"data": {}, "benchmark": {}}))
    assert run_cli("train", "--config", str(path)) == 2
    path.write_text("{not json")
    assert run_cli("train", "--config", str(path)) == 2
    # field-level: wrong geometry
    cfg_path, cfg = tiny_config(tmp_path, out_name="geo")
    raw = json.loads(cfg_path.read_text())
    raw["model"]["image_size"] = 17
    cfg_path.write_text(json.dumps(raw))
    assert run_cli("train", "--config", str(cfg_path)) == 2


def test_train_deterministic_outputs(tmp_path):
    cfg_path, _ = tiny_config(tmp_path, out_name="d1")
    run_cli("train", "--config", str(cfg_path))
    cfg_path2, _ = tiny_config(tmp_path, out_name="d2")
    run_cli("train", "--config", str(cfg_path2), "--out", str(tmp_path / "d2"))
    a, b = tmp_path / "d1", tmp_path / "d2"
    for name in ("checkpoint.mlta", "train_log.jsonl", "reports.json", "reports.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


# ---------------------------------------------------------------------------
# macs
# ---------------------------------------------------------------------------

def test_macs_vitb16_values(tmp_path, capsys):
    assert run_cli("macs", "--tasks", "10", "--selectors", "20", "--prompts", "20",
                   "--csv", str(tmp_path / "t.csv")) == 0
    out = capsys.readouterr().out
    lines = (tmp_path / "t.csv").read_text().strip().split("\n")
    rows = {parts[0]: parts for parts in (l.split(",") for l in lines[1:])}
    assert abs(float(rows["backbone-only"][2]) - 16.9) / 16.9 < 0.02
    assert abs(float(rows["naive-pathways"][2]) - 168.7) / 168.7 < 0.02
    assert abs(float(rows["summarized-pathways"][2]) - 34.7) / 34.7 < 0.02
    assert "backbone-only" in out and "GMACs" in out


def test_macs_one_selector(capsys):
    assert run_cli("macs", "--tasks", "10", "--selectors", "1", "--prompts", "20") == 0
    out = capsys.readouterr().out
    row = [l for l in out.splitlines() if l.startswith("summarized-pathways,")]
    assert abs(float(row[0].split(",")[2]) - 18.6) / 18.6 < 0.02


def test_macs_bad_geometry_exit_2():
    assert run_cli("macs", "--image", "225") == 2


# ---------------------------------------------------------------------------
# heatmap and eval
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg_path, cfg = tiny_config(tmp, out_name="run")
    assert run_cli("train", "--config", str(cfg_path)) == 0
    data_prefix = str(tmp / "data")
    assert run_cli("gen-data", "--seed", "5", "--classes", "4", "--images", "10",
                   "--image-size", "16", "--channels", "2", "--max-objects", "2",
                   "--out", data_prefix) == 0
    return tmp / "run", data_prefix


def test_heatmap_formats(trained_run, tmp_path):
    out_dir, data = trained_run
    prefix = str(tmp_path / "hm")
    assert run_cli("heatmap", "--checkpoint", str(out_dir / "checkpoint"),
                   "--data", data, "--image-index", "0", "--task", "1",
                   "--layer", "2", "--out", prefix) == 0
    rows = [list(map(float, l.split(","))) for l in
            open(prefix + ".csv").read().strip().split("\n")]
    arr = np.array(rows)
    assert arr.shape == (2, 5)  # selectors x (L+1)
    assert np.allclose(arr.sum(axis=1), 1.0, atol=1e-5)
    pgm = open(prefix + ".pgm", "rb").read()
    assert pgm.startswith(b"P5\n32 32\n255\n")  # grid 2 x upscale 16
    assert len(pgm) == len(b"P5\n32 32\n255\n") + 32 * 32


def test_heatmap_out_of_range_exit_2(trained_run, tmp_path):
    out_dir, data = trained_run
    base = ["heatmap", "--checkpoint", str(out_dir / "checkpoint"), "--data", data,
            "--out", str(tmp_path / "x")]
    assert run_cli(*base, "--image-index", "99") == 2
    assert run_cli(*base, "--task", "9") == 2
    assert run_cli(*base, "--layer", "9") == 2


def test_eval_reproduces_training_report(trained_run, tmp_path, capsys):
    out_dir, _ = trained_run
    reports = json.loads((out_dir / "reports.json").read_text())
    final = reports["steps"][-1]
    # the training config generates test data internally; regenerate the same
    from multilane.protocol import save_dataset, synth_generate
    test_ds = synth_generate(seed=6, num_images=10, num_classes=4, max_objects=2,
                             tail_exponent=0.0, image_size=16, cell=8, channels=2,
                             noise=0.02, stamp_seed=5)
    prefix = str(tmp_path / "testdata")
    save_dataset(prefix, test_ds)
    assert run_cli("eval", "--checkpoint", str(out_dir / "checkpoint"),
                   "--data", prefix, "--out", str(tmp_path / "ev")) == 0
    got = json.loads(capsys.readouterr().out)
    assert got["map"] == final["map"]
    assert got["cf1"] == final["cf1"]
    assert got["of1"] == final["of1"]


def test_eval_cil_mode(trained_run, tmp_path, capsys):
    out_dir, data = trained_run
    assert run_cli("eval", "--checkpoint", str(out_dir / "checkpoint"),
                   "--data", data, "--cil") == 0
    got = json.loads(capsys.readouterr().out)
    assert got["cil_acc"] is not None
    assert 0.0 <= got["cil_acc"] <= 1.0


def test_eval_class_mismatch_exit_3(trained_run, tmp_path):
    out_dir, _ = trained_run
    assert run_cli("gen-data", "--seed", "1", "--classes", "2", "--images", "6",
                   "--image-size", "16", "--channels", "2", "--max-objects", "2",
                   "--out", str(tmp_path / "small")) == 0
    assert run_cli("eval", "--checkpoint", str(out_dir / "checkpoint"),
                   "--data", str(tmp_path / "small")) == 3


# ---------------------------------------------------------------------------
# help
# ---------------------------------------------------------------------------

def test_help_lists_every_flag_with_default():
    parser = build_parser()
    sub = next(a for a in parser._actions
               if isinstance(a, __import__("argparse")._SubParsersAction))
    expected_flags = {
        "gen-data": ["--seed", "--classes", "--images", "--tail", "--max-objects",
                     "--image-size", "--cell", "--channels", "--noise", "--sign-flip",
                     "--copies", "--distractor-prob", "--out"],
        "train": ["--config", "--seed", "--epochs", "--out", "--ablate"],
        "macs": ["--depth", "--dim", "--heads", "--ratio", "--image", "--patch",
                 "--tasks", "--selectors", "--prompts", "--classes-per-task", "--csv"],
        "heatmap": ["--checkpoint", "--data", "--image-index", "--task", "--layer", "--out"],
        "eval": ["--checkpoint", "--data", "--cil", "--out"],
    }
    for cmd, flags in expected_flags.items():
        text = sub.choices[cmd].format_help()
        for flag in flags:
            assert flag in text, f"{cmd} missing {flag}"
        assert "default" in text
