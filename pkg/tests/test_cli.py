"""Command-line workflow: synth -> pretrain -> render/eval/probe, exit codes."""

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from unipre3d.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from unipre3d.config import default_config, load_config, parse, save_config
from unipre3d.imgio import read_ppm


def tiny_cfg(root: Path):
    c = default_config("object")
    c.backbone.encoder_widths = (8, 16)
    c.backbone.decoder_widths = (16, 8)
    c.fusion.c_adapt = 8
    c.optimizer.batch_size = 2
    c.data.root = str(root / "data")
    c.data.n_samples = 2
    c.data.n_points = 96
    c.data.n_cameras = 12
    c.data.image_size = 24
    c.data.n_gaussians = 60
    c.out_dir = str(root / "run")
    return c


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Workspace with a synthesized dataset and a short pretraining run."""
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_cfg(root)
    cfg_path = root / "cfg.toml"
    save_config(cfg_path, cfg)
    assert main(["synth", "--config", str(cfg_path)]) == EXIT_OK
    assert main(["pretrain", "--config", str(cfg_path), "--max-steps", "3"]) == EXIT_OK
    return {"root": root, "cfg": cfg, "cfg_path": cfg_path,
            "data": Path(cfg.data.root), "run": Path(cfg.out_dir)}


def test_synth_layout_and_manifest(ws):
    data = ws["data"]
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["mode"] == "object"
    assert manifest["n_samples"] == 2
    assert manifest["seeds"] == [0, 1]
    for i in range(2):
        d = data / f"sample_{i:04d}"
        assert (d / "manifest.json").exists()
        assert (d / "points.ply").exists()
        assert (d / "cameras.json").exists()
        assert (d / "img_0000.ppm").exists()


def test_synth_deterministic(ws, tmp_path):
    cfg = load_config(ws["cfg_path"])
    cfg.data.root = str(tmp_path / "data2")
    p2 = tmp_path / "cfg2.toml"
    save_config(p2, cfg)
    assert main(["synth", "--config", str(p2)]) == EXIT_OK
    a = (ws["data"] / "sample_0000" / "img_0003.ppm").read_bytes()
    b = (tmp_path / "data2" / "sample_0000" / "img_0003.ppm").read_bytes()
    assert a == b


def test_synth_refuses_overwrite(ws, capsys):
    assert main(["synth", "--config", str(ws["cfg_path"])]) == EXIT_IO
    assert "--force" in capsys.readouterr().err
    assert main(["synth", "--config", str(ws["cfg_path"]), "--force"]) == EXIT_OK


def test_pretrain_artifacts(ws):
    run = ws["run"]
    lines = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert len(lines) == 3
    assert all(np.isfinite(row["loss"]) for row in lines)
    assert (run / "ckpt_final.json").exists() and (run / "ckpt_final.bin").exists()


def test_render_ppm_and_png(ws, tmp_path):
    ckpt = str(ws["run"] / "ckpt_final")
    sample = str(ws["data"] / "sample_0000")
    out_ppm = tmp_path / "view.ppm"
    assert main(["render", "--checkpoint", ckpt, "--sample", sample,
                 "--view", "2", "--out", str(out_ppm)]) == EXIT_OK
    img = read_ppm(out_ppm)
    assert img.shape == (3, 24, 24)
    assert img.min() >= 0.0 and img.max() <= 1.0

    out_png = tmp_path / "view.png"
    assert main(["render", "--checkpoint", ckpt, "--sample", sample,
                 "--view", "0", "--out", str(out_png)]) == EXIT_OK
    with Image.open(out_png) as im:
        assert im.size == (24, 24) and im.mode == "RGB"


def test_render_view_out_of_range(ws, tmp_path, capsys):
    code = main(["render", "--checkpoint", str(ws["run"] / "ckpt_final"),
                 "--sample", str(ws["data"] / "sample_0000"),
                 "--view", "99", "--out", str(tmp_path / "x.ppm")])
    assert code == EXIT_CONFIG
    assert "out of range" in capsys.readouterr().err


def test_missing_checkpoint_is_io_error(ws, tmp_path):
    code = main(["render", "--checkpoint", str(tmp_path / "nope"),
                 "--sample", str(ws["data"] / "sample_0000"),
                 "--view", "0", "--out", str(tmp_path / "x.ppm")])
    assert code == EXIT_IO


def test_eval_json_schema(ws, capsys):
    code = main(["eval", "--checkpoint", str(ws["run"] / "ckpt_final"),
                 "--dataset", str(ws["data"]), "--json"])
    assert code == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["sanity_identical_db"] == 100.0
    assert len(report["per_sample"]) == 2


def test_eval_table_output(ws, capsys):
    code = main(["eval", "--checkpoint", str(ws["run"] / "ckpt_final"),
                 "--dataset", str(ws["data"])])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "mean psnr" in out and "sanity" in out


def test_probe_reports_paired_accuracies(ws, capsys):
    code = main(["probe", "--checkpoint", str(ws["run"] / "ckpt_final"),
                 "--dataset", str(ws["data"])])
    assert code == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert {"pretrained_acc", "random_acc", "delta", "chance_floor"} <= set(report)
    assert "per_sample" not in report  # summary only on stdout


def test_gradcheck_passes(ws, capsys):
    assert main(["gradcheck", "--n-seeds", "1", "--json"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["ok"] is True
    assert report["decode_worst_ratio"] <= 1.0


def test_config_print_defaults_parses_back(capsys):
    assert main(["config", "--print-defaults", "--mode", "scene"]) == EXIT_OK
    cfg = parse(capsys.readouterr().out)
    assert cfg.mode == "scene"
    assert cfg.fusion.strategy == "point"


def test_invalid_toml_exit_config(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("mode = object\n")
    assert main(["synth", "--config", str(bad)]) == EXIT_CONFIG
    bad.write_text('mode = "object"\n[optimizer]\ntypo_lr = 1.0\n')
    assert main(["synth", "--config", str(bad)]) == EXIT_CONFIG
    assert "typo_lr" in capsys.readouterr().err


def test_missing_dataset_exit_io(ws, tmp_path):
    cfg = load_config(ws["cfg_path"])
    cfg.data.root = str(tmp_path / "missing")
    p = tmp_path / "c.toml"
    save_config(p, cfg)
    assert main(["pretrain", "--config", str(p), "--max-steps", "1"]) == EXIT_IO
