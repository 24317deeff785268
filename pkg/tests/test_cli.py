import json
import os
import subprocess
import sys

import numpy as np
import pytest

from perturbscope.cli import build_parser, main
from perturbscope.imaging import load_png, save_png, u8_to_f32
from perturbscope.manifest import RunManifest, verify
from perturbscope.pmap import read_pmap


@pytest.fixture
def base(tmp_path):
    path = tmp_path / "base.png"
    save_png(np.random.default_rng(8).integers(0, 256, size=(32, 32, 3), dtype=np.uint8), path)
    return str(path)


def test_parser_surface():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {"synth", "analyze-pair", "batch", "report", "detect", "purify"}
    batch_flags = {s for a in sub.choices["batch"]._actions for s in a.option_strings}
    for flag in ("--config", "--seed", "--out", "--workers", "--threshold", "--reconstructor",
                 "--window", "--stride", "--overlap"):
        assert flag in batch_flags
    with pytest.raises(SystemExit):
        parser.parse_args(["batch", "--reconstructor", "neural"])
    with pytest.raises(SystemExit):
        parser.parse_args(["batch", "--overlap", "max"])


def test_synth_single_mask_noise(tmp_path, base, capsys):
    out = tmp_path / "s"
    assert main(["synth", "--base", base, "--masks", "uniform", "--noises", "gauss", "--out", str(out)]) == 0
    assert len(os.listdir(out / "images")) == 8
    assert len(os.listdir(out / "deltas")) == 8
    m = RunManifest.read(out)
    assert verify(out, m) == []
    first = m.digests()
    main(["synth", "--base", base, "--masks", "uniform", "--noises", "gauss", "--out", str(out)])
    assert RunManifest.read(out).digests() == first


def test_config_file_with_flag_override(tmp_path, base):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"master_seed": 1, "grid": {"base": base, "masks": ["clouds2"],
                                                          "noises": ["gauss"], "lightness": [0.5]}}))
    main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["synth", "--config", str(cfg), "--seed", "2", "--out", str(tmp_path / "b")])
    a = RunManifest.read(tmp_path / "a")
    b = RunManifest.read(tmp_path / "b")
    assert a.config["master_seed"] == 1 and b.config["master_seed"] == 2
    assert a.digests()["images/clouds2__gauss__L0.50.png"] != b.digests()["images/clouds2__gauss__L0.50.png"]


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"sede": 1}')
    assert main(["synth", "--config", str(cfg)]) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_analyze_pair_missing_file(tmp_path, base, capsys):
    out = tmp_path / "ap"
    code = main(["analyze-pair", base, str(tmp_path / "missing.png"), "--out", str(out)])
    assert code != 0
    assert "missing.png" in capsys.readouterr().err
    assert not (out / "manifest.json").exists()


def test_analyze_pair_outputs(tmp_path, base, capsys):
    out = tmp_path / "ap"
    pert = tmp_path / "p.png"
    img = load_png(base)
    save_png(np.minimum(img.astype(int) + 4, 255).astype(np.uint8), pert)
    code = main(["analyze-pair", base, str(pert), "--out", str(out), "--window", "8", "--stride", "4",
                 "--overlap", "average", "--reconstructor", "paired", "--threshold", "0.5"])
    assert code == 0
    result = json.loads(capsys.readouterr().out)
    assert result["threshold"] == 0.5 and result["reconstructor_id"] == "paired"
    names = set(os.listdir(out / "p"))
    assert {"occlusion.pmap", "occlusion.json", "spectral_diff.pmap", "spectral_diff.png",
            "radial_clean.csv", "radial_perturbed.csv", "delta_hat.pmap", "detection.json"} <= names
    side = json.loads((out / "p" / "occlusion.json").read_text())
    assert side["overlap"] == "average" and side["window"] == 8
    assert verify(out, RunManifest.read(out)) == []


def test_batch_and_report(tmp_path, base, monkeypatch):
    monkeypatch.setenv("PERTURBSCOPE_WORKERS", "2")
    out = tmp_path / "b"
    code = main(["batch", "--base", base, "--masks", "uniform", "--noises", "gauss,gauss-2x",
                 "--lightness", "0.3,0.7", "--window", "8", "--stride", "8", "--threshold", "0.07",
                 "--out", str(out)])
    assert code == 0
    assert RunManifest.read(out).config["workers"] == 2
    assert main(["report", str(out)]) == 0
    assert (out / "report" / "report.html").exists()
    assert verify(out, RunManifest.read(out)) == []


def test_batch_failure_exit_code(tmp_path):
    pairs = tmp_path / "pairs"
    save_png(np.zeros((16, 16, 3), dtype=np.uint8), pairs / "clean" / "a.png")
    save_png(np.zeros((8, 8, 3), dtype=np.uint8), pairs / "tool" / "a.png")
    assert main(["batch", "--pairs", str(pairs), "--out", str(tmp_path / "r"), "--window", "4",
                 "--stride", "4"]) == 1


def test_batch_no_samples(tmp_path, capsys):
    (tmp_path / "pairs" / "clean").mkdir(parents=True)
    assert main(["batch", "--pairs", str(tmp_path / "pairs"), "--out", str(tmp_path / "r")]) == 2
    assert "no samples" in capsys.readouterr().err


def test_report_dangling_exit_code(tmp_path, capsys):
    (tmp_path / "x.txt").write_text("x")
    m = RunManifest({})
    m.add("s", [], "x.txt")
    m.finalize(tmp_path)
    m.write(tmp_path)
    os.remove(tmp_path / "x.txt")
    assert main(["report", str(tmp_path)]) == 2
    assert "missing: x.txt" in capsys.readouterr().err


def test_detect_and_purify_with_stub(tmp_path, base, stub_dir, capsys):
    rec = f"external:{sys.executable} {stub_dir['echo']}"
    assert main(["detect", base, "--reconstructor", rec, "--out", str(tmp_path / "d")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["reconstructor_id"] == "external" and result["threshold"] == 0.07
    delta = read_pmap(tmp_path / "d" / "delta_hat.pmap")
    assert main(["purify", base, "--reconstructor", rec, "--out", str(tmp_path / "p")]) == 0
    out_path = capsys.readouterr().out.strip()
    cleaned = u8_to_f32(load_png(out_path))
    expect = np.clip(u8_to_f32(load_png(base)) - delta[..., None], 0, 1)
    assert np.abs(cleaned - expect).max() <= 0.5 / 255 + 1e-9


def test_detect_truncated_stub_fails(tmp_path, base, stub_dir, capsys):
    rec = f"external:{sys.executable} {stub_dir['truncated']}"
    assert main(["detect", base, "--reconstructor", rec]) == 2
    assert "adapter" in capsys.readouterr().err


def test_purify_paired_recovers_clean(tmp_path, base, capsys):
    pert = tmp_path / "p.png"
    save_png(np.minimum(load_png(base).astype(int) + 9, 255).astype(np.uint8), pert)
    assert main(["purify", str(pert), "--clean", base, "--out", str(tmp_path)]) == 0
    assert np.array_equal(load_png(capsys.readouterr().out.strip()), load_png(base))


def test_detect_needs_a_reconstructor(base, capsys):
    assert main(["detect", base]) == 2
    assert main(["detect", base, "--reconstructor", "paired"]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "perturbscope", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "perturbscope" in out.stdout
