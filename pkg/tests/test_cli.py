import io
import re
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from multigrid_sr.cli import run

NATURAL = Path(__file__).parent / "data" / "natural.png"
ERROR_LINE = re.compile(r"^error: [a-z-]+: .+$")


def cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def weights(tmp_path):
    path = tmp_path / "g.wts"
    code, out, _ = cli("init", "--levels", 2, "--schedule", "6,4", "--seed", 1, path)
    assert code == 0 and "parameters" in out
    return path


@pytest.fixture
def lr_png(tmp_path, rng):
    path = tmp_path / "lr.png"
    Image.fromarray(rng.integers(0, 256, (6, 7, 3), dtype=np.uint8)).save(path)
    return path


def test_describe():
    code, out, _ = cli("describe", "--mu", 2, "--levels", 5, "--brief")
    assert code == 0
    assert "upscale_modules: 30" in out and "downscale_modules: 30" in out
    assert "analysis_modules: 5" in out and "synthesis_modules: 1" in out
    assert "macs" in out


def test_describe_full_listing():
    code, out, _ = cli("describe", "--levels", 2, "--schedule", "4,4")
    assert code == 0 and "Upscale/2/1" in out


def test_upscale(weights, lr_png, tmp_path):
    dst = tmp_path / "up.png"
    code, out, _ = cli("upscale", lr_png, dst, "--weights", weights, "--patch", 48, "--stride", 24,
                       "--noise-amplitude", 1, "--seed", 3)
    assert code == 0
    assert Image.open(dst).size == (7 * 16, 6 * 16)


def test_upscale_ensemble(weights, lr_png, tmp_path):
    dst = tmp_path / "up.png"
    code, _, _ = cli("upscale", lr_png, dst, "--ensemble", f"{weights},{weights}", "--patch", 48, "--stride", 48)
    assert code == 0 and dst.exists()


def test_dfv(weights, lr_png, tmp_path):
    dst = tmp_path / "dfv.png"
    code, out, _ = cli("dfv", lr_png, dst, "--weights", weights, "--row", 40, "--col", 50)
    assert code == 0
    img = np.asarray(Image.open(dst))
    assert img.shape == (96, 112, 3) and img.std() > 0


def test_dfv_out_of_bounds(weights, lr_png, tmp_path):
    code, _, err = cli("dfv", lr_png, tmp_path / "d.png", "--weights", weights, "--row", 500)
    assert code == 1 and err.startswith("error: bounds:")


def test_prep_and_train(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    Image.open(NATURAL).save(src / "n.png")
    code, out, _ = cli("prep", src, tmp_path / "data", "--prep-patch", 128, "--prep-stride", 128)
    assert code == 0 and "patches: 4" in out
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("levels = 2\nschedule = 6,4\nbatch = 1\ntrain_patch = 64\nval_patch = 64\n"
                   "epochs = 1\nsteps_per_epoch = 2\n")
    code, out, err = cli("train", "fidelity", "--config", cfg, "--data", tmp_path / "data",
                         "--out-dir", tmp_path / "run")
    assert code == 0, err
    assert "checkpoint:" in out and (tmp_path / "run" / "best" / "generator.wts").exists()


def test_eval(weights, tmp_path):
    imgs = tmp_path / "hr"
    imgs.mkdir()
    Image.open(NATURAL).crop((0, 0, 96, 80)).save(imgs / "x.png")
    code, out, _ = cli("eval", imgs, "--weights", weights, "--patch", 48, "--stride", 48, "--metric", "tv")
    assert code == 0
    last = out.strip().splitlines()[-1].split("\t")
    assert last[0] == "mean" and last[1] == "val_l2" and float(last[2]) >= 0


@pytest.mark.parametrize(
    "argv,code,tag",
    [
        (["describe", "--mu", "x"], 2, "usage"),
        (["frobnicate"], 2, "usage"),
        (["describe", "--levels", "3", "--schedule", "4,4"], 1, "config"),
        (["upscale", "nope.png", "out.png", "--weights", "nope.wts"], 1, "missing-file"),
        (["upscale", "a.png", "b.png"], 1, "config"),
    ],
)
def test_errors_are_one_line(argv, code, tag):
    got, _, err = cli(*argv)
    assert got == code
    lines = err.strip().splitlines()
    assert len(lines) == 1 and ERROR_LINE.match(lines[0]) and lines[0].startswith(f"error: {tag}:")


def test_corrupt_weights(weights, lr_png, tmp_path):
    raw = bytearray(weights.read_bytes())
    raw[1] ^= 0xFF
    weights.write_bytes(bytes(raw))
    code, _, err = cli("upscale", lr_png, tmp_path / "o.png", "--weights", weights)
    assert code == 1 and err.startswith("error: bad-magic:")


def test_bad_noise_amplitude(weights, lr_png, tmp_path):
    code, _, err = cli("upscale", lr_png, tmp_path / "o.png", "--weights", weights, "--noise-amplitude", 2)
    assert code == 1 and "noise-amplitude" in err
