import numpy as np
import pytest
from PIL import Image
from scipy.stats import chisquare

from multigrid_sr.data import (
    Manifest,
    PatchFolderLayout,
    Sampler,
    center_patch,
    degrade,
    load_layout,
    prep_dataset,
    reassemble,
    sample_batch,
)
from multigrid_sr.imageio import read_uint8, to_uint8, write_image
from multigrid_sr.resample import downscale, pre_upscale


def save(path, arr):
    Image.fromarray(arr).save(path)


@pytest.fixture
def corpus(tmp_path, rng):
    src = tmp_path / "src"
    src.mkdir()
    images = {
        "a": rng.integers(0, 256, (100, 100, 3), dtype=np.uint8),
        "b": rng.integers(0, 256, (64, 64, 3), dtype=np.uint8),
        "c": rng.integers(0, 256, (160, 96, 3), dtype=np.uint8),
    }
    for name, arr in images.items():
        save(src / f"{name}.png", arr)
    return src, images


def test_grid_and_counts(corpus, tmp_path):
    src, images = corpus
    manifest = prep_dataset(src, tmp_path / "out", 64, 36)
    counts = {e.name: e.count for e in manifest.entries}
    assert counts["a"] == 4  # origins {0, 36} on both axes
    assert counts["b"] == 1
    names = sorted(p.name for p in (tmp_path / "out" / "a").iterdir())
    assert names == ["r00000_c00000.png", "r00000_c00036.png", "r00036_c00000.png", "r00036_c00036.png"]


def test_exact_size_is_byte_identical(corpus, tmp_path):
    src, images = corpus
    prep_dataset(src, tmp_path / "out", 64, 36)
    assert np.array_equal(read_uint8(tmp_path / "out" / "b" / "r00000_c00000.png"), images["b"])


def test_reassembly_round_trip(corpus, tmp_path):
    src, images = corpus
    prep_dataset(src, tmp_path / "out", 32, 32)
    layout = load_layout(tmp_path / "out")
    assert np.array_equal(reassemble(layout, "c"), images["c"])
    assert np.array_equal(reassemble(layout, "a")[:96, :96], images["a"][:96, :96])


def test_small_and_broken_images_reported(corpus, tmp_path):
    src, _ = corpus
    save(src / "tiny.png", np.zeros((10, 10, 3), np.uint8))
    (src / "broken.png").write_bytes(b"not a png")
    manifest = prep_dataset(src, tmp_path / "out", 64, 32, workers=2)
    assert [n for n, _ in manifest.skipped] == ["tiny"]
    assert [n for n, _ in manifest.errors] == ["broken"]
    again = Manifest.read(tmp_path / "out" / "manifest.txt")
    assert again == manifest


def test_manifest_mismatch_detected(corpus, tmp_path):
    src, _ = corpus
    prep_dataset(src, tmp_path / "out", 64, 36)
    (tmp_path / "out" / "a" / "r00000_c00000.png").unlink()
    with pytest.raises(ValueError):
        load_layout(tmp_path / "out")


def test_bad_stride(corpus, tmp_path):
    with pytest.raises(ValueError):
        prep_dataset(corpus[0], tmp_path / "out", 64, 65)


def test_stage_one_uniform_over_images(corpus, tmp_path):
    src, _ = corpus
    prep_dataset(src, tmp_path / "out", 64, 16)
    layout = load_layout(tmp_path / "out")
    counts = [e.count for e in layout.manifest.entries]
    assert len(set(counts)) == 3  # unequal patch counts
    sampler = Sampler(layout, seed=0)
    hits = np.bincount([sampler.draw(64)[0] for _ in range(10_000)], minlength=3)
    assert chisquare(hits).pvalue > 0.01


def test_stage_two_uniform_within_image(corpus, tmp_path):
    src, _ = corpus
    prep_dataset(src, tmp_path / "out", 64, 16)
    layout = load_layout(tmp_path / "out")
    sampler = Sampler(layout, seed=1)
    a = layout.images.index("a")
    files = [j for i, j, _ in (sampler.draw(64) for _ in range(9000)) if i == a]
    hits = np.bincount(files, minlength=len(layout.files["a"]))
    assert chisquare(hits).pvalue > 0.01


def test_sample_batch(corpus, tmp_path):
    src, _ = corpus
    prep_dataset(src, tmp_path / "out", 96, 32)
    layout = load_layout(tmp_path / "out")
    lr, hr = sample_batch(layout, 3, 64, seed=4)
    lr2, hr2 = sample_batch(layout, 3, 64, seed=4)
    assert hr.shape == lr.shape == (3, 3, 64, 64)
    assert np.array_equal(hr, hr2) and np.array_equal(lr, lr2)
    np.testing.assert_allclose(lr, pre_upscale(downscale(hr, 16), 16), atol=1e-6)
    assert not np.array_equal(hr, sample_batch(layout, 3, 64, seed=5)[1])


def test_sample_limits(corpus, tmp_path):
    src, _ = corpus
    prep_dataset(src, tmp_path / "out", 64, 32)
    layout = load_layout(tmp_path / "out")
    with pytest.raises(ValueError):
        sample_batch(layout, 1, 96, seed=0)
    with pytest.raises(ValueError):
        sample_batch(layout, 1, 32, seed=0)
    with pytest.raises(ValueError):
        Sampler(PatchFolderLayout(tmp_path, Manifest(), {}))


def test_degrade_keeps_shape(rng):
    hr = rng.random((2, 3, 80, 64)).astype(np.float32)
    assert degrade(hr).shape == hr.shape


def test_center_patch(rng):
    img = rng.random((3, 10, 12))
    assert np.array_equal(center_patch(img, 4), img[:, 3:7, 4:8])
    with pytest.raises(ValueError):
        center_patch(img, 11)


def test_write_image_clamps(tmp_path):
    img = np.array([[[-0.5, 0.5, 1.5]]] * 3, dtype=np.float32)
    write_image(tmp_path / "x.png", img)
    assert read_uint8(tmp_path / "x.png")[0].tolist() == [[0, 0, 0], [128, 128, 128], [255, 255, 255]]
    assert to_uint8(img).dtype == np.uint8
