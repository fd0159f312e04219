"""Patch-folder datasets and the three-stage training sampler.

``prep_dataset`` turns every source image into a folder of overlapping,
losslessly stored patches, plus a manifest.  ``Sampler`` draws training pairs
by picking an image folder, then a patch file in it, then a random crop
inside that file.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import read_uint8, write_uint8
from .resample import downscale, pre_upscale
from .tiling import axis_origins

log = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
PREP_MARGIN = 64
SCALE = 16


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    count: int
    prep_patch: int
    prep_stride: int


@dataclass
class Manifest:
    entries: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def write(self, path):
        lines = ["# name\tpatch_count\tprep_patch\tprep_stride"]
        lines += [f"{e.name}\t{e.count}\t{e.prep_patch}\t{e.prep_stride}" for e in self.entries]
        lines += [f"!skipped\t{name}\t{why}" for name, why in self.skipped]
        lines += [f"!error\t{name}\t{why}" for name, why in self.errors]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path):
        m = cls()
        for line in Path(path).read_text().splitlines():
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if parts[0] == "!error":
                m.errors.append((parts[1], parts[2] if len(parts) > 2 else ""))
            elif parts[0] == "!skipped":
                m.skipped.append((parts[1], parts[2] if len(parts) > 2 else ""))
            else:
                m.entries.append(ManifestEntry(parts[0], int(parts[1]), int(parts[2]), int(parts[3])))
        return m


def patch_name(row, col):
    return f"r{row:05d}_c{col:05d}.png"


def _prep_one(src, out_dir, prep_patch, prep_stride):
    name = src.stem
    try:
        img = read_uint8(src)
    except Exception as exc:  # unreadable files are reported, not fatal
        return ("error", name, f"{type(exc).__name__}: {exc}")
    h, w = img.shape[:2]
    if h < prep_patch or w < prep_patch:
        log.warning("skipping %s: %dx%d is smaller than the %dpx prep patch", src, h, w, prep_patch)
        return ("skipped", name, f"{h}x{w} smaller than {prep_patch}")
    folder = Path(out_dir) / name
    folder.mkdir(parents=True, exist_ok=True)
    count = 0
    for r in axis_origins(h, prep_patch, prep_stride):
        for c in axis_origins(w, prep_patch, prep_stride):
            write_uint8(folder / patch_name(r, c), img[r : r + prep_patch, c : c + prep_patch])
            count += 1
    return ("ok", name, count)


def list_images(src_dir):
    return sorted(p for p in Path(src_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def prep_dataset(src_dir, out_dir, prep_patch, prep_stride, workers=1):
    """Write overlapping ``prep_patch`` crops of every source image; return the manifest."""
    if prep_stride < 1 or prep_stride > prep_patch:
        raise ValueError(f"prep_stride must be in [1, {prep_patch}], got {prep_stride}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sources = list_images(src_dir)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda p: _prep_one(p, out_dir, prep_patch, prep_stride), sources))
    else:
        results = [_prep_one(p, out_dir, prep_patch, prep_stride) for p in sources]
    manifest = Manifest()
    for status, name, info in results:
        if status == "ok":
            manifest.entries.append(ManifestEntry(name, info, prep_patch, prep_stride))
        elif status == "skipped":
            manifest.skipped.append((name, info))
        else:
            manifest.errors.append((name, info))
    manifest.write(out_dir / MANIFEST)
    return manifest


@dataclass
class PatchFolderLayout:
    root: Path
    manifest: Manifest
    files: dict

    @property
    def images(self):
        return [e.name for e in self.manifest.entries]

    @property
    def prep_patch(self):
        return min(e.prep_patch for e in self.manifest.entries)


def load_layout(root):
    """Read a prepared dataset and check the manifest against the folders."""
    root = Path(root)
    manifest = Manifest.read(root / MANIFEST)
    files = {}
    for entry in manifest.entries:
        names = sorted(os.listdir(root / entry.name))
        if len(names) != entry.count:
            raise ValueError(
                f"manifest says {entry.count} patches for {entry.name!r}, folder has {len(names)}"
            )
        files[entry.name] = names
    return PatchFolderLayout(root, manifest, files)


def reassemble(layout, name):
    """Rebuild a source image from its patch files (uint8, H x W x 3)."""
    coords = []
    for fname in layout.files[name]:
        r, c = fname[:-4].split("_")
        coords.append((int(r[1:]), int(c[1:]), fname))
    p = next(e.prep_patch for e in layout.manifest.entries if e.name == name)
    h = max(r for r, _, _ in coords) + p
    w = max(c for _, c, _ in coords) + p
    out = np.zeros((h, w, 3), dtype=np.uint8)
    for r, c, fname in coords:
        out[r : r + p, c : c + p] = read_uint8(layout.root / name / fname)
    return out


def degrade(hr, scale=SCALE):
    """Generator input for an HR patch: S_scale downscale, then bicubic back up."""
    low = downscale(hr, scale)
    return pre_upscale(low, scale, like=hr.shape[-2:])


class Sampler:
    """Seeded three-stage sampler: image folder, then patch file, then crop."""

    def __init__(self, layout, seed=0):
        if not layout.manifest.entries:
            raise ValueError("dataset layout has no images")
        self.layout = layout
        self.rng = np.random.default_rng(seed)

    def draw(self, train_patch):
        """Return (image index, file index, (row, col)) for one sample."""
        entries = self.layout.manifest.entries
        i = int(self.rng.integers(len(entries)))
        entry = entries[i]
        j = int(self.rng.integers(len(self.layout.files[entry.name])))
        slack = entry.prep_patch - train_patch
        r = int(self.rng.integers(slack + 1))
        c = int(self.rng.integers(slack + 1))
        return i, j, (r, c)

    def sample(self, batch, train_patch):
        if train_patch > self.layout.prep_patch:
            raise ValueError(f"train patch {train_patch} exceeds prep patch {self.layout.prep_patch}")
        if train_patch < 4 * SCALE:
            raise ValueError(f"train patch must be at least {4 * SCALE}px for the x{SCALE} degradation")
        hr = np.empty((batch, 3, train_patch, train_patch), dtype=np.float32)
        for b in range(batch):
            i, j, (r, c) = self.draw(train_patch)
            name = self.layout.manifest.entries[i].name
            tile = read_uint8(self.layout.root / name / self.layout.files[name][j])
            crop = tile[r : r + train_patch, c : c + train_patch]
            hr[b] = crop.transpose(2, 0, 1).astype(np.float32) / 255.0
        return degrade(hr), hr


def sample_batch(layout, batch, train_patch, seed):
    """One batch of (lr, hr) arrays from a fresh sampler seeded with ``seed``."""
    return Sampler(layout, seed).sample(batch, train_patch)


def center_patch(img, patch):
    """Central ``patch`` x ``patch`` crop of a (3, H, W) image."""
    _, h, w = img.shape
    if patch > min(h, w):
        raise ValueError(f"patch {patch} larger than image {h}x{w}")
    r, c = (h - patch) // 2, (w - patch) // 2
    return img[:, r : r + patch, c : c + patch]
