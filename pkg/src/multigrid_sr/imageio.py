"""8-bit RGB PNG <-> float (3, H, W) arrays in [0, 1]."""

import numpy as np
from PIL import Image


def read_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_uint8(img):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[0]
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_image(path, img):
    """Clamp to [0, 1], quantise and save as PNG."""
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def read_uint8(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_uint8(path, arr):
    Image.fromarray(np.ascontiguousarray(arr), mode="RGB").save(path, format="PNG")
