"""8-bit PNG <-> float CHW tensors in [0, 1]."""
from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import UnsupportedFormat
from .fsutil import atomic_write

_SIXTEEN_BIT_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N", "F"}


def load_image(path):
    """Read an 8-bit gray/RGB PNG as a float64 (C, H, W) array in [0, 1]."""
    path = os.fspath(path)
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in _SIXTEEN_BIT_MODES:
                raise UnsupportedFormat(f"{path}: {mode} images are not supported (8-bit gray or RGB only)")
            if mode in ("P", "RGBA", "CMYK", "YCbCr"):
                img = img.convert("RGB")
            elif mode in ("LA", "1"):
                img = img.convert("L")
            arr = np.asarray(img, dtype=np.uint8)
    except (FileNotFoundError, UnsupportedFormat):
        raise
    except OSError as exc:
        raise OSError(f"{path}: cannot read image ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def quantize(x):
    """Clamp to [0, 1] and round half up to 8-bit codes."""
    return np.floor(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def dequantize(codes):
    return codes.astype(np.float64) / 255.0


def save_image(path, image):
    """Write a (C, H, W) or (H, W) float image as an 8-bit PNG.

    The file is written to a temporary name and renamed, so a failed save
    never leaves a partial output behind.
    """
    path = os.fspath(path)
    x = np.asarray(image)
    if x.ndim == 3:
        x = x[0] if x.shape[0] == 1 else x.transpose(1, 2, 0)
    codes = quantize(x)
    atomic_write(path, lambda fh: Image.fromarray(codes).save(fh, format="PNG"))
