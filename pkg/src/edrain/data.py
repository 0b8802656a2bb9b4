"""Paired rainy/clean datasets, procedural test textures and padding helpers."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument, InvalidState
from .imageio import load_image, save_image
from .rainmix import composite_rainy, generate_synthetic_streaks, make_rng


@dataclass
class DatasetIndex:
    """``(rainy_path, clean_path)`` pairs matched by file name."""

    pairs: list
    split: str = "train"

    def __post_init__(self):
        if not self.pairs:
            raise InvalidState("dataset is empty")

    def __len__(self):
        return len(self.pairs)

    @property
    def names(self):
        return [os.path.basename(r) for r, _ in self.pairs]

    @classmethod
    def from_dirs(cls, rainy_dir, clean_dir, split="train"):
        rainy = sorted(f for f in os.listdir(rainy_dir) if f.lower().endswith(".png"))
        clean = set(f for f in os.listdir(clean_dir) if f.lower().endswith(".png"))
        if not rainy:
            raise InvalidState(f"no PNG files in {rainy_dir}")
        missing = [f for f in rainy if f not in clean]
        if missing:
            raise InvalidArgument(f"rainy images without a clean counterpart in {clean_dir}: {missing[:5]}")
        extra = sorted(clean - set(rainy))
        if extra:
            raise InvalidArgument(f"clean images without a rainy counterpart in {rainy_dir}: {extra[:5]}")
        pairs = [(os.path.join(rainy_dir, f), os.path.join(clean_dir, f)) for f in rainy]
        return cls(pairs, split)

    @classmethod
    def from_root(cls, root, split="train"):
        """``root/rainy`` and ``root/clean``."""
        return cls.from_dirs(os.path.join(root, "rainy"), os.path.join(root, "clean"), split)

    def load(self):
        return PairSet(
            [load_image(r) for r, _ in self.pairs],
            [load_image(c) for _, c in self.pairs],
            self.names,
        )


@dataclass
class PairSet:
    """In-memory (C, H, W) rainy/clean arrays."""

    rainy: list
    clean: list
    names: list = None

    def __post_init__(self):
        if not self.rainy:
            raise InvalidState("dataset is empty")
        if len(self.rainy) != len(self.clean):
            raise InvalidArgument("rainy and clean lists differ in length")
        for r, c in zip(self.rainy, self.clean):
            if r.shape != c.shape:
                raise InvalidArgument(f"rainy/clean shape mismatch {r.shape} vs {c.shape}")
        if self.names is None:
            self.names = [f"pair{i:03d}.png" for i in range(len(self.rainy))]

    def __len__(self):
        return len(self.rainy)

    def load(self):
        return self


def procedural_texture(size, rng, channels=3):
    """A smooth, structured clean image: gradients, blobs, edges and fine texture."""
    h, w = (size, size) if np.isscalar(size) else size
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.empty((channels, h, w))
    base = rng.uniform(0.15, 0.6, size=channels)
    gx, gy = rng.uniform(-0.3, 0.3, size=(2, channels))
    for c in range(channels):
        img[c] = base[c] + gx[c] * xx + gy[c] * yy
    smooth = ndimage.gaussian_filter(rng.standard_normal((channels, h, w)), sigma=(0, 4, 4))
    img += 0.15 * smooth / (np.abs(smooth).max() + 1e-12)
    for _ in range(int(rng.integers(2, 5))):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        rh, rw = rng.integers(h // 8, h // 2), rng.integers(w // 8, w // 2)
        colour = rng.uniform(-0.25, 0.25, size=channels)
        img[:, y0 : y0 + rh, x0 : x0 + rw] += colour[:, None, None]
    period = int(rng.integers(4, 9))
    checker = ((np.arange(h)[:, None] // period + np.arange(w)[None, :] // period) % 2) * 2.0 - 1.0
    img += 0.04 * checker
    img = img[0:1] if channels == 1 else img
    return np.clip(img, 0.0, 1.0)


def synthetic_pairs(count, size, seed, channels=3, streak_scale=1.0):
    """Clean textures plus rain composited from procedurally generated streaks."""
    rng = make_rng(seed)
    streaks = generate_synthetic_streaks(count, size, rng)
    clean, rainy = [], []
    for i in range(count):
        x = procedural_texture(size, rng, channels)
        clean.append(x)
        rainy.append(composite_rainy(x, np.clip(streaks.maps[i] * streak_scale, 0.0, 1.0)))
    return PairSet(rainy, clean)


def write_pairs(pairs, root):
    """Write a ``PairSet`` as ``root/rainy/*.png`` and ``root/clean/*.png``."""
    for sub in ("rainy", "clean"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    for name, r, c in zip(pairs.names, pairs.rainy, pairs.clean):
        save_image(os.path.join(root, "rainy", name), r)
        save_image(os.path.join(root, "clean", name), c)
    return DatasetIndex.from_root(root)


def pad_to_multiple(image, multiple):
    """Edge-pad a (C, H, W) image at the bottom/right; returns ``(padded, (H, W))``."""
    h, w = image.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image, (h, w)
    pad = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(image, pad, mode="edge"), (h, w)


def crop_to(image, hw):
    h, w = hw
    return image[..., :h, :w]


def random_crop_pair(rainy, clean, crop, rng):
    """Crop both images at the same random location (no crop if already that size)."""
    h, w = rainy.shape[-2:]
    if crop > h or crop > w:
        raise InvalidArgument(f"crop size {crop} exceeds image size {h}x{w}")
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    return rainy[..., y : y + crop, x : x + crop], clean[..., y : y + crop, x : x + crop]
