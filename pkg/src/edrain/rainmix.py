"""RainMix: randomised geometric mixing of real (or synthetic) rain-streak maps.

Randomness comes from ``numpy.random.Generator(numpy.random.Philox(seed))``.
Philox is a counter-based generator with a fixed, documented algorithm, so a
given seed yields the same streams on every platform.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument, InvalidState

OP_KINDS = ("rot", "shear_x", "shear_y", "trans_x", "trans_y", "zoom_x", "zoom_y")

# magnitude ranges; rot in degrees, trans as a fraction of the image size
DEFAULT_RANGES = {
    "rot": (-30.0, 30.0),
    "shear_x": (-0.2, 0.2),
    "shear_y": (-0.2, 0.2),
    "trans_x": (-0.1, 0.1),
    "trans_y": (-0.1, 0.1),
    "zoom_x": (0.8, 1.25),
    "zoom_y": (0.8, 1.25),
}

IDENTITY_MAGNITUDE = {"rot": 0.0, "shear_x": 0.0, "shear_y": 0.0, "trans_x": 0.0, "trans_y": 0.0, "zoom_x": 1.0, "zoom_y": 1.0}

MIX_WIDTH = 4
CHAIN_DEPTH = 3
DET_EPS = 1e-6


def make_rng(seed):
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class GeometricOp:
    kind: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise InvalidArgument(f"unknown geometric op '{self.kind}', expected one of {OP_KINDS}")

    def matrix(self, height, width):
        """3x3 homogeneous map on (x, y) pixel coordinates centred on the image."""
        m = self.magnitude
        a = np.eye(3)
        if self.kind == "rot":
            t = math.radians(m)
            c, s = math.cos(t), math.sin(t)
            a[:2, :2] = [[c, -s], [s, c]]
        elif self.kind == "shear_x":
            a[0, 1] = m
        elif self.kind == "shear_y":
            a[1, 0] = m
        elif self.kind == "trans_x":
            a[0, 2] = m * width
        elif self.kind == "trans_y":
            a[1, 2] = m * height
        elif self.kind == "zoom_x":
            a[0, 0] = m
        else:
            a[1, 1] = m
        return a


def translate_px(dx=0.0, dy=0.0, height=1, width=1):
    """Ops that shift by whole pixels (handy for tests and previews)."""
    ops = []
    if dx:
        ops.append(GeometricOp("trans_x", dx / width))
    if dy:
        ops.append(GeometricOp("trans_y", dy / height))
    return ops


def chain_matrix(chain, height, width):
    """Compose ``[o1, o2, o3]`` as o3 . o2 . o1 (o1 applied first)."""
    a = np.eye(3)
    for op in chain:
        a = op.matrix(height, width) @ a
    return a


def _bilinear_sample(img, ys, xs):
    """Sample ``img`` at float coordinates with zero outside the image."""
    h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    out = np.zeros(ys.shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = np.zeros(ys.shape, dtype=np.float64)
            vals[ok] = img[yy[ok], xx[ok]]
            out += wy * wx * vals
    return out


def warp_affine(img, a):
    """Warp a 2-D map by the forward affine ``a`` about the image centre."""
    h, w = img.shape
    inv = np.linalg.inv(a)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = xx - cx
    v = yy - cy
    src_x = inv[0, 0] * u + inv[0, 1] * v + inv[0, 2] + cx
    src_y = inv[1, 0] * u + inv[1, 1] * v + inv[1, 2] + cy
    return _bilinear_sample(img, src_y, src_x)


def apply_geometric_op(rain_map, chain):
    """Apply an op chain to a rain map; output is the same size, clamped to [0, 1]."""
    rain_map = np.asarray(rain_map, dtype=np.float64)
    if rain_map.ndim != 2 or rain_map.size == 0:
        raise InvalidArgument(f"rain map must be a non-empty 2-D array, got shape {rain_map.shape}")
    if not chain:
        return rain_map.copy()
    a = chain_matrix(chain, *rain_map.shape)
    if abs(np.linalg.det(a[:2, :2])) < DET_EPS:
        raise InvalidArgument("degenerate affine chain (|det| < 1e-6)")
    return np.clip(warp_affine(rain_map, a), 0.0, 1.0)


@dataclass
class RainStreakSet:
    maps: list
    sources: list = field(default_factory=list)

    def __post_init__(self):
        if not self.sources:
            self.sources = [f"map{i}" for i in range(len(self.maps))]
        if len(self.sources) != len(self.maps):
            raise InvalidArgument("one source identifier per map is required")

    def __len__(self):
        return len(self.maps)

    @classmethod
    def from_directory(cls, path):
        """Load every PNG in ``path`` as a grayscale map in [0, 1]."""
        from .imageio import load_image

        names = sorted(f for f in os.listdir(path) if f.lower().endswith(".png"))
        maps = []
        for name in names:
            img = load_image(os.path.join(path, name))
            maps.append(img.mean(axis=0) if img.shape[0] > 1 else img[0])
        if not maps:
            raise InvalidState(f"no PNG rain-streak maps found in {path}")
        return cls(maps, names)


@dataclass
class RainMixConfig:
    ranges: dict = field(default_factory=lambda: dict(DEFAULT_RANGES))
    dirichlet_alpha: float = 1.0
    beta_a: float = 1.0
    beta_b: float = 1.0

    @classmethod
    def identity(cls):
        """Zero-width ranges at the identity magnitudes: every op is a no-op."""
        return cls(ranges={k: (v, v) for k, v in IDENTITY_MAGNITUDE.items()})


@dataclass
class MixDraw:
    """Everything random about one RainMix call."""

    source_index: int
    weights: np.ndarray  # (4,), on the simplex
    chains: list  # 4 lists of GeometricOp, each already the chosen o1 / o12 / o123 prefix
    blend: float


def sample_op(rng, config):
    kind = OP_KINDS[int(rng.integers(len(OP_KINDS)))]
    lo, hi = config.ranges[kind]
    return GeometricOp(kind, float(rng.uniform(lo, hi)) if hi > lo else float(lo))


def _sample_chain(rng, config, height, width):
    """Sample (o1, o2, o3), then one of o1, o2.o1, o3.o2.o1; resample if degenerate."""
    while True:
        ops = [sample_op(rng, config) for _ in range(CHAIN_DEPTH)]
        depth = int(rng.integers(1, CHAIN_DEPTH + 1))
        chain = ops[:depth]
        if abs(np.linalg.det(chain_matrix(chain, height, width)[:2, :2])) >= DET_EPS:
            return chain


def sample_mix_draw(streaks, rng, config=None):
    config = config or RainMixConfig()
    if len(streaks) == 0:
        raise InvalidState("rain streak set is empty")
    idx = int(rng.integers(len(streaks)))
    h, w = np.shape(streaks.maps[idx])
    weights = rng.dirichlet([config.dirichlet_alpha] * MIX_WIDTH)
    chains = [_sample_chain(rng, config, h, w) for _ in range(MIX_WIDTH)]
    blend = float(rng.beta(config.beta_a, config.beta_b))
    return MixDraw(idx, weights, chains, blend)


def mix_with_draw(streaks, draw):
    """Deterministic half of RainMix: build ``w*R_org + (1-w)*R_mix`` for a given draw."""
    r_org = np.asarray(streaks.maps[draw.source_index], dtype=np.float64)
    # Accumulated as deviations from R_org: algebraically identical (weights sum
    # to one) and exact when every transformed map equals R_org.
    dev = np.zeros_like(r_org)
    for wi, chain in zip(draw.weights, draw.chains):
        dev += wi * (apply_geometric_op(r_org, chain) - r_org)
    out = r_org + (1.0 - draw.blend) * dev
    return np.clip(out, 0.0, 1.0)


def rain_mix(streaks, rng, config=None):
    """Sample a fresh rain map from ``streaks``."""
    return mix_with_draw(streaks, sample_mix_draw(streaks, rng, config))


def resize_bilinear(img, height, width):
    """Resize a 2-D map with align-corners-free bilinear sampling (edge clamped)."""
    h, w = img.shape
    if (h, w) == (height, width):
        return np.asarray(img, dtype=np.float64).copy()
    ys = (np.arange(height) + 0.5) * (h / height) - 0.5
    xs = (np.arange(width) + 0.5) * (w / width) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear_sample(np.asarray(img, dtype=np.float64), yy, xx)


def composite_rainy(image, rain_map):
    """Additive composite ``min(image + R, 1)`` with R resized to the image."""
    image = np.asarray(image)
    h, w = image.shape[-2:]
    r = resize_bilinear(np.asarray(rain_map, dtype=np.float64), h, w).astype(image.dtype, copy=False)
    return np.minimum(image + r, 1.0).astype(image.dtype, copy=False)


def _motion_kernel(length, angle_deg):
    size = length if length % 2 else length + 1
    k = np.zeros((size, size))
    c = (size - 1) / 2.0
    t = math.radians(angle_deg)
    dx, dy = math.cos(t), -math.sin(t)
    for s in np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, 4 * length):
        x, y = c + s * dx, c + s * dy
        k[int(round(y)), int(round(x))] = 1.0
    return k / k.sum()


def generate_synthetic_streaks(count, size, rng, density=0.004):
    """Procedural streak maps: sparse salt noise smeared by an oriented motion blur."""
    if count < 1:
        raise InvalidArgument(f"count must be >= 1, got {count}")
    h, w = (size, size) if np.isscalar(size) else size
    maps, sources = [], []
    for i in range(count):
        angle = rng.uniform(60.0, 120.0)
        length = int(rng.integers(8, 25))
        drops = max(1, int(rng.poisson(density * h * w)))
        salt = np.zeros((h, w))
        salt[rng.integers(0, h, drops), rng.integers(0, w, drops)] = rng.uniform(0.5, 1.0, size=drops)
        streak = ndimage.convolve(salt, _motion_kernel(length, angle), mode="constant")
        peak = streak.max()
        if peak > 0:
            streak = streak / peak
        streak *= rng.uniform(0.6, 1.0)
        maps.append(np.clip(streak, 0.0, 1.0))
        sources.append(f"synthetic{i}:angle={angle:.1f},len={length}")
    return RainStreakSet(maps, sources)
