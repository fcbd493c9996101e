"""Labeled image datasets in RGB/UNIT, NHWC float32.

``load_dataset("cifar10", root)`` reads the standard python-pickle CIFAR-10
batches from disk. ``load_dataset("shapes10")`` procedurally generates a
10-class 32x32 color dataset whose labels depend only on shape and texture;
foreground and background colors are random, so color carries no label
information. It needs no download and is fully determined by its seed.
"""

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPE_CLASSES = (
    "disk",
    "square",
    "triangle",
    "ring",
    "plus",
    "hstripes",
    "vstripes",
    "dstripes",
    "checker",
    "xcross",
)

# luma contrast band between shape and background, texture and noise levels
MIN_CONTRAST = 0.03
MAX_CONTRAST = 0.12
TEXTURE_AMPLITUDE = 0.08
PIXEL_NOISE = 0.01
GRATING_AMPLITUDE = 0.04
CHROMA_JITTER = 0.03
CHROMA_TEXTURE = 0.5

# (period in pixels, orientation) of each class's grating
_CLASS_GRATINGS = tuple((2.5 + 0.3 * k, np.pi * ((3 * k) % 10) / 10) for k in range(len(SHAPE_CLASSES)))

CIFAR10_CLASSES = (
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
)


@dataclass
class Dataset:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: tuple

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            return self.x_train, self.y_train
        if name == "test":
            return self.x_test, self.y_test
        raise KeyError(f"unknown split {name!r}")


def _luma(rgb):
    return rgb @ np.array([0.299, 0.587, 0.114])


def _random_color(rng, lo=0.1, hi=0.9):
    return rng.uniform(lo, hi, size=3)


def _chroma_only(v):
    # remove the luma component; (1, 1, 1) has unit luma
    return v - _luma(v)[..., None]


def _color_pair(rng, min_contrast, max_contrast):
    """Background color and a foreground that differs mostly in luma, like natural edges."""
    while True:
        bg = _random_color(rng)
        dy = rng.uniform(min_contrast, max_contrast) * rng.choice([-1.0, 1.0])
        fg = bg + dy + _chroma_only(rng.normal(0, CHROMA_JITTER, size=3))
        if np.all((fg > 0.05) & (fg < 0.95)):
            return fg, bg


def _smooth_field(rng, size, cells, amplitude):
    """Low-frequency texture, mostly luma: a cells x cells random grid, bilinearly upsampled."""
    grid = rng.normal(0, amplitude, size=(cells + 1, cells + 1, 1)) + _chroma_only(
        rng.normal(0, amplitude * CHROMA_TEXTURE, size=(cells + 1, cells + 1, 3))
    )
    t = np.linspace(0, cells, size)
    i0 = np.minimum(t.astype(int), cells - 1)
    f = (t - i0)[:, None]
    rows = grid[i0] * (1 - f[..., None]) + grid[i0 + 1] * f[..., None]
    cols = rows[:, i0] * (1 - f.T[..., None]) + rows[:, i0 + 1] * f.T[..., None]
    return cols


def _shape_mask(kind: int, rng, size: int, scale: float = 1.0, spread: float = 0.15) -> np.ndarray:
    """Soft [0, 1] mask of shape ``kind`` drawn at a random pose."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    c = size / 2
    cx, cy = rng.uniform(c - size * spread, c + size * spread, size=2)
    r = rng.uniform(size * 0.22, size * 0.36) * scale
    name = SHAPE_CLASSES[kind]
    if name in ("plus", "xcross"):
        # crosses only jitter, otherwise a rotated plus would be an x
        theta = rng.uniform(-np.pi / 10, np.pi / 10)
    else:
        theta = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    edge = 0.75  # softness of anti-aliased edges, in pixels

    def inside(signed_dist):
        return np.clip(0.5 - signed_dist / edge, 0.0, 1.0)

    if name == "disk":
        return inside(np.hypot(u, v) - r)
    if name == "square":
        return inside(np.maximum(abs(u), abs(v)) - r * 0.85)
    if name == "triangle":
        # max of three half-plane distances, normals 120 degrees apart
        d = v - r * 0.5
        for ang in (2 * np.pi / 3, 4 * np.pi / 3):
            d = np.maximum(d, u * np.sin(ang) + v * np.cos(ang) - r * 0.5)
        return inside(d)
    if name == "ring":
        width = r * rng.uniform(0.25, 0.4)
        return inside(abs(np.hypot(u, v) - r * 0.8) - width / 2)
    if name == "plus":
        w = r * rng.uniform(0.25, 0.35)
        bar1 = np.maximum(abs(u) - r, abs(v) - w)
        bar2 = np.maximum(abs(v) - r, abs(u) - w)
        return inside(np.minimum(bar1, bar2))
    if name == "xcross":
        w = r * rng.uniform(0.25, 0.35)
        a = (u + v) / np.sqrt(2)
        b = (u - v) / np.sqrt(2)
        bar1 = np.maximum(abs(a) - r, abs(b) - w)
        bar2 = np.maximum(abs(b) - r, abs(a) - w)
        return inside(np.minimum(bar1, bar2))

    period = rng.uniform(5.0, 8.0)
    phase = rng.uniform(0, period)
    jitter = rng.uniform(-0.15, 0.15)
    if name == "hstripes":
        coord = (yy + jitter * xx + phase) / period
    elif name == "vstripes":
        coord = (xx + jitter * yy + phase) / period
    elif name == "dstripes":
        sgn = rng.choice([-1.0, 1.0])
        coord = (xx + sgn * yy + phase) / (period * np.sqrt(2))
    elif name == "checker":
        cu = np.sin(2 * np.pi * (xx + phase) / period)
        cv = np.sin(2 * np.pi * (yy + phase) / period)
        return np.clip(0.5 + 2.0 * cu * cv, 0.0, 1.0)
    else:  # pragma: no cover - exhaustive above
        raise ValueError(name)
    return np.clip(0.5 + 2.0 * np.sin(2 * np.pi * coord), 0.0, 1.0)


def render_shape_image(label: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    fg, bg = _color_pair(rng, MIN_CONTRAST, MAX_CONTRAST)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = bg + _smooth_field(rng, size, 4, TEXTURE_AMPLITUDE)
    mask = _shape_mask(label, rng, size)[..., None]
    fg_img = fg + _smooth_field(rng, size, 4, TEXTURE_AMPLITUDE / 2)
    img = (1 - mask) * img + mask * fg_img
    if GRATING_AMPLITUDE > 0:
        # faint fine gray grating keyed to the class, random phase
        period, theta = _CLASS_GRATINGS[label]
        u = (xx * np.cos(theta) + yy * np.sin(theta)) * size
        img = img + GRATING_AMPLITUDE * np.sin(2 * np.pi * u / period + rng.uniform(0, 2 * np.pi))[..., None]
    for _ in range(rng.integers(1, 3)):
        # distractor blob of random color
        bx, by = rng.uniform(0, 1, size=2)
        br = rng.uniform(0.05, 0.12)
        blob = np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * br**2))[..., None]
        img = img + 0.4 * blob * (_random_color(rng) - img)
    img = img + rng.normal(0, PIXEL_NOISE, size=img.shape)
    return np.clip(img, 0.02, 0.98).astype(np.float32)


def make_shapes10(n_train: int = 20000, n_test: int = 2000, size: int = 32, seed: int = 0) -> Dataset:
    """Generate the balanced synthetic shapes dataset."""
    rng = np.random.default_rng(seed)

    def build(n):
        labels = np.arange(n) % len(SHAPE_CLASSES)
        rng.shuffle(labels)
        images = np.stack([render_shape_image(int(k), rng, size) for k in labels])
        return images, labels.astype(np.int64)

    x_train, y_train = build(n_train)
    x_test, y_test = build(n_test)
    return Dataset("shapes10", x_train, y_train, x_test, y_test, SHAPE_CLASSES)


def load_cifar10(root: str | os.PathLike) -> Dataset:
    """Read ``cifar-10-batches-py`` (or its parent directory) into RGB/UNIT arrays."""
    root = Path(root)
    if (root / "cifar-10-batches-py").is_dir():
        root = root / "cifar-10-batches-py"
    if not (root / "data_batch_1").exists():
        raise FileNotFoundError(f"no CIFAR-10 python batches under {root}")

    def read(name):
        with open(root / name, "rb") as fh:
            d = pickle.load(fh, encoding="bytes")
        x = d[b"data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        return x.astype(np.float32) / 255.0, np.asarray(d[b"labels"], dtype=np.int64)

    parts = [read(f"data_batch_{i}") for i in range(1, 6)]
    x_train = np.concatenate([p[0] for p in parts])
    y_train = np.concatenate([p[1] for p in parts])
    x_test, y_test = read("test_batch")
    return Dataset("cifar10", x_train, y_train, x_test, y_test, CIFAR10_CLASSES)


_CACHE: dict = {}


def load_dataset(name: str = "shapes10", root: str | None = None, seed: int = 0, **kwargs) -> Dataset:
    """Load a dataset by name. Synthetic datasets are memoised per (name, seed, kwargs)."""
    if name == "cifar10":
        root = root or os.environ.get("CIFAR10_ROOT")
        if root is None:
            raise FileNotFoundError("cifar10 requested but no root given and CIFAR10_ROOT unset")
        return load_cifar10(root)
    if name == "shapes10":
        key = (name, seed, tuple(sorted(kwargs.items())))
        if key not in _CACHE:
            _CACHE[key] = make_shapes10(seed=seed, **kwargs)
        return _CACHE[key]
    raise KeyError(f"unknown dataset {name!r}")
