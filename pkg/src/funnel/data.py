"""Datasets: the synthetic layout task and IDX (MNIST-format) files.

Synthetic images are single-channel, values in [0, 1] quantized to multiples of
1/255 so they survive a round trip through 8-bit IDX files bit-for-bit.

Classes of :func:`synth_layouts`:

    0  axis-aligned bar       (horizontal or vertical stroke)
    1  oblique line           (stroke at 20-70 degrees off the axes)
    2  arc                    (circular arc spanning 100-220 degrees)
    3  blob                   (filled, rotated ellipse)

Each image gets random position, size, stroke thickness and contrast, then
``CLUTTER`` short distractor strokes of random orientation (shared by all
classes, so only the long-range layout identifies the class) and additive
gaussian pixel noise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .tensor import DTYPE

CLASS_NAMES = ("bar", "oblique", "arc", "blob")
CLUTTER = 3
NOISE_STD = 0.2
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray          # (N, c, h, w) float64 in [0, 1]
    labels: np.ndarray          # (N,) int64
    split: str = "train"
    num_classes: int = 4

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ConfigError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)


# -- synthetic layouts -----------------------------------------------------------

def _stroke(d, thickness):
    """Anti-aliased coverage of pixels at distance ``d`` from a centre line."""
    return np.clip(thickness / 2 + 0.5 - d, 0.0, 1.0)


def _segment_dist(yy, xx, cy, cx, angle, length):
    dy, dx = np.sin(angle), np.cos(angle)
    py, px = yy - cy, xx - cx
    t = np.clip(py * dy + px * dx, -length / 2, length / 2)
    return np.hypot(py - t * dy, px - t * dx)


def _arc_dist(yy, xx, cy, cx, radius, start, span):
    py, px = yy - cy, xx - cx
    ang = np.mod(np.arctan2(py, px) - start, 2 * np.pi)
    ring = np.abs(np.hypot(py, px) - radius)
    ends = [(cy + radius * np.sin(start + a), cx + radius * np.cos(start + a)) for a in (0.0, span)]
    end_d = np.minimum(*[np.hypot(yy - ey, xx - ex) for ey, ex in ends])
    return np.where(ang <= span, ring, end_d)


def _render(label, size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(DTYPE)
    thick = rng.uniform(1.2, 2.6)
    if label in (0, 1):
        length = rng.uniform(0.45, 0.8) * size
        if label == 0:
            angle = rng.integers(2) * np.pi / 2 + rng.uniform(-0.06, 0.06)
        else:
            angle = rng.integers(2) * np.pi / 2 + rng.uniform(np.pi / 9, 7 * np.pi / 18)
        half = length / 2
        ext_y, ext_x = abs(np.sin(angle)) * half + 2, abs(np.cos(angle)) * half + 2
        cy = rng.uniform(ext_y, size - ext_y) if size > 2 * ext_y else size / 2
        cx = rng.uniform(ext_x, size - ext_x) if size > 2 * ext_x else size / 2
        img = _stroke(_segment_dist(yy, xx, cy, cx, angle, length), thick)
    elif label == 2:
        radius = rng.uniform(0.22, 0.4) * size
        span = rng.uniform(np.deg2rad(100), np.deg2rad(220))
        start = rng.uniform(0, 2 * np.pi)
        m = radius + 2
        cy = rng.uniform(m, size - m) if size > 2 * m else size / 2
        cx = rng.uniform(m, size - m) if size > 2 * m else size / 2
        img = _stroke(_arc_dist(yy, xx, cy, cx, radius, start, span), thick)
    else:
        a, b = rng.uniform(0.1, 0.2) * size, rng.uniform(0.06, 0.12) * size
        rot = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(a + 1, size - a - 1), rng.uniform(a + 1, size - a - 1)
        py, px = yy - cy, xx - cx
        u = (px * np.cos(rot) + py * np.sin(rot)) / a
        v = (-px * np.sin(rot) + py * np.cos(rot)) / b
        r = np.hypot(u, v)
        img = np.clip((1.0 - r) * min(a, b) + 0.5, 0.0, 1.0)
    img = img * rng.uniform(0.6, 1.0)
    for _ in range(CLUTTER):
        angle, length = rng.uniform(0, np.pi), rng.uniform(3, 7)
        cy, cx = rng.uniform(2, size - 2, 2)
        dist = _segment_dist(yy, xx, cy, cx, angle, length)
        img = img + rng.uniform(0.5, 1.0) * _stroke(dist, rng.uniform(1.2, 2.2))
    return img + rng.normal(0.0, NOISE_STD, (size, size))


def synth_layouts(n_samples: int, image_size: int = 32, rng: np.random.Generator | None = None,
                  seed: int | None = None, split: str = "train") -> Dataset:
    """Render a balanced 4-class layout dataset; deterministic given the rng."""
    if image_size < 16:
        raise ConfigError(f"image_size must be >= 16, got {image_size}")
    if rng is None:
        if seed is None:
            raise ConfigError("pass either rng or seed")
        from .tensor import make_rng
        rng = make_rng(seed)
    labels = rng.permutation(np.arange(n_samples) % 4).astype(np.int64)
    images = np.empty((n_samples, 1, image_size, image_size), dtype=DTYPE)
    for i, lab in enumerate(labels):
        images[i, 0] = _render(int(lab), image_size, rng)
    images = np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0
    return Dataset(images, labels, split, 4)


# -- IDX ------------------------------------------------------------------------

def _read_exact(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise FormatError(f"truncated IDX file while reading {what}", len(buf))
    return buf[offset:offset + n]


def read_idx_array(path: str | Path) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an integer array."""
    buf = Path(path).read_bytes()
    magic, = struct.unpack(">I", _read_exact(buf, 0, 4, "magic"))
    if magic >> 8 != 0x08 or (magic & 0xFF) not in (1, 3):
        raise FormatError(f"bad IDX magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", _read_exact(buf, 4, 4 * ndim, "dimensions"))
    start = 4 + 4 * ndim
    count = int(np.prod(dims))
    body = _read_exact(buf, start, count, f"{count} data bytes")
    if len(buf) > start + count:
        raise FormatError("trailing bytes after IDX payload", start + count)
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    """Write (N, 1, h, w) images in [0, 1] as an 8-bit IDX file."""
    if images.ndim != 4 or images.shape[1] != 1:
        raise ConfigError(f"IDX export needs (N, 1, h, w) images, got {images.shape}")
    q = np.round(np.clip(images[:, 0], 0.0, 1.0) * 255.0).astype(np.uint8)
    n, h, w = q.shape
    _atomic_write(path, struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + q.tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ConfigError("IDX labels must fit in an unsigned byte")
    _atomic_write(path, struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.astype(np.uint8).tobytes())


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_idx(images_path: str | Path, labels_path: str | Path | None = None,
             split: str = "train", num_classes: int | None = None) -> Dataset:
    """Load IDX images (and labels) as a single-channel dataset scaled to [0, 1]."""
    raw = read_idx_array(images_path)
    if raw.ndim != 3:
        raise FormatError(f"image file must be 3-D (magic 0x{IMAGE_MAGIC:08x}), got {raw.ndim}-D", 0)
    images = raw[:, None, :, :].astype(DTYPE) / 255.0
    if labels_path is None:
        labels = np.zeros(len(raw), dtype=np.int64)
    else:
        labels = read_idx_array(labels_path).astype(np.int64)
        if labels.ndim != 1:
            raise FormatError("label file must be 1-D", 0)
        if len(labels) != len(images):
            raise FormatError(f"{len(images)} images but {len(labels)} labels", 4)
    k = num_classes or (int(labels.max()) + 1 if len(labels) else 1)
    return Dataset(images, labels, split, k)


def idx_paths(directory: str | Path, split: str) -> tuple[Path, Path]:
    d = Path(directory)
    return d / f"{split}-images-idx3-ubyte", d / f"{split}-labels-idx1-ubyte"


def export_idx(ds: Dataset, directory: str | Path) -> tuple[Path, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    img, lab = idx_paths(d, ds.split)
    write_idx_images(img, ds.images)
    write_idx_labels(lab, ds.labels)
    return img, lab


def load_idx_dir(directory: str | Path, split: str, num_classes: int | None = None) -> Dataset:
    img, lab = idx_paths(directory, split)
    return load_idx(img, lab, split, num_classes)
