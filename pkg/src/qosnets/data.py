"""Datasets: IDX (MNIST-format) files and a procedural 16x16 digit generator."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray  # (N, 1, H, W) float64 in [0, 1]
    y: np.ndarray  # (N,) int64

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DatasetError(f"{len(self.x)} images but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])

    def split(self, sizes, seed: int = 0) -> list["Dataset"]:
        """Shuffle with ``seed`` and cut consecutive pieces of the given sizes."""
        if sum(sizes) > len(self):
            raise DatasetError(f"split sizes {sizes} exceed dataset size {len(self)}")
        order = np.random.default_rng(seed).permutation(len(self))
        out, start = [], 0
        for n in sizes:
            out.append(self.subset(order[start:start + n]))
            start += n
        return out


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    path = Path(path)
    try:
        with _open(path) as f:
            raw = f.read()
    except OSError as e:
        raise DatasetError(f"{path}: cannot read ({e})") from None
    if len(raw) < 8:
        raise DatasetError(f"{path}: too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise DatasetError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    if len(body) != int(np.prod(dims)):
        raise DatasetError(f"{path}: expected {int(np.prod(dims))} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}.get(array.ndim)
    if magic is None:
        raise DatasetError("only 3-d image and 1-d label arrays can be written")
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())


def load_idx_dataset(images_path, labels_path, limit: int | None = None) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise DatasetError(f"{images_path}: expected an image file (3-d), got {images.ndim}-d")
    if labels.ndim != 1:
        raise DatasetError(f"{labels_path}: expected a label file (1-d), got {labels.ndim}-d")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    ds = Dataset(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64))
    return ds


# Seven-segment-style strokes on a unit box: (x0, y0, x1, y1), y grows downward.
_SEGMENTS = {
    "a": (0, 0, 1, 0), "b": (1, 0, 1, 0.5), "c": (1, 0.5, 1, 1), "d": (0, 1, 1, 1),
    "e": (0, 0.5, 0, 1), "f": (0, 0, 0, 0.5), "g": (0, 0.5, 1, 0.5),
}
_DIGITS = {
    0: "abcdef", 1: "bc", 2: "abged", 3: "abgcd", 4: "fgbc",
    5: "afgcd", 6: "afgedc", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}


def _render(digit: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    w = size * rng.uniform(0.35, 0.5)
    h = size * rng.uniform(0.6, 0.75)
    x0 = rng.uniform(1.5, size - 1.5 - w)
    y0 = rng.uniform(1.5, size - 1.5 - h)
    slant = rng.uniform(-0.25, 0.25)
    thick = rng.uniform(0.7, 1.3)
    img = np.zeros((size, size))
    for seg in _DIGITS[digit]:
        sx0, sy0, sx1, sy1 = _SEGMENTS[seg]
        p0 = np.array([x0 + sx0 * w + slant * (1 - sy0) * h, y0 + sy0 * h])
        p1 = np.array([x0 + sx1 * w + slant * (1 - sy1) * h, y0 + sy1 * h])
        p0 += rng.normal(0, 0.4, 2)
        p1 += rng.normal(0, 0.4, 2)
        d = p1 - p0
        t = ((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / max(d @ d, 1e-9)
        t = np.clip(t, 0, 1)
        dist = np.hypot(xx - p0[0] - t * d[0], yy - p0[1] - t * d[1])
        img = np.maximum(img, np.clip(thick + 0.5 - dist, 0, 1))
    img = img * rng.uniform(0.7, 1.0) + rng.normal(0, 0.08, img.shape)
    return np.clip(img, 0, 1)


def synthetic_digits(n: int, seed: int = 0, size: int = 16) -> Dataset:
    """``n`` noisy procedurally drawn digits with balanced, shuffled labels."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 10)
    x = np.stack([_render(int(d), size, rng) for d in labels]) if n else np.zeros((0, size, size))
    return Dataset(x[:, None], labels.astype(np.int64))
