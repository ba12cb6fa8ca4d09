"""MNIST IDX loading, intensity rescaling and seeded noise injection.

Random streams: every noise draw for image ``i`` of a set comes from
``numpy.random.Generator(PCG64(SeedSequence([seed, i])))``. PCG64 and SeedSequence
are specified bit-for-bit by numpy, so sweeps reproduce across platforms, and any
single image's noise can be regenerated without replaying the others.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

GRID = 28
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

DATA_DIR_ENV = "SPIKEATTACK_DATA"

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


class IdxFormatError(ValueError):
    pass


class MagicNumberError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class Image:
    pixels: np.ndarray
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.shape != (GRID, GRID):
            raise ValueError(f"image must be {GRID}x{GRID}, got {px.shape}")
        if not self.hi > self.lo:
            raise ValueError(f"degenerate range ({self.lo}, {self.hi})")
        if px.min() < self.lo or px.max() > self.hi:
            raise ValueError(f"pixels outside declared range ({self.lo}, {self.hi})")
        object.__setattr__(self, "pixels", px)

    @property
    def range(self):
        return (self.lo, self.hi)

    def with_pixels(self, pixels) -> "Image":
        return Image(pixels, self.lo, self.hi)


@dataclass(frozen=True)
class Window:
    row0: int
    col0: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"window extents must be positive: {self}")
        if self.row0 < 0 or self.col0 < 0 or self.row0 + self.height > GRID or self.col0 + self.width > GRID:
            raise ValueError(f"window {self} does not fit inside the {GRID}x{GRID} grid")

    @property
    def slices(self):
        return slice(self.row0, self.row0 + self.height), slice(self.col0, self.col0 + self.width)

    @property
    def size(self) -> int:
        return self.height * self.width

    def pixels(self):
        """Row-major (row, col) coordinates covered by the window."""
        return [(r, c) for r in range(self.row0, self.row0 + self.height) for c in range(self.col0, self.col0 + self.width)]

    @classmethod
    def parse(cls, text: str) -> "Window":
        """Parse ``row0,col0,height,width``."""
        parts = [int(x) for x in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"window needs 4 integers row0,col0,height,width, got {text!r}")
        return cls(*parts)

    def __str__(self):
        return f"{self.row0},{self.col0},{self.height},{self.width}"


# Top-left 4x5 block and the horizontal/vertical ranges x=14..17, y=10..14.
CORNER_WINDOW = Window(0, 0, 4, 5)
CENTER_WINDOW = Window(10, 14, 5, 4)


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (n, 28, 28) float
    labels: np.ndarray  # (n,) int
    split: Literal["train", "test"] = "train"
    lo: float = 0.0
    hi: float = 255.0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or self.images.shape[1:] != (GRID, GRID):
            raise ValueError(f"images must have shape (n, {GRID}, {GRID}), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 9):
            raise ValueError("labels must lie in 0..9")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Image:
        return Image(self.images[i], self.lo, self.hi)

    def subset(self, index) -> "LabeledImageSet":
        return replace(self, images=self.images[index], labels=self.labels[index])

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), GRID * GRID)


def _read_header(buf: bytes, path, expected_magic: int, ndim: int):
    if len(buf) < 4 + 4 * ndim:
        raise TruncatedPayloadError(f"{path}: file too short for IDX header")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise MagicNumberError(f"{path}: magic number {magic} (0x{magic:08x}), expected {expected_magic}")
    dims = struct.unpack(f">{ndim}I", buf[4 : 4 + 4 * ndim])
    return dims, 4 + 4 * ndim


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (count, rows, cols), off = _read_header(buf, path, IMAGE_MAGIC, 3)
    need = count * rows * cols
    if len(buf) - off < need:
        raise TruncatedPayloadError(f"{path}: expected {need} pixel bytes, found {len(buf) - off}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (count,), off = _read_header(buf, path, LABEL_MAGIC, 1)
    if len(buf) - off < count:
        raise TruncatedPayloadError(f"{path}: expected {count} label bytes, found {len(buf) - off}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=off)


def write_idx_images(path, images) -> None:
    """Write ``(n, rows, cols)`` unsigned-byte images in IDX format."""
    arr = np.asarray(images)
    if arr.ndim != 3:
        raise ValueError("images must be (n, rows, cols)")
    arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">4I", IMAGE_MAGIC, *arr.shape))
        f.write(arr.tobytes(order="C"))


def write_idx_labels(path, labels) -> None:
    arr = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">2I", LABEL_MAGIC, len(arr)))
        f.write(arr.tobytes())


def load_mnist_idx(images_path, labels_path, split: Literal["train", "test"] = "train") -> LabeledImageSet:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    if images.shape[1:] != (GRID, GRID):
        raise IdxFormatError(f"{images_path}: images are {images.shape[1:]}, expected {GRID}x{GRID}")
    return LabeledImageSet(images.astype(float), labels, split=split, lo=0.0, hi=255.0)


def data_dir(path=None) -> Path:
    if path is not None:
        return Path(path)
    return Path(os.environ.get(DATA_DIR_ENV, Path.home() / ".cache" / "spikeattack" / "mnist"))


def load_mnist(split: Literal["train", "test"], directory=None) -> LabeledImageSet:
    """Load a canonical MNIST split from the data directory, pixel range (0, 255)."""
    d = data_dir(directory)
    img, lab = TRAIN_FILES if split == "train" else TEST_FILES
    return load_mnist_idx(d / img, d / lab, split=split)


def rescale(data: LabeledImageSet, lo: float, hi: float) -> LabeledImageSet:
    if not hi > lo:
        raise ValueError(f"target range ({lo}, {hi}) is degenerate")
    if not data.hi > data.lo:
        raise ValueError(f"source range ({data.lo}, {data.hi}) is degenerate")
    scale = (hi - lo) / (data.hi - data.lo)
    images = lo + (data.images - data.lo) * scale
    return replace(data, images=images, lo=lo, hi=hi)


@dataclass(frozen=True)
class NoiseSpec:
    distribution: Literal["normal", "uniform"] = "normal"
    magnitude: float = 0.0
    region: Window | None = None  # None: the full image
    seed: int = 0

    def __post_init__(self):
        if self.distribution not in ("normal", "uniform"):
            raise ValueError(f"unknown noise distribution {self.distribution!r}")
        if not (np.isfinite(self.magnitude) and self.magnitude >= 0):
            raise ValueError(f"noise magnitude must be finite and >= 0, got {self.magnitude}")


def noise_rng(seed: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _draws(rng: np.random.Generator, distribution: str, shape):
    if distribution == "normal":
        return rng.standard_normal(shape)
    return rng.uniform(-1.0, 1.0, shape)


def _noisy(pixels: np.ndarray, spec: NoiseSpec, lo: float, hi: float, index: int) -> np.ndarray:
    out = pixels.copy()
    if spec.magnitude == 0:
        return out
    rng = noise_rng(spec.seed, index)
    rows, cols = spec.region.slices if spec.region is not None else (slice(None), slice(None))
    block = out[rows, cols]
    out[rows, cols] = np.clip(block + spec.magnitude * _draws(rng, spec.distribution, block.shape), lo, hi)
    return out


def apply_noise(image: Image, spec: NoiseSpec, index: int = 0) -> Image:
    """Additive ``magnitude * z`` noise, clamped to the image range.

    ``z`` is standard normal or uniform on [-1, 1]. ``index`` selects the random
    stream, so image ``i`` of a set gets the same noise it gets from ``noisy_set``.
    """
    return image.with_pixels(_noisy(image.pixels, spec, image.lo, image.hi, index))


def noisy_set(data: LabeledImageSet, spec: NoiseSpec) -> LabeledImageSet:
    if spec.magnitude == 0:
        return data
    images = np.empty_like(data.images)
    for i in range(len(data)):
        images[i] = _noisy(data.images[i], spec, data.lo, data.hi, i)
    return replace(data, images=images)
