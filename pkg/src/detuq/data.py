"""Datasets, IDX image files and severity-graded input shifts."""

from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

SHIFT_KINDS = ("rotation", "gaussian_noise", "brightness", "contrast")
DEFAULT_SEVERITIES = {
    "rotation": (0, 20, 40, 60, 80, 100, 120, 140, 160, 180),
    "gaussian_noise": (0.0, 0.05, 0.1, 0.2, 0.3, 0.5),
    "brightness": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
    "contrast": (1.0, 0.8, 0.6, 0.4, 0.25, 0.15),
}
_IDENTITY = {"rotation": 0.0, "gaussian_noise": 0.0, "brightness": 0.0, "contrast": 1.0}


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ShapeError(f"inputs {x.shape} and labels {y.shape} do not line up")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(x)):
            raise ValueError("inputs must be finite")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def with_inputs(self, inputs: np.ndarray) -> "Dataset":
        return replace(self, inputs=inputs)

    def subset(self, idx) -> "Dataset":
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx])


# --- IDX files ---------------------------------------------------------------


def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(buf: bytes, magic: int, ndim: int, what: str) -> tuple[tuple[int, ...], np.ndarray]:
    header = 4 + 4 * ndim
    if len(buf) < 4:
        raise FormatError(f"{what}: file too short for magic number", offset=len(buf))
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise FormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    if len(buf) < header:
        raise FormatError(f"{what}: truncated header", offset=len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    need = header + math.prod(dims)
    if len(buf) < need:
        raise FormatError(f"{what}: truncated data, expected {need} bytes", offset=len(buf))
    if len(buf) > need:
        raise FormatError(f"{what}: {len(buf) - need} trailing bytes", offset=need)
    return dims, np.frombuffer(buf, dtype=np.uint8, offset=header, count=need - header)


def load_idx(images_path: str | Path, labels_path: str | Path, split: str = "train", n_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    dims, pixels = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, 3, "images")
    (n_labels,), labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, 1, "labels")
    if dims[0] != n_labels:
        raise FormatError(f"{dims[0]} images but {n_labels} labels", offset=4)
    if labels.size and labels.max() >= n_classes:
        offset = 8 + int(np.argmax(labels >= n_classes))
        raise FormatError(f"label {labels.max()} outside [0, {n_classes})", offset=offset)
    x = pixels.reshape(dims[0], dims[1] * dims[2]).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), n_classes, split)


def _write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps the archive bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(data)
    else:
        path.write_bytes(data)


def write_idx(images_path: str | Path, labels_path: str | Path, data: Dataset, side: int | None = None) -> None:
    """Inverse of :func:`load_idx`; pixels are rounded to the nearest 1/255."""
    n, d = data.inputs.shape
    side = side if side is not None else math.isqrt(d)
    if side * side != d:
        raise ShapeError(f"{d} pixels do not form a square image")
    pixels = np.clip(np.rint(data.inputs * 255.0), 0, 255).astype(np.uint8)
    _write_bytes(images_path, struct.pack(">4I", IMAGE_MAGIC, n, side, side) + pixels.tobytes())
    _write_bytes(labels_path, struct.pack(">2I", LABEL_MAGIC, n) + data.labels.astype(np.uint8).tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
    "test": ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
}


def default_data_root() -> Path:
    return Path(os.environ.get("DETUQ_DATA", Path.home() / ".cache" / "detuq"))


def prepare_mnist_subset(root: str | Path | None = None, train_per_class: int = 400) -> Path:
    """Write the 5000-digit MNIST sample bundled with ``mlxtend`` as IDX files.

    Each class contributes its first ``train_per_class`` digits to the train
    split and the rest to the test split. Existing files are left alone.
    """
    root = Path(root) if root is not None else default_data_root() / "mnist-5k"
    paths = {split: [root / f for f in files] for split, files in MNIST_FILES.items()}
    if all(p.exists() for ps in paths.values() for p in ps):
        return root
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    x = x / 255.0
    y = y.astype(np.int64)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(y == c)
        train_idx.append(idx[:train_per_class])
        test_idx.append(idx[train_per_class:])
    root.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", np.concatenate(train_idx)), ("test", np.concatenate(test_idx))):
        write_idx(*paths[split], Dataset(x[idx], y[idx], 10, split))
    return root


def load_mnist(root: str | Path, split: str) -> Dataset:
    images, labels = MNIST_FILES[split]
    root = Path(root)
    return load_idx(root / images, root / labels, split)


# --- synthetic tasks ---------------------------------------------------------


def _class_sizes(n: int, k: int) -> list[int]:
    return [n // k + (1 if c < n % k else 0) for c in range(k)]


def make_two_moons(n: int, noise_sigma: float, rng: np.random.Generator, split: str = "train") -> Dataset:
    """Two interleaved half circles of radius 1 with optional Gaussian jitter."""
    if n < 2:
        raise ValueError("need n >= 2")
    n0, n1 = _class_sizes(n, 2)
    t0 = np.linspace(0.0, math.pi, n0)
    t1 = np.linspace(0.0, math.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.vstack([upper, lower])
    if noise_sigma > 0:
        x = x + noise_sigma * rng.standard_normal(x.shape)
    y = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    return Dataset(x, y, 2, split)


def make_blobs(n: int, centers, sigma: float, rng: np.random.Generator, split: str = "train") -> Dataset:
    """Isotropic Gaussian blobs, one class per centre, balanced."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if n < 2:
        raise ValueError("need n >= 2")
    k = centers.shape[0]
    sizes = _class_sizes(n, k)
    y = np.repeat(np.arange(k), sizes)
    x = centers[y] + sigma * rng.standard_normal((n, centers.shape[1]))
    return Dataset(x, y, k, split)


# --- shifts ------------------------------------------------------------------


def _rotation_trig(degrees: float) -> tuple[float, float]:
    quarter = degrees / 90.0
    if quarter == round(quarter):
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(round(quarter)) % 4]
    rad = math.radians(degrees)
    return math.cos(rad), math.sin(rad)


def rotate_images(data: Dataset, degrees: float, side: int | None = None) -> Dataset:
    """Rotate square images counter-clockwise about their centre.

    Bilinear interpolation; samples falling outside the frame read as zero.
    """
    n, d = data.inputs.shape
    side = side if side is not None else math.isqrt(d)
    if side * side != d:
        raise ShapeError(f"{d} pixels do not form a {side}x{side} image")
    if not 0.0 <= degrees < 360.0:
        raise ValueError(f"degrees must be in [0, 360), got {degrees}")
    if degrees == 0.0:
        return data.with_inputs(data.inputs.copy())
    cos, sin = _rotation_trig(degrees)
    c = (side - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(side, dtype=np.float64), np.arange(side, dtype=np.float64), indexing="ij")
    # output pixel -> source location under the inverse rotation (y axis points up)
    x_out, y_out = cols - c, c - rows
    x_src = cos * x_out + sin * y_out
    y_src = -sin * x_out + cos * y_out
    src_r, src_c = (c - y_src).ravel(), (x_src + c).ravel()
    r0, c0 = np.floor(src_r), np.floor(src_c)
    fr, fc = src_r - r0, src_c - c0
    imgs = data.inputs
    out = np.zeros_like(imgs)
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = (r0 + dr).astype(np.int64), (c0 + dc).astype(np.int64)
        ok = (rr >= 0) & (rr < side) & (cc >= 0) & (cc < side) & (w != 0)
        out[:, ok] += imgs[:, rr[ok] * side + cc[ok]] * w[ok]
    return data.with_inputs(out)


def corrupt(data: Dataset, kind: str, severity: float, rng: np.random.Generator | None = None) -> Dataset:
    """Pixel-level corruption clipped to [0, 1]; the identity parameter returns an exact copy."""
    x = data.inputs
    if kind == "gaussian_noise":
        if severity < 0:
            raise ValueError("noise sigma must be >= 0")
        if severity == 0:
            return data.with_inputs(x.copy())
        if rng is None:
            raise ValueError("gaussian_noise needs an rng")
        out = x + severity * rng.standard_normal(x.shape)
    elif kind == "brightness":
        if severity == 0:
            return data.with_inputs(x.copy())
        out = x + severity
    elif kind == "contrast":
        if severity < 0:
            raise ValueError("contrast multiplier must be >= 0")
        if severity == 1:
            return data.with_inputs(x.copy())
        mean = x.mean(axis=1, keepdims=True)
        out = (x - mean) * severity + mean
    else:
        raise ValueError(f"unknown corruption {kind!r}")
    return data.with_inputs(np.clip(out, 0.0, 1.0))


@dataclass(frozen=True)
class ShiftSchedule:
    kind: str
    severities: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift {self.kind!r}")
        sev = tuple(float(s) for s in self.severities)
        if not sev:
            raise ValueError("schedule needs at least one severity")
        if sev[0] != _IDENTITY[self.kind]:
            raise ValueError(f"severity 0 of {self.kind} must be the identity {_IDENTITY[self.kind]}")
        object.__setattr__(self, "severities", sev)

    @classmethod
    def default(cls, kind: str) -> "ShiftSchedule":
        return cls(kind, DEFAULT_SEVERITIES[kind])

    def __len__(self) -> int:
        return len(self.severities)

    def apply(self, data: Dataset, level: int, rng: np.random.Generator | None = None) -> Dataset:
        param = self.severities[level]
        if self.kind == "rotation":
            return rotate_images(data, param)
        return corrupt(data, self.kind, param, rng)
