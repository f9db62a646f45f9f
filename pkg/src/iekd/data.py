"""Synthetic datasets and IDX / CSV ingestion.

IDX layout (big-endian): two zero bytes, a type code byte (0x08 ubyte,
0x0E float64, ...), a byte giving the number of dimensions, one uint32 per
dimension, then the row-major payload.

CSV layout: header ``label,x0,x1,...``; one sample per row.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidRecipe, MalformedFile


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    recipe: str = "custom"
    seed: Optional[int] = None
    params: dict = field(default_factory=dict)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])

    def identity(self) -> dict:
        return {"recipe": self.recipe, "seed": self.seed, "params": self.params, "sha256": self.digest()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.x_train, self.y_train, self.x_test, self.y_test):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def subset(self, n_train: int, n_test: Optional[int] = None) -> "Dataset":
        n_test = self.x_test.shape[0] if n_test is None else n_test
        params = dict(self.params, n_train=n_train, n_test=n_test)
        return Dataset(self.x_train[:n_train], self.y_train[:n_train], self.x_test[:n_test],
                       self.y_test[:n_test], self.num_classes, self.recipe, self.seed, params)


# --- synthetic recipes -------------------------------------------------------


def _gaussian(h: int, w: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))


def _blobs_prototypes(rng, k: int, c: int, h: int, w: int) -> tuple:
    """Per-class coarse layouts (two broad blobs) and fine textures (gratings)."""
    coarse = np.zeros((k, c, h, w))
    fine = []
    for cls in range(k):
        for ch in range(c):
            for _ in range(2):
                cy, cx = rng.uniform(0.25 * h, 0.75 * h), rng.uniform(0.25 * w, 0.75 * w)
                coarse[cls, ch] += rng.choice([-1.0, 1.0]) * _gaussian(h, w, cy, cx, h / 6)
        theta = np.pi * cls / k + rng.uniform(0, np.pi / (2 * k))
        period = rng.uniform(2.5, 4.0)
        fine.append((theta, period))
    coarse /= np.abs(coarse).max(axis=(2, 3), keepdims=True)
    return coarse, fine


def _blobs_images(rng, labels, coarse, fine, shift: int, noise: float):
    n = labels.shape[0]
    k, c, h, w = coarse.shape
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.empty((n, c, h, w))
    for i, y in enumerate(labels):
        dy, dx = rng.integers(-shift, shift + 1, 2)
        base = np.roll(coarse[y], (dy, dx), axis=(1, 2))
        theta, period = fine[y]
        phase = rng.uniform(0, 2 * np.pi)
        grating = np.cos(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period + phase)
        # localized texture patch so the fine cue is a part, not the whole image
        py, px = rng.uniform(0.3 * h, 0.7 * h), rng.uniform(0.3 * w, 0.7 * w)
        patch = grating * _gaussian(h, w, py, px, h / 5)
        a, b = rng.uniform(0.0, 1.0), rng.uniform(0.2, 1.0)
        img = a * base + b * patch + noise * rng.standard_normal((c, h, w))
        out[i] = np.clip(0.5 + 0.35 * img, 0.0, 1.0)
    return out


def blobs_img(seed: int, n_train: int, n_test: int, num_classes: int = 3, shape=(1, 16, 16),
              shift: int = 2, noise: float = 0.6) -> Dataset:
    rng = np.random.default_rng(seed)
    c, h, w = shape
    coarse, fine = _blobs_prototypes(rng, num_classes, c, h, w)
    y_train = rng.integers(0, num_classes, n_train)
    y_test = rng.integers(0, num_classes, n_test)
    x_train = _blobs_images(rng, y_train, coarse, fine, shift, noise)
    x_test = _blobs_images(rng, y_test, coarse, fine, shift, noise)
    params = {"n_train": n_train, "n_test": n_test, "num_classes": num_classes, "shape": list(shape),
              "shift": shift, "noise": noise}
    return Dataset(x_train, y_train, x_test, y_test, num_classes, "blobs-img", seed, params)


def _spiral(rng, n: int, k: int, noise: float):
    labels = rng.integers(0, k, n)
    t = rng.uniform(0.0, 1.0, n)
    r = 0.1 + 0.9 * t
    angle = 2 * np.pi * labels / k + 3.0 * np.pi * t
    pts = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
    return pts + noise * rng.standard_normal((n, 2)), labels


def spiral_2d(seed: int, n_train: int, n_test: int, num_classes: int = 3, noise: float = 0.02) -> Dataset:
    rng = np.random.default_rng(seed)
    x_train, y_train = _spiral(rng, n_train, num_classes, noise)
    x_test, y_test = _spiral(rng, n_test, num_classes, noise)
    params = {"n_train": n_train, "n_test": n_test, "num_classes": num_classes, "noise": noise}
    return Dataset(x_train, y_train, x_test, y_test, num_classes, "spiral-2d", seed, params)


RECIPES = {"blobs-img": blobs_img, "spiral-2d": spiral_2d}


def generate_synthetic(recipe: str, seed: int, n_train: int, n_test: int, num_classes: int = 3, **kw) -> Dataset:
    if recipe not in RECIPES:
        raise InvalidRecipe(f"unknown recipe {recipe!r}; choose from {sorted(RECIPES)}")
    if n_train <= 0 or n_test <= 0:
        raise InvalidRecipe("dataset sizes must be positive")
    if num_classes < 2:
        raise InvalidRecipe("need at least two classes")
    return RECIPES[recipe](seed, n_train, n_test, num_classes, **kw)


# --- IDX ---------------------------------------------------------------------

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype.kind in "iu" and arr.size and arr.min() >= 0 and arr.max() < 256:
        code, payload = 0x08, arr.astype(">u1")
    else:
        code, payload = 0x0E, arr.astype(">f8")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(payload.tobytes())


def read_idx(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise MalformedFile("file shorter than the IDX magic", len(blob))
    if blob[0] != 0 or blob[1] != 0:
        raise MalformedFile("bad IDX magic (first two bytes must be zero)", 0)
    code, ndim = blob[2], blob[3]
    if code not in _IDX_TYPES:
        raise MalformedFile(f"unknown IDX type code 0x{code:02x}", 2)
    if ndim == 0:
        raise MalformedFile("IDX file declares zero dimensions", 3)
    if len(blob) < 4 + 4 * ndim:
        raise MalformedFile("truncated IDX dimension header", len(blob))
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    dtype = _IDX_TYPES[code]
    start = 4 + 4 * ndim
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(blob) - start != expected:
        raise MalformedFile(f"payload has {len(blob) - start} bytes, dims imply {expected}", start)
    return np.frombuffer(blob, dtype=dtype, offset=start).reshape(dims).astype(dtype.newbyteorder("="))


def _scale_pixels(x: np.ndarray) -> np.ndarray:
    if x.dtype == np.uint8:
        return x.astype(np.float64) / 255.0
    x = x.astype(np.float64)
    if x.size and x.max() > 1.0:
        return x / 255.0
    return x


def load_idx(images_path, labels_path) -> tuple:
    """Read an (images, labels) IDX pair; pixel data scaled to [0, 1]."""
    images, labels = read_idx(images_path), read_idx(labels_path)
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise MalformedFile("labels must be a vector matching the image count", 3)
    if images.ndim == 3:
        images = images[:, None]
    return _scale_pixels(images), labels.astype(np.int64)


def save_dataset_idx(ds: Dataset, directory) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split in ("train", "test"):
        x, y = getattr(ds, f"x_{split}"), getattr(ds, f"y_{split}")
        paths[f"{split}_images"] = d / f"{split}-images.idx"
        paths[f"{split}_labels"] = d / f"{split}-labels.idx"
        write_idx(paths[f"{split}_images"], x)
        write_idx(paths[f"{split}_labels"], y)
    return paths


def load_dataset_idx(directory, num_classes: Optional[int] = None) -> Dataset:
    d = Path(directory)
    x_train, y_train = load_idx(d / "train-images.idx", d / "train-labels.idx")
    x_test, y_test = load_idx(d / "test-images.idx", d / "test-labels.idx")
    k = num_classes or int(max(y_train.max(), y_test.max())) + 1
    return Dataset(x_train, y_train, x_test, y_test, k, "idx", None, {"path": str(d)})


# --- CSV ---------------------------------------------------------------------


def write_csv(path, x: np.ndarray, y: np.ndarray) -> None:
    flat = x.reshape(x.shape[0], -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"x{i}" for i in range(flat.shape[1])])
        for label, row in zip(y, flat):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def load_csv(path, sample_shape: Optional[tuple] = None) -> tuple:
    """Read ``label,x0,...`` rows; values above 1 are treated as 0..255 pixels."""
    raw = Path(path).read_bytes()
    lines = raw.splitlines(keepends=True)
    if not lines:
        raise MalformedFile("empty CSV file", 0)
    header = lines[0].decode().strip().split(",")
    if header[0] != "label" or header[1:] != [f"x{i}" for i in range(len(header) - 1)] or len(header) < 2:
        raise MalformedFile("CSV header must be label,x0,x1,...", 0)
    width = len(header) - 1
    labels, rows = [], []
    offset = len(lines[0])
    for line in lines[1:]:
        text = line.decode().strip()
        if text:
            fields = text.split(",")
            if len(fields) != width + 1:
                raise MalformedFile(f"expected {width + 1} fields, got {len(fields)}", offset)
            try:
                labels.append(int(fields[0]))
                rows.append([float(v) for v in fields[1:]])
            except ValueError as exc:
                raise MalformedFile(f"unparseable value: {exc}", offset) from exc
        offset += len(line)
    x = _scale_pixels(np.array(rows, dtype=np.float64).reshape(len(rows), width))
    if sample_shape is not None:
        x = x.reshape((len(rows),) + tuple(sample_shape))
    return x, np.array(labels, dtype=np.int64)
