"""Datasets: the 9-Gaussian toy set, IDX (MNIST-format) ingestion and subsetting."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .csvio import write_csv
from .errors import FormatError, ParameterError

TOY_GRID = (-1.0, 0.0, 1.0)
TOY_MEANS = np.array([(x, y) for x in TOY_GRID for y in TOY_GRID])
TOY_VARIANCE = 0.1

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Samples plus optional labels.

    ``samples`` is [n, dim] for points and [n, H, W, C] for images, already
    in normalized units; ``norm_scale``/``norm_offset`` record the affine map
    raw -> normalized (``raw * scale + offset``).
    """

    samples: np.ndarray
    labels: np.ndarray | None = None
    modality: str = "points"
    norm_scale: float = 1.0
    norm_offset: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.modality not in ("points", "images"):
            raise ParameterError(f"unknown modality {self.modality!r}")
        if self.modality == "images" and (self.samples.ndim != 4 or 0 in self.samples.shape[1:]):
            raise ParameterError("image datasets need shape [n, H, W, C] with positive dims")
        if self.modality == "points" and self.samples.ndim != 2:
            raise ParameterError("point datasets need shape [n, dim]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.intp)
            if self.labels.shape != (len(self.samples),):
                raise ParameterError("labels length does not match sample count")

    def __len__(self):
        return len(self.samples)

    @property
    def dim(self):
        return int(np.prod(self.samples.shape[1:]))

    @property
    def image_shape(self):
        return self.samples.shape[1:] if self.modality == "images" else None

    @property
    def n_classes(self):
        return 0 if self.labels is None or not len(self.labels) else int(self.labels.max()) + 1

    def flat(self):
        return self.samples.reshape(len(self.samples), -1)

    def batch(self, index):
        """Flattened rows for ``index``; the trainer's only way to read real data."""
        return self.flat()[index]

    def batch_labels(self, index):
        if self.labels is None:
            raise ParameterError("dataset is unlabeled")
        return self.labels[index]

    def as_images(self, flat_rows):
        """Reshape flat rows (e.g. generator output) to this dataset's image shape."""
        return np.asarray(flat_rows).reshape((-1, *self.image_shape))

    def unlabeled(self):
        return Dataset(self.samples, None, self.modality, self.norm_scale, self.norm_offset)

    def denormalize(self, x):
        return (np.asarray(x) - self.norm_offset) / self.norm_scale

    def normalize(self, raw):
        return np.asarray(raw, dtype=np.float64) * self.norm_scale + self.norm_offset


def toy_mixture(variance=TOY_VARIANCE):
    """(means, covariances, weights) of the ground-truth toy distribution."""
    covs = np.stack([variance * np.eye(2)] * len(TOY_MEANS))
    return TOY_MEANS.copy(), covs, np.full(len(TOY_MEANS), 1.0 / len(TOY_MEANS))


def gen_toy(n, variance=TOY_VARIANCE, rng=None):
    """n points from the uniform 9-component grid mixture, labeled by component."""
    if n < 1:
        raise ParameterError("n must be at least 1")
    if variance < 0:
        raise ParameterError("variance must be non-negative")
    rng = np.random.default_rng() if rng is None else rng
    comps = rng.integers(0, len(TOY_MEANS), size=n)
    points = TOY_MEANS[comps] + np.sqrt(variance) * rng.standard_normal((n, 2))
    return Dataset(points, comps, "points")


def write_toy_csv(ds, path, seed=None, config=None):
    rows = ([float(x0), float(x1), int(lab)] for (x0, x1), lab in zip(ds.samples, ds.labels))
    write_csv(path, ["x0", "x1", "label"], rows, seed, config)


def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, want_magic, what):
    if len(raw) < 4:
        raise FormatError(f"{what} file too short for an IDX header", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != want_magic:
        raise FormatError(f"{what} file has magic 0x{magic:08x}, expected 0x{want_magic:08x}", 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{what} file truncated inside the dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    need = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header_end < need:
        raise FormatError(f"{what} file truncated: expected {need} data bytes, found "
                          f"{len(raw) - header_end}", len(raw))
    return dims, np.frombuffer(raw, dtype=np.uint8, count=need, offset=header_end)


def load_idx(images_path, labels_path=None):
    """Parse big-endian IDX files (optionally gzip'd); pixels map to x / 127.5 - 1."""
    dims, pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    n, rows, cols = dims
    if rows < 1 or cols < 1:
        raise FormatError("image dimensions must be positive", 8)
    labels = None
    if labels_path is not None:
        (count,), labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
        if count != n:
            raise FormatError(f"labels file holds {count} labels for {n} images", 4)
        labels = labels.astype(np.intp)
    samples = pixels.reshape(n, rows, cols, 1).astype(np.float64) / 127.5 - 1.0
    return Dataset(samples, labels, "images", 1.0 / 127.5, -1.0)


def subset(ds, per_class, seed):
    """Exactly ``per_class`` samples from every class, chosen reproducibly."""
    if ds.labels is None:
        raise ParameterError("subset needs a labeled dataset")
    if per_class < 0:
        raise ParameterError("per_class must be non-negative")
    rng = np.random.default_rng(seed)
    picked = []
    for cls in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == cls)
        if len(idx) < per_class:
            raise ParameterError(f"class {cls} has only {len(idx)} samples, {per_class} requested")
        picked.append(np.sort(rng.permutation(idx)[:per_class]))
    index = np.sort(np.concatenate(picked)) if picked else np.zeros(0, dtype=np.intp)
    return Dataset(ds.samples[index], ds.labels[index], ds.modality, ds.norm_scale, ds.norm_offset)
