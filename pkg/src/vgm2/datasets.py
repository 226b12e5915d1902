"""Dataset loading: a built-in synthetic blob generator (classes may be
multi-modal), IDX-format image files, and a generic features+label CSV.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


def make_blobs(
    n_per_class: int,
    n_classes: int,
    modes_per_class: int = 1,
    dim: int = 8,
    center_spread: float = 6.0,
    mode_spread: float = 3.0,
    noise: float = 1.0,
    anchor_regions: int = 0,
    rng: np.random.Generator | None = None,
):
    """Gaussian blob classes; with modes_per_class > 1 each class is a union
    of separated blobs, giving multi-modal within-class distance geometry.

    With ``anchor_regions > 0`` the modes of all classes are placed on a
    shared set of region anchors (spread ``mode_spread``) plus a per-mode
    class offset of scale ``center_spread``; classes sharing a region are
    then confusable at short range while cross-region distances stay large,
    so within-class distances form well-separated bands.

    Samples are returned grouped by class with the modes shuffled inside
    each class block, so label-sorted shard cuts mix modes.
    """
    rng = rng or np.random.default_rng(0)
    if n_per_class % modes_per_class:
        raise DatasetError("n_per_class must be divisible by modes_per_class")
    xs, ys = [], []
    per_mode = n_per_class // modes_per_class
    if anchor_regions > 0:
        anchors = rng.normal(0.0, mode_spread, size=(anchor_regions, dim))
        centers = []
        for _ in range(n_classes):
            picks = rng.choice(anchor_regions, size=modes_per_class, replace=modes_per_class > anchor_regions)
            centers.append(anchors[picks] + rng.normal(0.0, center_spread, size=(modes_per_class, dim)))
    else:
        class_centers = rng.normal(0.0, center_spread, size=(n_classes, dim))
        centers = [
            class_centers[c] + rng.normal(0.0, mode_spread, size=(modes_per_class, dim)) for c in range(n_classes)
        ]
    for c in range(n_classes):
        block = np.concatenate([m + rng.normal(0.0, noise, size=(per_mode, dim)) for m in centers[c]])
        block = block[rng.permutation(len(block))]
        xs.append(block)
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def _open_maybe_gzip(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx(images_path, labels_path):
    """Read IDX-format image/label files (optionally gzipped); images are
    flattened and scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with _open_maybe_gzip(images_path) as fh:
        magic, n = struct.unpack(">II", fh.read(8))
        dtype_code, n_dims = (magic >> 8) & 0xFF, magic & 0xFF
        if dtype_code != 0x08 or n_dims < 1:
            raise DatasetError(f"unexpected IDX image magic {magic:#x} in {images_path}")
        dims = struct.unpack(f">{n_dims - 1}I", fh.read(4 * (n_dims - 1)))
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    x = data.reshape(n, -1).astype(np.float64) / 255.0
    if dims and x.shape[1] != int(np.prod(dims)):
        raise DatasetError("IDX image payload size mismatch")
    with _open_maybe_gzip(labels_path) as fh:
        magic, n_labels = struct.unpack(">II", fh.read(8))
        if magic != 2049:
            raise DatasetError(f"unexpected IDX label magic {magic:#x} in {labels_path}")
        y = np.frombuffer(fh.read(), dtype=np.uint8).astype(np.int64)
    if n_labels != n or len(y) != n:
        raise DatasetError("IDX image/label counts disagree")
    return x, y


def load_csv(path, label_column: str = "label", delimiter: str = ","):
    """CSV with a header row; every column except the label is a feature."""
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(delimiter)
    if label_column not in header:
        raise DatasetError(f"label column {label_column!r} not in {header}")
    label_idx = header.index(label_column)
    raw = np.genfromtxt(path, delimiter=delimiter, skip_header=1)
    if raw.ndim == 1:
        raw = raw.reshape(1, -1)
    if raw.shape[1] != len(header):
        raise DatasetError("row width disagrees with header")
    y = raw[:, label_idx].astype(np.int64)
    x = np.delete(raw, label_idx, axis=1).astype(np.float64)
    if np.isnan(x).any() or np.isnan(raw[:, label_idx]).any():
        raise DatasetError("CSV contains missing values")
    return x, y
