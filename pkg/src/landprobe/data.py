"""Datasets: the CIFAR-10 binary format and seeded synthetic substitutes."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netcore import Batch

RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes (R, G, B planes, row-major)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


class FormatError(ValueError):
    pass


class CorruptionError(ValueError):
    pass


@dataclass
class Dataset:
    train: Batch
    test: Batch
    num_classes: int
    meta: dict = field(default_factory=dict)

    @property
    def input_shape(self) -> tuple:
        return self.train.inputs.shape[1:]


def read_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 ``.bin`` file into ``(images in [0, 1] of shape (N, 3, 32, 32), labels)``."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % RECORD:
        offset = (len(raw) // RECORD) * RECORD
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of {RECORD}; incomplete record at byte {offset}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise CorruptionError(f"{path}: label {labels[bad[0]]} >= 10 in record {bad[0]} (byte {bad[0] * RECORD})")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def write_cifar10_batch(path, images_u8, labels) -> None:
    """Write records in the CIFAR-10 binary layout (used for fixtures)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(-1, 3 * 32 * 32)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    Path(path).write_bytes(np.hstack([labels, images_u8]).tobytes())


def load_cifar10(directory=None, subset: int | None = None) -> Dataset:
    """Load the five training batches and the test batch.

    ``directory`` defaults to ``$PROBE_DATA_DIR``. Everything is parsed before
    anything is returned, so a bad file never yields a partial dataset.
    """
    directory = Path(directory or os.environ.get("PROBE_DATA_DIR", "."))
    missing = [f for f in TRAIN_FILES + (TEST_FILE,) if not (directory / f).exists()]
    if missing:
        raise FileNotFoundError(f"{directory}: missing {', '.join(missing)}")
    parts = [read_cifar10_batch(directory / f) for f in TRAIN_FILES]
    x_test, y_test = read_cifar10_batch(directory / TEST_FILE)
    x_train = np.concatenate([p[0] for p in parts])
    y_train = np.concatenate([p[1] for p in parts])
    if subset is not None:
        x_train, y_train = x_train[:subset], y_train[:subset]
    return Dataset(Batch(x_train, y_train, 10), Batch(x_test, y_test, 10), 10, {"source": str(directory)})


def _stratified_split(x, y, classes, rng, train_frac=0.8):
    train_idx, test_idx = [], []
    for c in range(classes):
        idx = rng.permutation(np.flatnonzero(y == c))
        k = int(round(train_frac * idx.size))
        train_idx.append(idx[:k])
        test_idx.append(idx[k:])
    tr = rng.permutation(np.concatenate(train_idx))
    te = rng.permutation(np.concatenate(test_idx))
    return Batch(x[tr], y[tr], classes), Batch(x[te], y[te], classes)


def synth_dataset(classes: int, dim: int, per_class: int, separation: float, seed: int = 0, clusters: int = 1,
                  noise: float = 1.0, shape: tuple | None = None) -> Dataset:
    """Gaussian blobs with an 80/20 per-class split.

    With ``clusters == 1`` the class means are ``separation`` apart
    (orthogonal directions when ``dim >= classes``). With more clusters each
    class is a mixture of blobs at random centres of scale ``separation``,
    which a linear classifier cannot separate.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    if clusters == 1:
        if dim >= classes:
            q, _ = np.linalg.qr(rng.standard_normal((dim, classes)))
            means = q.T[:, None, :] * (separation / np.sqrt(2))
        else:
            d = rng.standard_normal((classes, dim))
            means = (d / np.linalg.norm(d, axis=1, keepdims=True))[:, None, :] * (separation / 2)
    else:
        means = rng.standard_normal((classes, clusters, dim)) * (separation / np.sqrt(2))
    y = np.repeat(np.arange(classes), per_class)
    which = rng.integers(0, clusters, y.size)
    x = means[y, which] + noise * rng.standard_normal((y.size, dim))
    if shape is not None:
        x = x.reshape((-1,) + tuple(shape))
    train, test = _stratified_split(x, y, classes, rng)
    meta = {"kind": "synthetic", "classes": classes, "dim": dim, "per_class": per_class, "separation": separation,
            "seed": seed, "clusters": clusters, "noise": noise}
    return Dataset(train, test, classes, meta)


def synth_images(classes: int, shape=(3, 8, 8), per_class: int = 50, noise: float = 0.15, seed: int = 0) -> Dataset:
    """Image-shaped data in [0, 1]: a smooth random template per class plus pixel noise."""
    rng = np.random.default_rng(seed)
    c, h, w = shape
    coarse = rng.uniform(0.2, 0.8, (classes, c, max(h // 2, 1), max(w // 2, 1)))
    templates = coarse.repeat(2, axis=2).repeat(2, axis=3)[:, :, :h, :w]
    y = np.repeat(np.arange(classes), per_class)
    x = np.clip(templates[y] + noise * rng.standard_normal((y.size, c, h, w)), 0.0, 1.0)
    train, test = _stratified_split(x, y, classes, rng)
    meta = {"kind": "synthetic_images", "classes": classes, "shape": list(shape), "per_class": per_class,
            "noise": noise, "seed": seed}
    return Dataset(train, test, classes, meta)


def normalize(ds: Dataset, mode: str = "none") -> Dataset:
    """``none`` leaves pixels alone; ``standardize`` uses per-channel train mean/std."""
    if mode == "none":
        return ds
    if mode != "standardize":
        raise ValueError(f"unknown normalization {mode!r}")
    x = ds.train.inputs
    axes = (0,) + tuple(range(2, x.ndim))
    mean = x.mean(axes, keepdims=True)
    std = x.std(axes, keepdims=True) + 1e-12
    tr = Batch((x - mean) / std, ds.train.labels, ds.num_classes)
    te = Batch((ds.test.inputs - mean) / std, ds.test.labels, ds.num_classes)
    return Dataset(tr, te, ds.num_classes, dict(ds.meta, normalization="standardize"))
