"""Datasets: synthetic blobs/spirals/patterns, CIFAR binary batches, Netpbm folders.

All inputs live in [0, 1] so the PGD clip range applies unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import io
from ..seeding import stream

CIFAR_IMAGE_BYTES = 3072


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    name: str = ""

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x_train.shape[1:])


def balanced_indices(labels: np.ndarray, size: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """``size // C`` random indices per class, returned sorted."""
    if size % num_classes:
        raise DatasetError(f"subset size {size} is not divisible by {num_classes} classes")
    k = size // num_classes
    picks = []
    for c in range(num_classes):
        pool = np.flatnonzero(labels == c)
        if len(pool) < k:
            raise DatasetError(f"class {c} has {len(pool)} samples, {k} requested")
        picks.append(rng.choice(pool, size=k, replace=False))
    return np.sort(np.concatenate(picks))


# -- synthetic ----------------------------------------------------------------


def blob_means(num_classes: int, dim: int, margin: float, rng: np.random.Generator) -> np.ndarray:
    """Class centres around 0.5 with pairwise distance ``margin``."""
    if num_classes == 2:
        u = rng.standard_normal(dim)
        u /= np.linalg.norm(u)
        return 0.5 + np.stack([-0.5 * margin * u, 0.5 * margin * u])
    if num_classes > dim:
        raise DatasetError("blobs need dim >= num_classes")
    q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
    return 0.5 + (margin / np.sqrt(2.0)) * q.T


def _blobs(n, means, std, rng):
    C, dim = means.shape
    if n % C:
        raise DatasetError(f"{n} samples cannot be split evenly over {C} classes")
    y = np.repeat(np.arange(C), n // C)
    x = np.clip(means[y] + std * rng.standard_normal((n, dim)), 0.0, 1.0)
    perm = rng.permutation(n)
    return x[perm], y[perm]


def gen_blobs(n_train: int, n_test: int, num_classes: int = 2, dim: int = 16,
              margin: float = 1.0, std: float = 0.1, seed: int = 0) -> Dataset:
    means = blob_means(num_classes, dim, margin, stream(seed, "data", "means"))
    xtr, ytr = _blobs(n_train, means, std, stream(seed, "data", "train"))
    xte, yte = _blobs(n_test, means, std, stream(seed, "data", "test"))
    return Dataset(xtr, ytr, xte, yte, num_classes, "blobs")


def _spirals(n, C, noise, rng):
    if n % C:
        raise DatasetError(f"{n} samples cannot be split evenly over {C} classes")
    k = n // C
    y = np.repeat(np.arange(C), k)
    t = np.tile(np.linspace(0.1, 1.0, k), C)
    angle = 3.0 * np.pi * t + 2.0 * np.pi * y / C + noise * rng.standard_normal(n)
    x = 0.5 + 0.45 * np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)
    perm = rng.permutation(n)
    return np.clip(x, 0, 1)[perm], y[perm]


def gen_spirals(n_train: int, n_test: int, num_classes: int = 2, noise: float = 0.1, seed: int = 0) -> Dataset:
    xtr, ytr = _spirals(n_train, num_classes, noise, stream(seed, "data", "train"))
    xte, yte = _spirals(n_test, num_classes, noise, stream(seed, "data", "test"))
    return Dataset(xtr, ytr, xte, yte, num_classes, "spirals")


def _templates(num_classes, shape, rng):
    c, h, w = shape
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    out = np.zeros((num_classes, c, h, w))
    for k in range(num_classes):
        for ch in range(c):
            out[k, ch] += 3.0 * rng.uniform(-1, 1)  # class colour cast
            for _ in range(3):
                fx, fy = rng.uniform(0.5, 3.0, 2)
                phase = rng.uniform(0, 2 * np.pi)
                out[k, ch] += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        out[k] /= np.abs(out[k]).max()
    return out


def gen_patterns(n_train: int, n_test: int, num_classes: int = 2, image_shape=(3, 16, 16),
                 amplitude: float = 0.2, noise: float = 0.15, seed: int = 0) -> Dataset:
    """Class-specific colour casts and low-frequency textures under pixel noise; a small image stand-in."""
    templates = _templates(num_classes, tuple(image_shape), stream(seed, "data", "templates"))

    def draw(n, rng):
        if n % num_classes:
            raise DatasetError(f"{n} samples cannot be split evenly over {num_classes} classes")
        y = np.repeat(np.arange(num_classes), n // num_classes)
        scale = rng.uniform(0.5, 1.5, size=(n, 1, 1, 1))
        x = 0.5 + amplitude * scale * templates[y] + noise * rng.standard_normal((n, *image_shape))
        perm = rng.permutation(n)
        return np.clip(x, 0, 1)[perm], y[perm]

    xtr, ytr = draw(n_train, stream(seed, "data", "train"))
    xte, yte = draw(n_test, stream(seed, "data", "test"))
    return Dataset(xtr, ytr, xte, yte, num_classes, "patterns")


# -- CIFAR binary -------------------------------------------------------------


def parse_cifar_records(raw: bytes, label_bytes: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Decode CIFAR binary records into (images [N, 3, 32, 32] in [0, 1], labels).

    CIFAR-10 records are 1 label byte + 3072 pixel bytes; CIFAR-100 records
    carry a coarse and a fine label byte (the fine label is used).
    """
    rec = label_bytes + CIFAR_IMAGE_BYTES
    if len(raw) == 0 or len(raw) % rec:
        raise DatasetError(f"malformed CIFAR batch: {len(raw)} bytes is not a multiple of {rec}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    images = arr[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def _read_batches(files, label_bytes):
    xs, ys = zip(*(parse_cifar_records(Path(f).read_bytes(), label_bytes) for f in files))
    return np.concatenate(xs), np.concatenate(ys)


def find_cifar10(path) -> tuple[list[Path], list[Path]]:
    root = Path(path)
    for cand in (root, root / "cifar-10-batches-bin"):
        train = sorted(cand.glob("data_batch_*.bin"))
        test = sorted(cand.glob("test_batch.bin"))
        if train and test:
            return train, test
    raise DatasetError(f"no CIFAR-10 binary batches under {root}")


def load_cifar10_bin(path, subset: int, seed: int = 0, classes=None, test_subset: int | None = None,
                     label_bytes: int = 1) -> Dataset:
    """Class-balanced subsets of the CIFAR binary batches.

    ``classes`` restricts to a subset of labels, relabelled 0..k-1 in the
    given order.
    """
    train_files, test_files = find_cifar10(path)
    xtr, ytr = _read_batches(train_files, label_bytes)
    xte, yte = _read_batches(test_files, label_bytes)
    if classes is not None:
        classes = [int(c) for c in classes]
        remap = {c: i for i, c in enumerate(classes)}
        keep_tr = np.isin(ytr, classes)
        keep_te = np.isin(yte, classes)
        xtr, ytr = xtr[keep_tr], np.array([remap[c] for c in ytr[keep_tr]])
        xte, yte = xte[keep_te], np.array([remap[c] for c in yte[keep_te]])
        num_classes = len(classes)
    else:
        num_classes = int(max(ytr.max(), yte.max())) + 1
    tr = balanced_indices(ytr, subset, num_classes, stream(seed, "subset", "train"))
    te = balanced_indices(yte, test_subset or min(subset, len(yte) - len(yte) % num_classes),
                          num_classes, stream(seed, "subset", "test"))
    return Dataset(xtr[tr], ytr[tr], xte[te], yte[te], num_classes, "cifar10")


def load_image_dir(path, test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Netpbm images under ``path/<class index>/``, split into train/test per class."""
    root = Path(path)
    class_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: int(d.name))
    if not class_dirs:
        raise DatasetError(f"no class directories under {root}")
    rng = stream(seed, "data", "split")
    parts = {"train": ([], []), "test": ([], [])}
    for c, d in enumerate(class_dirs):
        files = sorted(list(d.glob("*.pgm")) + list(d.glob("*.ppm")))
        imgs = [io.read_netpbm(f) for f in files]
        order = rng.permutation(len(imgs))
        n_test = int(round(test_fraction * len(imgs)))
        for rank, i in enumerate(order):
            split = "test" if rank < n_test else "train"
            parts[split][0].append(imgs[i])
            parts[split][1].append(c)
    return Dataset(
        np.stack(parts["train"][0]), np.array(parts["train"][1]),
        np.stack(parts["test"][0]), np.array(parts["test"][1]),
        len(class_dirs), "image_dir",
    )
