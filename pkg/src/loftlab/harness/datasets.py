"""Dataset generators and readers.

Every loader returns a [`Dataset`][loftlab.harness.datasets.Dataset] of images shaped
`(n, d_hat, h, w)`. Synthetic sources draw everything from the generator they are given, so the
same seed always yields the same dataset.
"""

import os
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, FormatError
from ..tensor import KERNEL_SIZE, normalize_dataset
from ..util import Logger

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    """Training and held-out samples.

    Attributes:
        X (np.ndarray): Training images `(n_train, d_hat, h, w)`.
        y (np.ndarray): Training labels, integer classes or real targets.
        X_test (np.ndarray): Held-out images, possibly empty.
        y_test (np.ndarray): Held-out labels.
    """
    X: np.ndarray
    y: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray

    @property
    def train(self):
        return self.X, self.y

    @property
    def test(self):
        return self.X_test, self.y_test


def synthetic_theory(spec, q, rng):
    """Gaussian images scaled to norm `q ** -0.5` with labels uniform in `[-C, C]`."""
    X = rng.standard_normal((spec.n, spec.d_hat, spec.h, spec.w))
    X = np.stack(normalize_dataset(X, q))
    y = rng.uniform(-spec.label_bound, spec.label_bound, size=spec.n)
    return X, y


def synthetic_images(spec, rng):
    """Noisy periodic textures, one texture per class.

    Class `k` owns a random `3 x 3` motif per channel tiled over the image. Every sample shows
    its class texture at a random phase, plus Gaussian noise of standard deviation `spec.noise`.
    Classes are balanced.
    """
    K, c, h, w = spec.num_classes, spec.d_hat, spec.h, spec.w
    motifs = rng.standard_normal((K, c, KERNEL_SIZE, KERNEL_SIZE))
    motifs /= motifs.std(axis=(1, 2, 3), keepdims=True)
    reps = (1, 1, -(-h // KERNEL_SIZE) + 1, -(-w // KERNEL_SIZE) + 1)
    textures = np.tile(motifs, reps)
    y = rng.permutation(np.arange(spec.n) % K)
    shifts = rng.integers(KERNEL_SIZE, size=(spec.n, 2))
    X = np.stack([textures[label, :, dy:dy + h, dx:dx + w] for label, (dy, dx) in zip(y, shifts)])
    X = X + spec.noise * rng.standard_normal(X.shape)
    return X, y.astype(np.int64)


def read_idx(path, expected_magic):
    """Read an unsigned-byte IDX file.

    Args:
        path (str): File path.
        expected_magic (int): `0x00000803` for images, `0x00000801` for labels.

    Returns:
        (np.ndarray): The array with the dimensions of the header.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"The file '{path}' does not exist.")
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise FormatError(f"'{path}' is too short to be an IDX file.")
    magic = int(np.frombuffer(data, dtype=">u4", count=1)[0])
    if magic != expected_magic:
        raise FormatError(f"'{path}' has IDX magic {magic:#010x}, expected {expected_magic:#010x}.")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"'{path}' has a truncated IDX header.")
    dims = tuple(int(d) for d in np.frombuffer(data, dtype=">u4", count=ndim, offset=4))
    payload = np.frombuffer(data, dtype=np.uint8, offset=header)
    if payload.size != int(np.prod(dims)):
        raise FormatError(f"'{path}' holds {payload.size} bytes of data, header declares {dims}.")
    return payload.reshape(dims)


def load_idx(spec):
    """Images scaled to `[0, 1]` and integer labels from a pair of IDX files."""
    images = read_idx(spec.images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(spec.labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels.")
    if spec.d_hat != 1 or images.shape[1:] != (spec.h, spec.w):
        raise ConfigError(f"IDX images are {images.shape[1:]}, dataset declares {(spec.d_hat, spec.h, spec.w)}.", field="h")
    return images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64)


def load_csv(spec, integer_labels=True):
    """Samples from a CSV file: label first, then `d_hat * h * w` values. A header line is skipped."""
    if not os.path.exists(spec.csv_path):
        raise FileNotFoundError(f"The file '{spec.csv_path}' does not exist.")
    try:
        table = np.atleast_2d(np.genfromtxt(spec.csv_path, delimiter=",", dtype=np.float64))
    except ValueError as e:
        raise FormatError(f"'{spec.csv_path}' is not a rectangular numeric table: {e}") from e
    if len(table) and np.all(np.isnan(table[0])):
        table = table[1:]
    if np.isnan(table).any():
        raise FormatError(f"'{spec.csv_path}' contains non-numeric values.")
    width = spec.d_hat * spec.h * spec.w
    if table.shape[1] != width + 1:
        raise ConfigError(f"'{spec.csv_path}' has {table.shape[1] - 1} values per sample, dataset declares {width}.", field="w")
    X = table[:, 1:].reshape(-1, spec.d_hat, spec.h, spec.w)
    y = table[:, 0]
    if integer_labels:
        if np.any(y != np.round(y)):
            raise FormatError(f"'{spec.csv_path}' has non-integer class labels.")
        y = y.astype(np.int64)
    return X, y


def split(X, y, test_fraction, rng):
    """Shuffle and hold out `round(test_fraction * n)` samples."""
    order = rng.permutation(len(X))
    n_test = int(round(test_fraction * len(X)))
    test, train = order[:n_test], order[n_test:]
    return Dataset(X[train], y[train], X[test], y[test])


def load_dataset(spec, rng, q=9):
    """Load or generate the dataset described by `spec`.

    Theory data (`synthetic_theory`, or any source with `normalize`) is never split.

    Args:
        spec (DatasetSpec): What to load.
        rng (np.random.Generator): Generator for synthetic data and the split.
        q (int): Patch size used for normalization.

    Returns:
        (Dataset): The data.
    """
    theory = spec.source == "synthetic_theory"
    if theory:
        X, y = synthetic_theory(spec, q, rng)
    elif spec.source == "synthetic_images":
        X, y = synthetic_images(spec, rng)
    elif spec.source == "idx_files":
        X, y = load_idx(spec)
    else:
        X, y = load_csv(spec, integer_labels=not spec.normalize)

    if len(X) < spec.n:
        raise ConfigError(f"Dataset has {len(X)} samples, {spec.n} requested.", field="n")
    X, y = X[:spec.n], y[:spec.n]
    if X.shape[1:] != (spec.d_hat, spec.h, spec.w):
        raise ConfigError(f"Samples have shape {X.shape[1:]}, dataset declares {(spec.d_hat, spec.h, spec.w)}.", field="d_hat")
    if not theory and not spec.normalize and np.any((y < 0) | (y >= spec.num_classes)):
        raise ConfigError(f"Labels fall outside [0, {spec.num_classes}).", field="num_classes")
    Logger.debug(f"Loaded {spec.source}: X {X.shape}, y {y.shape}")

    if theory or spec.normalize:
        if not theory:
            X = np.stack(normalize_dataset(X, q))
        empty = np.zeros((0,) + X.shape[1:])
        return Dataset(X, y, empty, y[:0])
    return split(X, y, spec.test_fraction, rng)
