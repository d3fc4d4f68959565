"""Datasets: IDX (MNIST / Fashion-MNIST) files and a synthetic generator."""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v).str[1:]: k for k, v in _IDX_DTYPES.items()}

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class Dataset:
    """Features ``x`` (n, d) as float64, integer labels ``y``."""

    x: np.ndarray
    y: np.ndarray
    class_count: int
    name: str
    sample_shape: tuple[int, ...] = ()

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError("features and labels differ in length")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")
        if not self.sample_shape:
            self.sample_shape = tuple(self.x.shape[1:])

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[indices], self.y[indices], self.class_count, self.name, self.sample_shape)

    def head(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return self.subset(np.arange(n))


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: str | os.PathLike) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: bad IDX magic")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise ValueError(f"{path}: unknown IDX type code 0x{code:02x}")
    dims = np.frombuffer(raw, dtype=">u4", count=ndim, offset=4).astype(int)
    dtype = _IDX_DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    body = raw[4 + 4 * ndim :]
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(tuple(dims)).astype(dtype.newbyteorder("="))


def write_idx(path: str | os.PathLike, array: np.ndarray) -> None:
    array = np.asarray(array)
    key = array.dtype.str[1:]
    if key not in _IDX_CODES:
        raise ValueError(f"dtype {array.dtype} has no IDX code")
    code = _IDX_CODES[key]
    header = bytes([0, 0, code, array.ndim]) + np.array(array.shape, dtype=">u4").tobytes()
    body = array.astype(_IDX_DTYPES[code]).tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + body)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_idx_dataset(
    directory: str | os.PathLike,
    name: str = "mnist",
    train_limit: int | None = None,
    test_limit: int | None = None,
) -> tuple[Dataset, Dataset]:
    """Load the standard train/test IDX quartet; pixels scaled to [0, 1]."""
    directory = Path(directory)
    arrays = {k: read_idx(_find(directory, v)) for k, v in MNIST_FILES.items()}
    out = []
    for split, limit in (("train", train_limit), ("test", test_limit)):
        images = arrays[f"{split}_images"]
        labels = arrays[f"{split}_labels"].astype(np.int64)
        if len(images) != len(labels):
            raise ValueError(f"{split}: image/label count mismatch")
        x = images.reshape(len(images), -1).astype(np.float64) / 255.0
        ds = Dataset(x, labels, 10, f"{name}-{split}", (1,) + tuple(images.shape[1:]))
        out.append(ds.head(limit))
    return out[0], out[1]


def make_synthetic(
    classes: int = 10,
    dims: int = 20,
    samples: int = 5000,
    seed: int = 0,
    test_samples: int = 1000,
    separation: float = 1.0,
    noise: float = 1.0,
) -> tuple[Dataset, Dataset]:
    """Gaussian class clusters around random centroids, balanced labels.

    Train and test share centroids but use disjoint draws.
    """
    rng = np.random.default_rng(seed)
    centroids = rng.normal(scale=separation, size=(classes, dims))

    def draw(n):
        y = np.arange(n) % classes
        rng.shuffle(y)
        x = centroids[y] + rng.normal(scale=noise, size=(n, dims))
        return x, y

    xtr, ytr = draw(samples)
    xte, yte = draw(test_samples)
    return (
        Dataset(xtr, ytr, classes, "synthetic-train"),
        Dataset(xte, yte, classes, "synthetic-test"),
    )


def mlxtend_mnist_csv() -> Path:
    """Location of the 5,000-digit MNIST sample bundled with ``mlxtend``."""
    import importlib.util

    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        raise FileNotFoundError("mlxtend is not installed (pip install mlxtend)")
    path = Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"
    if not path.exists():
        raise FileNotFoundError(path)
    return path


def export_mnist_subset(dest: str | os.PathLike, test_per_class: int = 100) -> Path:
    """Write mlxtend's MNIST sample as a standard IDX quartet under ``dest``.

    The last ``test_per_class`` images of every digit become the test split,
    so a 500-per-class source yields 4,000 train / 1,000 test.
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    table = np.loadtxt(mlxtend_mnist_csv(), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1].astype(np.uint8), table[:, -1].astype(np.uint8)
    test_mask = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        test_mask[idx[len(idx) - test_per_class :]] = True
    images = pixels.reshape(-1, 28, 28)
    write_idx(dest / MNIST_FILES["train_images"], images[~test_mask])
    write_idx(dest / MNIST_FILES["train_labels"], labels[~test_mask])
    write_idx(dest / MNIST_FILES["test_images"], images[test_mask])
    write_idx(dest / MNIST_FILES["test_labels"], labels[test_mask])
    return dest


if __name__ == "__main__":
    import sys

    out = export_mnist_subset(sys.argv[1] if len(sys.argv) > 1 else "data/mnist-subset")
    print(f"wrote IDX files to {out}")
