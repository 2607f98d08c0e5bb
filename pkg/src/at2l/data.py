"""Datasets: MNIST IDX files, synthetic 2-D problems, batching."""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IDXError(ValueError):
    """Malformed IDX file; the message names the byte offset."""


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray  # (N, *example_shape), float64 in [0, 1]
    y: np.ndarray  # (N,), int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} examples but {len(self.y)} labels")
        if self.x.size and (self.x.min() < 0.0 or self.x.max() > 1.0):
            raise ValueError("examples must lie in [0, 1]")
        if np.any(self.y < 0) or np.any(self.y >= self.num_classes):
            raise ValueError("labels out of range")
        if len(np.unique(self.y)) < 2:
            raise ValueError("a dataset needs at least two distinct labels")

    def __len__(self):
        return len(self.y)

    @property
    def example_shape(self):
        return self.x.shape[1:]

    def subset(self, index, split=None):
        index = np.asarray(index)
        return Dataset(self.x[index], self.y[index], self.num_classes, split or self.split)

    def head(self, n):
        return self.subset(np.arange(min(n, len(self))))


def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, magic, ndim, path):
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXError(f"{path}: truncated header at byte offset {len(raw)}")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IDXError(f"{path}: magic 0x{got:08x} at byte offset 0, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise IDXError(f"{path}: truncated payload, ends at byte offset {len(raw)}, expected {expected}")
    if len(raw) > expected:
        raise IDXError(f"{path}: {len(raw) - expected} trailing bytes after byte offset {expected}")
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header)


def read_idx_images(path):
    dims, pix = _parse_idx(_read_bytes(path), IMAGES_MAGIC, 3, path)
    return pix.reshape(dims)


def read_idx_labels(path):
    dims, lab = _parse_idx(_read_bytes(path), LABELS_MAGIC, 1, path)
    return lab.reshape(dims)


def encode_idx_images(images):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    return struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + images.tobytes()


def encode_idx_labels(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes()


def load_mnist_idx(images_path, labels_path, split="train"):
    """Load an IDX image/label pair as 28x28x1 examples scaled by 1/255."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IDXError(
            f"{labels_path}: count {len(labels)} at byte offset 4 does not match "
            f"{len(images)} images in {images_path}"
        )
    x = (images.astype(np.float64) / 255.0)[..., None]
    return Dataset(x, labels.astype(np.int64), 10, split)


def to_idx_bytes(ds):
    """Re-encode a dataset loaded from IDX: (images bytes, labels bytes)."""
    pix = np.rint(ds.x[..., 0] * 255.0).astype(np.uint8)
    return encode_idx_images(pix), encode_idx_labels(ds.y)


def save_mnist_idx(ds, images_path, labels_path):
    img, lab = to_idx_bytes(ds)
    for path, payload in ((images_path, img), (labels_path, lab)):
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "wb") as fh:
            fh.write(payload)


_CENTERS = {
    "two_gaussians": (np.array([[-1.0, 0.0], [1.0, 0.0]]), np.array([0, 1])),
    "four_gaussians": (np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]]), np.array([0, 1, 2, 3])),
    "xor": (np.array([[-1.0, -1.0], [1.0, 1.0], [-1.0, 1.0], [1.0, -1.0]]), np.array([0, 0, 1, 1])),
}


def synthetic_2d(kind, n, noise, seed, split="train"):
    """Gaussian blobs rescaled into the unit square.

    Clusters are filled round-robin, so class counts differ by at most one.
    """
    if kind not in _CENTERS:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if n < 4:
        raise ValueError("synthetic_2d needs n >= 4")
    centers, cluster_labels = _CENTERS[kind]
    rng = np.random.default_rng(seed)
    num_classes = int(cluster_labels.max()) + 1
    # round-robin over classes first, then over the clusters of that class
    cls = np.arange(n) % num_classes
    cluster = np.empty(n, dtype=np.int64)
    for c in range(num_classes):
        members = np.flatnonzero(cluster_labels == c)
        idx = np.flatnonzero(cls == c)
        cluster[idx] = members[np.arange(len(idx)) % len(members)]
    pts = centers[cluster] + noise * rng.standard_normal((n, 2))
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    # a degenerate axis (zero noise, collinear centers) maps to the midline
    x = np.where(hi > lo, (pts - lo) / span, 0.5)
    perm = rng.permutation(n)
    return Dataset(np.clip(x[perm], 0.0, 1.0), cls[perm].astype(np.int64), num_classes, split)


def batches(n_or_ds, k, rng):
    """Yield index arrays partitioning a shuffled epoch; the short tail is kept.

    ``rng`` is a seed or a ``numpy.random.Generator``.
    """
    n = n_or_ds if isinstance(n_or_ds, int) else len(n_or_ds)
    if k > n:
        raise ValueError(f"batch size {k} exceeds dataset size {n}")
    rng = np.random.default_rng(rng)
    perm = rng.permutation(n)
    for start in range(0, n, k):
        yield perm[start:start + k]


def stratified_split(y, per_class_test, seed):
    """Indices (train, test) with ``per_class_test`` test examples per class."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        test.append(idx[:per_class_test])
        train.append(idx[per_class_test:])
    return rng.permutation(np.concatenate(train)), rng.permutation(np.concatenate(test))
