"""Dataset IO, synthetic classification data, and the similarity partition.

The on-disk container is the classic big-endian IDX pair (images + labels).
Generated datasets are quantized to bytes before writing so a write/read
round trip is exact. Partitioning splits one labeled dataset into N client
shards where s% of each shard comes from a shuffled i.i.d. pool and the
rest from a label-sorted pool taken contiguously, which concentrates each
client on few labels as s shrinks.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .core import gaussians_from, rng_stream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

_BLOB_LOW = 60.0
_BLOB_HIGH = 195.0
_BLOB_NOISE = 18.0


def _read_exact(path: str, expected: int, payload: bytes) -> None:
    if len(payload) != expected:
        raise ValueError(f"truncated or oversized IDX file: {path} "
                         f"({len(payload)} bytes, expected {expected})")


def load_idx(images_path: str, labels_path: str) -> tuple[np.ndarray, np.ndarray]:
    """Load an IDX image/label pair; pixels are scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise ValueError(f"truncated or oversized IDX file: {images_path} "
                         f"({len(blob)} bytes, expected at least 16)")
    magic, count, rows, cols = struct.unpack(">IIII", blob[:16])
    if magic != IMAGE_MAGIC:
        raise ValueError(f"bad magic in image file {images_path}: 0x{magic:08x}")
    _read_exact(images_path, 16 + count * rows * cols, blob)
    features = np.frombuffer(blob, dtype=np.uint8, offset=16).astype(float) / 255.0
    features = features.reshape(count, rows * cols)

    with open(labels_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise ValueError(f"truncated or oversized IDX file: {labels_path} "
                         f"({len(blob)} bytes, expected at least 8)")
    magic, label_count = struct.unpack(">II", blob[:8])
    if magic != LABEL_MAGIC:
        raise ValueError(f"bad magic in label file {labels_path}: 0x{magic:08x}")
    _read_exact(labels_path, 8 + label_count, blob)
    labels = np.frombuffer(blob, dtype=np.uint8, offset=8).astype(np.int64)

    if count != label_count:
        raise ValueError(f"image/label count mismatch: {count} images, {label_count} labels")
    return features, labels


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".idx-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def save_idx(images_path: str, labels_path: str, features: np.ndarray, labels: np.ndarray) -> None:
    """Write features in [0, 1] and integer labels as an IDX pair.

    Features are stored as bytes (value * 255 rounded), one image row per
    sample, so loading returns the same values when the input is already
    byte-quantized.
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    if features.ndim != 2 or len(features) != len(labels):
        raise ValueError("features must be (n, d) with one label per row.")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("labels must fit in a byte.")
    pixels = np.clip(np.rint(features * 255.0), 0, 255).astype(np.uint8)
    header = struct.pack(">IIII", IMAGE_MAGIC, len(features), 1, features.shape[1])
    _atomic_write(images_path, header + pixels.tobytes())
    header = struct.pack(">II", LABEL_MAGIC, len(labels))
    _atomic_write(labels_path, header + labels.astype(np.uint8).tobytes())


def make_blobs(n_samples: int, n_classes: int, n_features: int, seed: int,
               stream_index: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic byte-quantized Gaussian blobs, one cluster per class.

    Class centers sit on distinct corners of a hypercube whose edge is far
    wider than the noise, so the classes are linearly separable with rare
    exceptions. Returned features lie in [0, 1] on the 1/255 grid. A
    different stream_index gives an independent draw for the same seed,
    which is how held-out sets are made.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1.")
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2.")
    if n_features < 1 or 2 ** min(n_features, 40) < n_classes:
        raise ValueError("n_features too small to separate n_classes clusters.")
    rng = rng_stream(seed, "partition", 0, stream_index)
    corners: list[tuple[int, ...]] = []
    used = set()
    attempts = 0
    while len(corners) < n_classes:
        bits = tuple(int(b) for b in rng.random(n_features) < 0.5)
        attempts += 1
        if attempts > 10000:
            raise ValueError("could not find distinct cluster corners; increase n_features.")
        if bits in used:
            continue
        used.add(bits)
        corners.append(bits)
    centers = _BLOB_LOW + (_BLOB_HIGH - _BLOB_LOW) * np.array(corners, dtype=float)
    labels = np.arange(n_samples, dtype=np.int64) % n_classes
    noise = gaussians_from(rng, n_samples * n_features, _BLOB_NOISE).reshape(n_samples, n_features)
    pixels = np.clip(np.rint(centers[labels] + noise), 0, 255)
    return pixels / 255.0, labels


def partition_indices(labels: np.ndarray, n_clients: int, similarity: float, seed: int) -> list[np.ndarray]:
    """Assign sample indices to clients under the similarity protocol.

    Each client's quota of round(s% * shard size) samples comes from a
    uniformly selected, shuffled pool; the rest are dealt contiguously from
    the remaining samples sorted by label (stable sort). Clients are indexed
    in the order they consume the sorted pool, so consecutive clients cover
    consecutive label ranges when s is small.
    """
    labels = np.asarray(labels)
    total = len(labels)
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1.")
    if n_clients > total:
        raise ValueError(f"cannot split {total} samples across {n_clients} clients.")
    if not 0 <= similarity <= 100:
        raise ValueError("similarity is a percentage in [0, 100].")

    base, extra = divmod(total, n_clients)
    sizes = [base + 1 if i < extra else base for i in range(n_clients)]
    quotas = [min(int(similarity / 100.0 * size + 0.5), size) for size in sizes]
    pool_size = sum(quotas)

    perm = rng_stream(seed, "partition", 0, 0).permutation(total)
    iid_pool = perm[:pool_size]
    rest = perm[pool_size:]
    sorted_pool = rest[np.argsort(labels[rest], kind="stable")]

    shards = []
    iid_at = 0
    sorted_at = 0
    for size, quota in zip(sizes, quotas):
        take_sorted = size - quota
        idx = np.concatenate([iid_pool[iid_at:iid_at + quota],
                              sorted_pool[sorted_at:sorted_at + take_sorted]])
        iid_at += quota
        sorted_at += take_sorted
        shards.append(idx.astype(np.int64))
    return shards


def partition_by_similarity(features: np.ndarray, labels: np.ndarray, n_clients: int,
                            similarity: float, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    shards = partition_indices(labels, n_clients, similarity, seed)
    return [(features[idx], labels[idx]) for idx in shards]


def label_histogram(shards: list[tuple[np.ndarray, np.ndarray]]) -> list[tuple[int, int, int]]:
    """(client, label, count) rows for every label present in each shard."""
    rows = []
    for client, (_, labels) in enumerate(shards):
        values, counts = np.unique(labels, return_counts=True)
        rows.extend((client, int(v), int(c)) for v, c in zip(values, counts))
    return rows
