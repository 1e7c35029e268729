"""Datasets for the FL simulator: label-skewed clients plus per-label public shards.

The attacker's public data (one shard per label) and the accuracy test set are
drawn from the same distribution as the client data.
"""

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class Client:
    user_id: int
    x: np.ndarray
    y: np.ndarray
    labels: frozenset


@dataclass
class Dataset:
    clients: list
    public: dict  # label -> features held by the server
    test_x: np.ndarray
    test_y: np.ndarray
    n_labels: int

    @property
    def n_features(self):
        return self.test_x.shape[1]

    def truth(self):
        return {c.user_id: set(c.labels) for c in self.clients}


def _assign_labels(n_users, n_labels, labels_per_client, rng):
    if not 1 <= labels_per_client <= n_labels:
        raise ValueError("labels_per_client must be in [1, n_labels]")
    return [frozenset(rng.choice(n_labels, labels_per_client, replace=False).tolist()) for _ in range(n_users)]


def _split_counts(total, parts):
    base = [total // parts] * parts
    for i in range(total % parts):
        base[i] += 1
    return base


def make_synthetic_dataset(
    n_users,
    rng,
    n_labels=10,
    labels_per_client=2,
    n_features=32,
    samples_per_client=40,
    test_per_label=100,
    separation=1.0,
):
    """Gaussian clusters: one mean per label (entries ~ N(0, separation^2)), unit noise."""
    means = rng.normal(0.0, separation, (n_labels, n_features))

    def draw(label, count):
        return (means[label] + rng.normal(0.0, 1.0, (count, n_features))).astype(np.float32)

    clients = []
    for uid, labels in enumerate(_assign_labels(n_users, n_labels, labels_per_client, rng)):
        ordered = sorted(labels)
        xs, ys = [], []
        for label, count in zip(ordered, _split_counts(samples_per_client, len(ordered))):
            xs.append(draw(label, count))
            ys.append(np.full(count, label))
        clients.append(Client(uid, np.concatenate(xs), np.concatenate(ys), labels))
    public = {label: draw(label, test_per_label) for label in range(n_labels)}
    test_x = np.concatenate([draw(label, test_per_label) for label in range(n_labels)])
    test_y = np.repeat(np.arange(n_labels), test_per_label)
    return Dataset(clients, public, test_x, test_y, n_labels)


def read_idx(path):
    """Read an IDX file (optionally gzipped): unsigned-byte images or labels."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_LABELS:
        (n,) = struct.unpack(">I", raw[4:8])
        return np.frombuffer(raw[8 : 8 + n], dtype=np.uint8)
    if magic == IDX_IMAGES:
        n, rows, cols = struct.unpack(">III", raw[4:16])
        return np.frombuffer(raw[16 : 16 + n * rows * cols], dtype=np.uint8).reshape(n, rows, cols)
    raise ValueError(f"unsupported IDX magic 0x{magic:08x}")


def average_pool(images, side):
    """Downsample (n, r, c) images to (n, side * side) features in [0, 1] by block means."""
    n, rows, cols = images.shape
    f = max(1, min(rows, cols) // side)
    crop = images[:, : side * f, : side * f].astype(np.float32) / 255.0
    return crop.reshape(n, side, f, side, f).mean(axis=(2, 4)).reshape(n, side * side)


def _find(path, stem):
    for name in (stem, stem + ".gz"):
        p = Path(path) / name
        if p.exists():
            return p
    raise FileNotFoundError(f"{stem} not found under {path}")


def load_idx_dataset(
    path,
    n_users,
    rng,
    labels_per_client=2,
    samples_per_client=40,
    test_per_label=100,
    n_features=32,
):
    """MNIST-style directory (train-images-idx3-ubyte, train-labels-idx1-ubyte).

    Images are average-pooled to ``isqrt(n_features)`` squared features. Per
    label, ``2 * test_per_label`` records are held out for the public shard
    and the test set; clients draw from the rest.
    """
    images = read_idx(_find(path, "train-images-idx3-ubyte"))
    labels = read_idx(_find(path, "train-labels-idx1-ubyte")).astype(np.int64)
    side = max(1, math.isqrt(n_features))
    x = average_pool(images, side)
    n_labels = int(labels.max()) + 1
    pools, public, test_x, test_y = {}, {}, [], []
    for label in range(n_labels):
        idx = rng.permutation(np.flatnonzero(labels == label))
        public[label] = x[idx[:test_per_label]]
        held = idx[test_per_label : 2 * test_per_label]
        test_x.append(x[held])
        test_y.append(np.full(len(held), label))
        pools[label] = list(idx[2 * test_per_label :])
    clients = []
    for uid, lab in enumerate(_assign_labels(n_users, n_labels, labels_per_client, rng)):
        ordered = sorted(lab)
        sel, ys = [], []
        for label, count in zip(ordered, _split_counts(samples_per_client, len(ordered))):
            pool = pools[label]
            take = [pool.pop() for _ in range(min(count, len(pool)))]
            if len(take) < count:
                raise ValueError(f"not enough records for label {label}")
            sel.extend(take)
            ys.extend([label] * count)
        clients.append(Client(uid, x[sel], np.array(ys), lab))
    return Dataset(clients, public, np.concatenate(test_x), np.concatenate(test_y), n_labels)
