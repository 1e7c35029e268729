import gzip
import struct

import numpy as np
import pytest

from olive.data import average_pool, load_idx_dataset, make_synthetic_dataset, read_idx
from olive.envelope import AuthenticationError, open_envelope, provision_keys, seal


def test_synthetic_label_skew():
    ds = make_synthetic_dataset(20, np.random.default_rng(0), labels_per_client=2, samples_per_client=10)
    assert len(ds.clients) == 20 and ds.n_features == 32
    for c in ds.clients:
        assert len(c.labels) == 2
        assert set(c.y.tolist()) == set(c.labels)
        assert len(c.x) == 10
    assert sorted(ds.public) == list(range(10))
    assert len(ds.test_y) == 1000


def test_synthetic_bad_labels_per_client():
    with pytest.raises(ValueError):
        make_synthetic_dataset(2, np.random.default_rng(0), labels_per_client=11)


def write_idx(path, images, labels):
    n, r, c = images.shape
    with gzip.open(path / "train-images-idx3-ubyte.gz", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, r, c) + images.tobytes())
    with open(path / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, n) + labels.tobytes())


def test_idx_loading(tmp_path):
    rng = np.random.default_rng(1)
    labels = np.repeat(np.arange(3, dtype=np.uint8), 30)
    images = rng.integers(0, 256, (90, 8, 8), dtype=np.uint8)
    write_idx(tmp_path, images, labels)
    assert read_idx(tmp_path / "train-labels-idx1-ubyte").tolist() == labels.tolist()
    ds = load_idx_dataset(tmp_path, 4, rng, labels_per_client=1, samples_per_client=4, test_per_label=5, n_features=16)
    assert ds.n_labels == 3 and ds.n_features == 16
    assert all(len(c.x) == 4 and set(c.y.tolist()) == set(c.labels) for c in ds.clients)
    assert float(ds.test_x.max()) <= 1.0


def test_average_pool():
    img = np.arange(16, dtype=np.uint8).reshape(1, 4, 4) * 10
    out = average_pool(img, 2)
    assert out.shape == (1, 4)
    assert out[0, 0] == pytest.approx((0 + 10 + 40 + 50) / 4 / 255)


def test_envelope_contract():
    keys = provision_keys([1, 2], np.random.default_rng(0))
    env = seal(keys[1], 1, 3, b"payload bytes")
    assert env.ciphertext != b"payload bytes"
    assert open_envelope(keys[1], env) == b"payload bytes"
    with pytest.raises(AuthenticationError):
        open_envelope(keys[2], env)
    wrong_round = type(env)(env.user, 4, env.ciphertext, env.tag)
    with pytest.raises(AuthenticationError):
        open_envelope(keys[1], wrong_round)
