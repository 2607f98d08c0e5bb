import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from at2l.data import (IDXError, Dataset, batches, encode_idx_images, encode_idx_labels, load_mnist_idx,
                       read_idx_images, save_mnist_idx, stratified_split, synthetic_2d, to_idx_bytes)

from oracles import linearly_separable

MNIST = "data/mnist5k"


def _write_pair(tmp_path, images, labels):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(encode_idx_images(images))
    lp.write_bytes(encode_idx_labels(labels))
    return ip, lp


def test_header_layout_is_big_endian():
    raw = encode_idx_images(np.zeros((2, 3, 4), dtype=np.uint8))
    assert raw[:16] == bytes.fromhex("00000803" "00000002" "00000003" "00000004")
    assert encode_idx_labels([7, 1])[:8] == bytes.fromhex("00000801" "00000002")


def test_scaling_endpoints(tmp_path):
    images = np.zeros((2, 28, 28), dtype=np.uint8)
    images[1] = 255
    ds = load_mnist_idx(*_write_pair(tmp_path, images, [3, 4]))
    assert ds.x.shape == (2, 28, 28, 1)
    assert ds.x[0].max() == 0.0 and ds.x[1].min() == 1.0
    assert list(ds.y) == [3, 4]


def test_bad_magic_reports_offset(tmp_path):
    ip, lp = _write_pair(tmp_path, np.zeros((2, 28, 28), np.uint8), [0, 1])
    raw = bytearray(ip.read_bytes())
    raw[3] = 0x01
    ip.write_bytes(bytes(raw))
    with pytest.raises(IDXError, match="byte offset 0"):
        load_mnist_idx(ip, lp)


def test_truncated_payload_reports_offset(tmp_path):
    ip, lp = _write_pair(tmp_path, np.zeros((2, 28, 28), np.uint8), [0, 1])
    ip.write_bytes(ip.read_bytes()[:-10])
    with pytest.raises(IDXError, match=f"byte offset {16 + 2 * 784 - 10}"):
        read_idx_images(ip)


def test_trailing_bytes_rejected(tmp_path):
    ip, lp = _write_pair(tmp_path, np.zeros((2, 28, 28), np.uint8), [0, 1])
    lp.write_bytes(lp.read_bytes() + b"\0")
    with pytest.raises(IDXError, match="trailing"):
        load_mnist_idx(ip, lp)


def test_count_mismatch(tmp_path):
    ip, _ = _write_pair(tmp_path, np.zeros((3, 28, 28), np.uint8), [0, 1, 2])
    lp = tmp_path / "short.idx"
    lp.write_bytes(encode_idx_labels([0, 1]))
    with pytest.raises(IDXError, match="byte offset 4"):
        load_mnist_idx(ip, lp)


def test_shipped_subset_round_trips_bytes():
    ds = load_mnist_idx(f"{MNIST}/t10k-images-idx3-ubyte.gz", f"{MNIST}/t10k-labels-idx1-ubyte.gz", "test")
    assert len(ds) == 1000 and ds.num_classes == 10
    img, lab = to_idx_bytes(ds)
    assert img == gzip.decompress(open(f"{MNIST}/t10k-images-idx3-ubyte.gz", "rb").read())
    assert lab == gzip.decompress(open(f"{MNIST}/t10k-labels-idx1-ubyte.gz", "rb").read())


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 20), seed=st.integers(0, 10**6))
def test_idx_round_trip_property(tmp_path_factory, n, seed):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (n, 28, 28), dtype=np.uint8)
    labels = np.arange(n) % 10
    d = tmp_path_factory.mktemp("idx")
    ds = load_mnist_idx(*_write_pair(d, images, labels))
    save_mnist_idx(ds, d / "a.idx.gz", d / "b.idx")
    again = load_mnist_idx(d / "a.idx.gz", d / "b.idx")
    assert np.array_equal(again.x, ds.x) and np.array_equal(again.y, ds.y)
    assert to_idx_bytes(again) == (encode_idx_images(images), encode_idx_labels(labels))


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.full((2, 2), 1.5), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([1, 1]), 2)


@pytest.mark.parametrize("kind", ["two_gaussians", "four_gaussians", "xor"])
def test_synthetic_is_deterministic_and_in_unit_square(kind):
    a = synthetic_2d(kind, 101, 0.3, seed=5)
    b = synthetic_2d(kind, 101, 0.3, seed=5)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert a.x.min() >= 0 and a.x.max() <= 1
    assert not np.array_equal(a.x, synthetic_2d(kind, 101, 0.3, seed=6).x)


@settings(max_examples=30, deadline=None)
@given(kind=st.sampled_from(["two_gaussians", "four_gaussians", "xor"]), n=st.integers(4, 300),
       seed=st.integers(0, 10**6))
def test_synthetic_class_balance(kind, n, seed):
    ds = synthetic_2d(kind, n, 0.2, seed)
    counts = np.bincount(ds.y, minlength=ds.num_classes)
    assert np.all(np.abs(counts - n / ds.num_classes) <= 1)


def test_noiseless_two_gaussians_is_separable():
    ds = synthetic_2d("two_gaussians", 60, 0.0, seed=1)
    assert linearly_separable(ds.x, ds.y)


def test_batch_sizes_keep_short_tail():
    sizes = [len(b) for b in batches(100, 32, 0)]
    assert sizes == [32, 32, 32, 4]


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 200), k=st.integers(1, 64), s1=st.integers(0, 1000), s2=st.integers(0, 1000))
def test_batches_partition_the_epoch(n, k, s1, s2):
    if k > n:
        with pytest.raises(ValueError):
            list(batches(n, k, s1))
        return
    a = np.concatenate(list(batches(n, k, s1)))
    b = np.concatenate(list(batches(n, k, s2)))
    assert sorted(a) == list(range(n)) and sorted(b) == list(range(n))
    if s1 != s2 and n > 8:
        assert not np.array_equal(a, b)


def test_stratified_split_counts():
    y = np.repeat(np.arange(4), 10)
    tr, te = stratified_split(y, 3, seed=0)
    assert len(set(tr) | set(te)) == 40 and not set(tr) & set(te)
    assert np.all(np.bincount(y[te]) == 3)


def test_gzip_detected_by_magic_not_extension(tmp_path):
    p = tmp_path / "labels.bin"
    p.write_bytes(gzip.compress(encode_idx_labels([1, 2, 3])))
    from at2l.data import read_idx_labels

    assert list(read_idx_labels(p)) == [1, 2, 3]
    assert struct.unpack(">I", encode_idx_labels([0])[:4])[0] == 0x801
