import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedrider import data as fd


def idx_images(arrays: np.ndarray) -> bytes:
    n, r, c = arrays.shape
    return struct.pack(">IIII", 2051, n, r, c) + arrays.astype(np.uint8).tobytes()


def idx_labels(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", 2049, labels.size) + labels.tobytes()


@pytest.fixture
def idx_pair(tmp_path):
    def write(img_bytes: bytes, lbl_bytes: bytes):
        ip = tmp_path / "imgs.idx"
        lp = tmp_path / "lbls.idx"
        ip.write_bytes(img_bytes)
        lp.write_bytes(lbl_bytes)
        return ip, lp

    return write


# ------------------------------------------------------------------ loading

def test_load_idx_roundtrip_and_scaling(idx_pair):
    imgs = np.zeros((3, 2, 2), dtype=np.uint8)
    imgs[0] = 255
    imgs[1] = 0
    imgs[2] = [[51, 102], [153, 204]]
    ip, lp = idx_pair(idx_images(imgs), idx_labels([4, 0, 9]))
    ds = fd.load_idx(ip, lp)
    assert ds.num_samples == 3 and ds.feature_dim == 4
    # declared endpoints: byte 255 -> 1.0, byte 0 -> 0.0
    np.testing.assert_array_equal(ds.features[0], np.ones(4))
    np.testing.assert_array_equal(ds.features[1], np.zeros(4))
    np.testing.assert_allclose(ds.features[2], np.array([51, 102, 153, 204]) / 255.0)
    np.testing.assert_array_equal(ds.labels, [4, 0, 9])
    assert ds.num_classes == 10


def test_load_idx_rejects_wrong_magic(idx_pair):
    imgs = np.zeros((1, 2, 2), dtype=np.uint8)
    good_i, good_l = idx_images(imgs), idx_labels([1])
    ip, lp = idx_pair(struct.pack(">IIII", 2052, 1, 2, 2) + imgs.tobytes(), good_l)
    with pytest.raises(fd.BadMagicError):
        fd.load_idx(ip, lp)
    ip, lp = idx_pair(good_i, struct.pack(">II", 2051, 1) + b"\x01")
    with pytest.raises(fd.BadMagicError):
        fd.load_idx(ip, lp)


def test_load_idx_rejects_truncated_payload(idx_pair):
    imgs = np.zeros((2, 2, 2), dtype=np.uint8)
    whole = idx_images(imgs)
    ip, lp = idx_pair(whole[:len(whole) - 3], idx_labels([0, 1]))
    with pytest.raises(fd.TruncatedPayloadError):
        fd.load_idx(ip, lp)
    # header alone counts as truncated too
    ip, lp = idx_pair(struct.pack(">IIII", 2051, 2, 2, 2), idx_labels([0, 1]))
    with pytest.raises(fd.TruncatedPayloadError):
        fd.load_idx(ip, lp)
    ip, lp = idx_pair(struct.pack(">II", 2051, 2), idx_labels([0, 1]))
    with pytest.raises(fd.TruncatedPayloadError):
        fd.load_idx(ip, lp)


def test_load_idx_rejects_count_mismatch(idx_pair):
    ip, lp = idx_pair(idx_images(np.zeros((3, 2, 2), dtype=np.uint8)), idx_labels([0, 1]))
    with pytest.raises(fd.CountMismatchError):
        fd.load_idx(ip, lp)


def test_load_idx_rejects_trailing_bytes(idx_pair):
    ip, lp = idx_pair(idx_images(np.zeros((1, 2, 2), dtype=np.uint8)) + b"\x00",
                      idx_labels([0]))
    with pytest.raises(fd.DataError):
        fd.load_idx(ip, lp)


# ---------------------------------------------------------------- synthesis

def test_synth_spread_zero_gives_exact_centers():
    ds = fd.synth_dataset(num_classes=3, per_class=4, feature_dim=5, spread=0.0, seed=9)
    for c in range(3):
        block = ds.features[ds.labels == c]
        assert block.shape == (4, 5)
        np.testing.assert_array_equal(block, np.broadcast_to(block[0], (4, 5)))


def test_synth_same_seed_identical_different_seed_not():
    a = fd.synth_dataset(seed=5)
    b = fd.synth_dataset(seed=5)
    c = fd.synth_dataset(seed=6)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.features, c.features)


def test_synth_centers_shared_across_seeds():
    a = fd.synth_dataset(num_classes=4, per_class=50, feature_dim=6, spread=0.0, seed=1)
    b = fd.synth_dataset(num_classes=4, per_class=50, feature_dim=6, spread=0.0, seed=2)
    np.testing.assert_array_equal(a.features, b.features)


def test_synth_is_linearly_separable_by_nearest_centroid():
    """10 classes x 100 samples, dim 20: class-mean classifier clears 90%.

    Nearest-centroid is a linear classifier (decision boundaries are
    hyperplanes), so this is the separability oracle for the default blobs.
    """
    ds = fd.synth_dataset(num_classes=10, per_class=100, feature_dim=20, seed=3)
    centroids = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(10)])
    d2 = ((ds.features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = d2.argmin(axis=1)
    assert (pred == ds.labels).mean() > 0.90


def test_synth_validates_arguments():
    with pytest.raises(fd.DataError):
        fd.synth_dataset(num_classes=0)
    with pytest.raises(fd.DataError):
        fd.synth_dataset(per_class=0)
    with pytest.raises(fd.DataError):
        fd.synth_dataset(feature_dim=0)
    with pytest.raises(fd.DataError):
        fd.synth_dataset(spread=-0.1)


def test_dataset_invariants_enforced():
    with pytest.raises(fd.DataError):
        fd.Dataset(np.zeros((3, 2)), np.array([0, 1]), 2)
    with pytest.raises(fd.DataError):
        fd.Dataset(np.zeros((2, 2)), np.array([0, 5]), 2)
    with pytest.raises(fd.DataError):
        fd.Dataset(np.full((2, 2), 1.5), np.array([0, 1]), 2)
    with pytest.raises(fd.DataError):
        fd.Dataset(np.zeros((2, 2)), np.array([0.0, 1.0]), 2)


# ------------------------------------------------------------- partitioning

def _tiny(n, num_classes=10):
    labels = (np.arange(n) % num_classes).astype(np.int64)
    return fd.Dataset(np.zeros((n, 2)), labels, num_classes)


def test_partition_iid_one_sample_each():
    p = fd.partition_iid(_tiny(100), 100, seed=0)
    assert all(len(s) == 1 for s in p.shards)
    p.validate_cover(100)


def test_partition_iid_single_client_gets_everything():
    p = fd.partition_iid(_tiny(37), 1, seed=0)
    assert p.n_clients == 1
    np.testing.assert_array_equal(np.sort(p.shards[0]), np.arange(37))


def test_partition_iid_near_uniform_class_histogram():
    ds = fd.synth_dataset(num_classes=10, per_class=600, feature_dim=4, seed=0)
    p = fd.partition_iid(ds, 10, seed=4)
    for shard in p.shards:
        assert len(shard) == 600
        counts = np.bincount(ds.labels[shard], minlength=10)
        # chi-square sanity band, not a hard distributional bound
        assert counts.min() >= 20 and counts.max() <= 110


def test_partition_sorted_hand_case():
    ds = fd.Dataset(np.zeros((4, 2)), np.array([0, 0, 1, 1]), 2)
    p = fd.partition_sorted(ds, 2)
    np.testing.assert_array_equal(p.shards[0], [0, 1])
    np.testing.assert_array_equal(p.shards[1], [2, 3])


def test_partition_sorted_single_client_sees_all_classes():
    ds = fd.synth_dataset(num_classes=10, per_class=5, feature_dim=3, seed=0)
    p = fd.partition_sorted(ds, 1)
    assert len(np.unique(ds.labels[p.shards[0]])) == 10


def test_partition_sorted_at_most_two_classes_per_shard():
    ds = fd.synth_dataset(num_classes=10, per_class=100, feature_dim=4, seed=1)
    p = fd.partition_sorted(ds, 100)
    assert max(len(np.unique(ds.labels[s])) for s in p.shards) <= 2
    p.validate_cover(ds.num_samples)


def test_partition_errors():
    with pytest.raises(fd.TooManyClientsError):
        fd.partition_iid(_tiny(3), 4, seed=0)
    with pytest.raises(fd.TooManyClientsError):
        fd.partition_sorted(_tiny(3), 4)
    with pytest.raises(fd.DataError):
        fd.partition_iid(_tiny(3), 0, seed=0)


@given(n=st.integers(1, 400), k=st.integers(1, 60), seed=st.integers(0, 10))
def test_partition_iid_exact_cover_property(n, k, seed):
    if k > n:
        k = n
    p = fd.partition_iid(_tiny(n), k, seed=seed)
    sizes = sorted(len(s) for s in p.shards)
    assert sizes[-1] - sizes[0] <= 1
    p.validate_cover(n)


@given(n=st.integers(1, 400), k=st.integers(1, 60))
def test_partition_sorted_exact_cover_and_class_bound(n, k):
    if k > n:
        k = n
    num_classes = 7
    ds = _tiny(n, num_classes)
    p = fd.partition_sorted(ds, k)
    p.validate_cover(n)
    if k >= num_classes:
        assert max(len(np.unique(ds.labels[s])) for s in p.shards) <= 2


def test_take_slices_features_and_labels_together():
    ds = fd.synth_dataset(num_classes=3, per_class=4, feature_dim=2, seed=0)
    sub = ds.take(np.array([0, 5, 11]))
    np.testing.assert_array_equal(sub.features, ds.features[[0, 5, 11]])
    np.testing.assert_array_equal(sub.labels, ds.labels[[0, 5, 11]])
    assert sub.num_classes == ds.num_classes
