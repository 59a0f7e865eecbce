"""Loader, standardization, augmentation, and synthetic-corpus tests."""

import struct

import numpy as np
import pytest

from dualprec.data import (
    CIFAR_RECORD_BYTES,
    DataError,
    Dataset,
    augment,
    export_synth_idx,
    hflip,
    iter_batches,
    load_cifar10_batch,
    load_idx,
    load_mnist,
    make_synth_datasets,
    pad_crop,
    read_idx,
    standardize,
    synth_digits,
    write_idx_images,
    write_idx_labels,
)


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (32, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, 32, dtype=np.uint8)
    ipath = tmp_path / "imgs"
    lpath = tmp_path / "lbls"
    write_idx_images(ipath, images)
    write_idx_labels(lpath, labels)
    return str(ipath), str(lpath), images, labels


# ============================================================================
# IDX
# ============================================================================


class TestIdx:
    def test_round_trip(self, idx_pair):
        ipath, lpath, images, labels = idx_pair
        np.testing.assert_array_equal(read_idx(ipath), images)
        np.testing.assert_array_equal(read_idx(lpath), labels)

    def test_load_idx_shapes_and_scaling(self, idx_pair):
        ipath, lpath, images, labels = idx_pair
        ds = load_idx(ipath, lpath)
        assert ds.images.shape == (32, 1, 28, 28)
        assert ds.images.dtype == np.float32
        assert ds.images.max() <= 1.0
        np.testing.assert_allclose(ds.images[0, 0], images[0] / 255.0, atol=1e-7)
        np.testing.assert_array_equal(ds.labels, labels)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(struct.pack(">I", 0xDEADBEEF) + b"\x00" * 16)
        with pytest.raises(DataError, match="wrong magic"):
            read_idx(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short"
        path.write_bytes(struct.pack(">IIII", 0x803, 2, 28, 28) + b"\x00" * 100)
        with pytest.raises(DataError, match="data bytes"):
            read_idx(path)

    def test_count_mismatch(self, idx_pair, tmp_path):
        ipath, _, _, _ = idx_pair
        lpath = tmp_path / "short_labels"
        write_idx_labels(lpath, np.zeros(5, dtype=np.uint8))
        with pytest.raises(DataError, match="count mismatch"):
            load_idx(ipath, lpath)

    def test_load_mnist_layout(self, tmp_path):
        export_synth_idx(tmp_path, seed=3, n_train=40, n_test=16)
        train, test = load_mnist(tmp_path)
        assert train.images.shape == (40, 1, 28, 28)
        assert test.images.shape == (16, 1, 28, 28)
        assert train.split == "train" and test.split == "test"

    def test_standardized_pixel_formula(self, idx_pair):
        ipath, lpath, images, _ = idx_pair
        ds = standardize(load_idx(ipath, lpath))
        mean, std = ds.mean[0], ds.std[0]
        # a raw byte v maps to (v/255 - mean) / std
        v = images[3, 10, 10] / 255.0
        assert ds.images[3, 0, 10, 10] == pytest.approx((v - mean) / std, rel=1e-5)


# ============================================================================
# CIFAR-10 binary
# ============================================================================


def write_cifar_batch(path, n, seed=0):
    rng = np.random.default_rng(seed)
    rec = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = rng.integers(0, 10, n)
    rec[:, 1:] = rng.integers(0, 256, (n, 3072))
    path.write_bytes(rec.tobytes())
    return rec


class TestCifar:
    def test_batch_shapes(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        rec = write_cifar_batch(path, 20)
        images, labels = load_cifar10_batch(path)
        assert images.shape == (20, 3, 32, 32)
        np.testing.assert_array_equal(labels, rec[:, 0])
        # channel-major layout: first 1024 payload bytes are the red plane
        np.testing.assert_array_equal(images[0, 0].reshape(-1), rec[0, 1:1025])

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        write_cifar_batch(path, 4)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(DataError, match="multiple"):
            load_cifar10_batch(path)

    def test_label_out_of_range(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        rec = write_cifar_batch(path, 4)
        rec[2, 0] = 10
        path.write_bytes(rec.tobytes())
        with pytest.raises(DataError, match="label out of range"):
            load_cifar10_batch(path)


# ============================================================================
# standardization / augmentation / batching
# ============================================================================


class TestPreprocess:
    def test_train_stats_near_unit(self):
        train, test = make_synth_datasets(seed=0, n_train=3000, n_test=100)
        mean = train.images.mean(axis=(0, 2, 3))
        std = train.images.std(axis=(0, 2, 3))
        assert np.all(np.abs(mean) < 1e-3)
        assert np.all(np.abs(std - 1) < 1e-3)

    def test_stats_come_from_train_split_only(self):
        rng = np.random.default_rng(1)
        train = Dataset(rng.normal(0.3, 0.1, (50, 1, 4, 4)).astype(np.float32),
                        rng.integers(0, 10, 50), "train")
        test = Dataset(rng.normal(0.8, 0.3, (50, 1, 4, 4)).astype(np.float32),
                       rng.integers(0, 10, 50), "test")
        strain, stest = standardize(train, test)
        np.testing.assert_array_equal(strain.mean, stest.mean)
        assert abs(strain.images.mean()) < 1e-3
        assert abs(stest.images.mean()) > 0.5  # test split keeps its shift

    def test_augment_none_is_identity(self):
        rng = np.random.default_rng(0)
        batch = rng.normal(0, 1, (6, 1, 8, 8)).astype(np.float32)
        assert augment(batch, "none", rng) is batch

    def test_flip_is_involution(self):
        batch = np.random.default_rng(0).normal(0, 1, (3, 2, 5, 5)).astype(np.float32)
        np.testing.assert_array_equal(hflip(hflip(batch)), batch)

    def test_centered_crop_recovers_original(self):
        batch = np.random.default_rng(0).normal(0, 1, (2, 1, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(pad_crop(batch, 4, 4, pad=4), batch)

    def test_flipcrop_preserves_shape(self):
        rng = np.random.default_rng(0)
        batch = rng.normal(0, 1, (10, 3, 32, 32)).astype(np.float32)
        out = augment(batch, "flipcrop", rng)
        assert out.shape == batch.shape
        assert out is not batch

    def test_batch_order_is_pure_function_of_seed(self):
        train, _ = make_synth_datasets(seed=0, n_train=300, n_test=50)
        a = [y.copy() for _, y in iter_batches(train, 64, np.random.default_rng(9))]
        b = [y.copy() for _, y in iter_batches(train, 64, np.random.default_rng(9))]
        for ya, yb in zip(a, b):
            np.testing.assert_array_equal(ya, yb)

    def test_unshuffled_iteration_is_sequential(self):
        train, _ = make_synth_datasets(seed=0, n_train=130, n_test=50)
        ys = np.concatenate([y for _, y in iter_batches(train, 32)])
        np.testing.assert_array_equal(ys, train.labels)


# ============================================================================
# synthetic corpus
# ============================================================================


class TestSynth:
    def test_deterministic(self):
        a, la = synth_digits(20, np.random.default_rng(5))
        b, lb = synth_digits(20, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(la, lb)

    def test_ranges(self):
        x, y = synth_digits(50, np.random.default_rng(0))
        assert x.shape == (50, 1, 28, 28)
        assert x.min() >= 0.0 and x.max() <= 1.0
        assert set(np.unique(y)) <= set(range(10))

    def test_export_matches_generation(self, tmp_path):
        export_synth_idx(tmp_path, seed=7, n_train=25, n_test=10)
        train, test = load_mnist(tmp_path)
        assert len(train) == 25 and len(test) == 10
