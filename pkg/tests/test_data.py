import struct

import numpy as np
import pytest

from bnnlab.errors import ContractViolation, FormatError
from bnnlab.experiment.data import (
    CIFAR10_RECORD,
    DatasetSpec,
    load_cifar10_bin,
    load_dataset,
    load_idx,
    synth_dataset,
)


def write_idx_images(path, pixels):
    n, r, c = pixels.shape
    path.write_bytes(struct.pack(">IIII", 0x803, n, r, c) + pixels.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    path.write_bytes(struct.pack(">II", 0x801, len(labels)) + bytes(labels))


@pytest.fixture
def idx_pair(tmp_path):
    pixels = np.array([
        [[0, 255], [51, 102]],
        [[255, 255], [255, 255]],
        [[0, 0], [0, 0]],
        [[1, 2], [3, 4]],
    ])
    images, labels = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx_images(images, pixels)
    write_idx_labels(labels, [3, 1, 4, 1])
    return images, labels


class TestIdx:
    def test_fixture_values(self, idx_pair):
        x, y = load_idx(*idx_pair)
        assert x.shape == (4, 4)
        assert np.array_equal(x[0], [0.0, 1.0, 0.2, 0.4])
        assert np.array_equal(x[1], np.ones(4))
        assert not x[2].any()
        assert np.array_equal(x[3], np.array([1, 2, 3, 4]) / 255.0)
        assert y.tolist() == [3, 1, 4, 1]

    def test_normalization(self, idx_pair):
        x, _ = load_idx(*idx_pair, mean=(0.5,), std=(0.25,))
        assert np.array_equal(x[1], np.full(4, 2.0))

    def test_truncated(self, idx_pair, tmp_path):
        images, labels = idx_pair
        short = tmp_path / "short.idx"
        short.write_bytes(images.read_bytes()[:-1])
        with pytest.raises(FormatError):
            load_idx(short, labels)

    def test_count_mismatch(self, idx_pair, tmp_path):
        images, _ = idx_pair
        labels = tmp_path / "three.idx"
        write_idx_labels(labels, [0, 1, 2])
        with pytest.raises(FormatError):
            load_idx(images, labels)

    def test_bad_magic(self, idx_pair):
        images, labels = idx_pair
        with pytest.raises(FormatError):
            load_idx(labels, images)


def cifar_records(labels, fill=126):
    out = b""
    for lab in labels:
        out += bytes([lab]) + bytes([fill]) * 3072
    return out


class TestCifar:
    def test_channel_normalization(self, tmp_path):
        p = tmp_path / "one.bin"
        p.write_bytes(cifar_records([7]))
        x, y = load_cifar10_bin(p)
        assert y.tolist() == [7]
        expected = (126 / 255 - 0.4914) / 0.247
        assert x[0, 0] == pytest.approx(expected, abs=1e-15)
        assert x[0, 0] == pytest.approx(0.0110, abs=1e-4)
        assert np.all(x[0, :1024] == x[0, 0])
        assert x[0, 1024] == pytest.approx((126 / 255 - 0.4822) / 0.243, abs=1e-15)
        assert x[0, 2048] == pytest.approx((126 / 255 - 0.4465) / 0.261, abs=1e-15)

    def test_five_records(self, tmp_path):
        p = tmp_path / "five.bin"
        p.write_bytes(cifar_records(range(5)))
        x, y = load_cifar10_bin([p])
        assert x.shape == (5, 3072) and y.tolist() == [0, 1, 2, 3, 4]

    @pytest.mark.parametrize("size", [3072, CIFAR10_RECORD + 1, 0])
    def test_bad_size(self, tmp_path, size):
        p = tmp_path / "bad.bin"
        p.write_bytes(bytes(size))
        with pytest.raises(FormatError):
            load_cifar10_bin(p)

    def test_label_above_nine(self, tmp_path):
        p = tmp_path / "label.bin"
        p.write_bytes(cifar_records([10]))
        with pytest.raises(FormatError):
            load_cifar10_bin(p)


class TestSynthetic:
    def test_deterministic(self):
        a = synth_dataset(100, 8, 3, seed=5, n_test=20)
        b = synth_dataset(100, 8, 3, seed=5, n_test=20)
        for f in ("x_train", "y_train", "x_test", "y_test"):
            assert np.array_equal(getattr(a, f), getattr(b, f))

    def test_seed_changes_data(self):
        assert not np.array_equal(synth_dataset(50, 4, 2, seed=1).x_train, synth_dataset(50, 4, 2, seed=2).x_train)

    def test_zero_separation_is_chance(self):
        d = synth_dataset(4000, 16, 4, seed=0, separation=0.0, n_test=4000)
        # with identical class distributions the best achievable rule is the majority class
        freq = np.bincount(d.y_test, minlength=4) / len(d.y_test)
        assert freq.max() == pytest.approx(0.25, abs=0.03)
        assert np.allclose(d.x_train.mean(axis=0), 0.0, atol=0.1)

    def test_large_separation_is_linearly_separable(self):
        d = synth_dataset(2000, 20, 5, seed=0, separation=20.0, n_test=2000)
        # least-squares one-vs-rest linear classifier
        xa = np.hstack([d.x_train, np.ones((len(d.x_train), 1))])
        w = np.linalg.lstsq(xa, np.eye(5)[d.y_train], rcond=None)[0]
        pred = (np.hstack([d.x_test, np.ones((len(d.x_test), 1))]) @ w).argmax(axis=1)
        assert (pred == d.y_test).mean() > 0.99

    def test_needs_two_classes(self):
        with pytest.raises(ContractViolation):
            synth_dataset(10, 3, 1)


class TestDatasetSpec:
    def test_std_positive(self):
        with pytest.raises(ContractViolation):
            DatasetSpec(std=(0.0,))

    def test_idx_through_spec(self, idx_pair):
        images, labels = idx_pair
        spec = DatasetSpec("idx", (str(images), str(labels), str(images), str(labels)), n_train=3, n_test=2)
        d = load_dataset(spec)
        assert d.x_train.shape == (3, 4) and d.x_test.shape == (2, 4)
        assert d.classes == 5
