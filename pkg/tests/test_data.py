import gzip
import struct

import numpy as np
import pytest

from gmgan import data
from gmgan.errors import FormatError, ParameterError


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


@pytest.fixture
def fixture_files(tmp_path):
    pixels = [0, 255, 127, 128, 10, 20, 30, 40]
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(idx_bytes(0x803, (2, 2, 2), pixels))
    lab.write_bytes(idx_bytes(0x801, (2,), [7, 3]))
    return img, lab, pixels


class TestToy:
    def test_defaults(self):
        ds = data.gen_toy(5000, rng=np.random.default_rng(0))
        assert ds.samples.shape == (5000, 2) and ds.labels.shape == (5000,)
        assert set(np.unique(ds.labels)) == set(range(9))

    def test_component_counts(self):
        n = 90_000
        ds = data.gen_toy(n, rng=np.random.default_rng(1))
        counts = np.bincount(ds.labels, minlength=9)
        sd = np.sqrt(n * (1 / 9) * (8 / 9))
        assert np.all(np.abs(counts - n / 9) < 5 * sd)

    def test_zero_variance_hits_means(self):
        ds = data.gen_toy(50, variance=0.0, rng=np.random.default_rng(2))
        np.testing.assert_array_equal(ds.samples, data.TOY_MEANS[ds.labels])

    def test_per_component_moments(self):
        ds = data.gen_toy(45_000, rng=np.random.default_rng(3))
        for k in range(9):
            pts = ds.samples[ds.labels == k]
            se = np.sqrt(0.1 / len(pts))
            assert np.all(np.abs(pts.mean(axis=0) - data.TOY_MEANS[k]) < 5 * se)

    def test_bit_reproducible(self):
        a = data.gen_toy(100, rng=np.random.default_rng(9))
        b = data.gen_toy(100, rng=np.random.default_rng(9))
        assert a.samples.tobytes() == b.samples.tobytes()

    def test_csv(self, tmp_path):
        ds = data.gen_toy(5, rng=np.random.default_rng(0))
        data.write_toy_csv(ds, tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0].startswith("# gmgan format_version=1")
        assert lines[1] == "x0,x1,label"
        x0, x1, lab = lines[2].split(",")
        assert float(x0) == ds.samples[0, 0] and float(x1) == ds.samples[0, 1] and int(lab) == ds.labels[0]

    def test_mixture_tuple(self):
        means, covs, w = data.toy_mixture()
        assert means.shape == (9, 2) and covs.shape == (9, 2, 2)
        np.testing.assert_allclose(covs[4], 0.1 * np.eye(2))
        assert w.sum() == pytest.approx(1.0)


class TestIdx:
    def test_hand_fixture(self, fixture_files):
        img, lab, pixels = fixture_files
        ds = data.load_idx(img, lab)
        want = np.array(pixels, dtype=float).reshape(2, 2, 2, 1) / 127.5 - 1.0
        np.testing.assert_array_equal(ds.samples, want)
        np.testing.assert_array_equal(ds.labels, [7, 3])
        assert ds.samples[0, 0, 0, 0] == -1.0 and ds.samples[0, 0, 1, 0] == 1.0
        assert ds.image_shape == (2, 2, 1)

    def test_gzip(self, fixture_files, tmp_path):
        img, lab, _ = fixture_files
        gz = tmp_path / "img.gz"
        gz.write_bytes(gzip.compress(img.read_bytes()))
        np.testing.assert_array_equal(data.load_idx(gz).samples, data.load_idx(img).samples)

    def test_denormalize_recovers_bytes(self, fixture_files):
        img, _, pixels = fixture_files
        ds = data.load_idx(img)
        np.testing.assert_allclose(ds.denormalize(ds.samples).ravel(), pixels, atol=1e-12)

    def test_labels_with_image_magic(self, fixture_files, tmp_path):
        img, _, _ = fixture_files
        bad = tmp_path / "bad.idx"
        bad.write_bytes(idx_bytes(0x803, (2,), [1, 2]))
        with pytest.raises(FormatError, match="offset 0"):
            data.load_idx(img, bad)

    def test_truncated(self, tmp_path):
        bad = tmp_path / "bad.idx"
        bad.write_bytes(idx_bytes(0x803, (2, 2, 2), [0] * 5))
        with pytest.raises(FormatError) as err:
            data.load_idx(bad)
        assert err.value.offset == 16 + 5

    def test_count_mismatch(self, fixture_files, tmp_path):
        img, _, _ = fixture_files
        bad = tmp_path / "lab.idx"
        bad.write_bytes(idx_bytes(0x801, (3,), [0, 1, 2]))
        with pytest.raises(FormatError):
            data.load_idx(img, bad)

    def test_bundled_subset(self):
        from pathlib import Path
        root = Path(__file__).resolve().parents[1] / "data" / "mnist-subset"
        ds = data.load_idx(root / "images-idx3-ubyte.gz", root / "labels-idx1-ubyte.gz")
        assert ds.samples.shape[1:] == (28, 28, 1)
        assert np.all(np.bincount(ds.labels) >= 1000)


class TestSubset:
    def test_stratified_counts(self):
        ds = data.gen_toy(2000, rng=np.random.default_rng(0))
        sub = data.subset(ds, 30, seed=1)
        np.testing.assert_array_equal(np.bincount(sub.labels), np.full(9, 30))

    def test_empty_and_one(self):
        ds = data.Dataset(np.arange(20.0)[:, None], np.arange(20) % 10)
        assert len(data.subset(ds, 0, seed=0)) == 0
        assert len(data.subset(ds, 1, seed=0)) == 10

    def test_rows_come_from_source(self):
        ds = data.Dataset(np.arange(30.0)[:, None], np.arange(30) % 3)
        sub = data.subset(ds, 4, seed=5)
        for x, y in zip(sub.samples[:, 0], sub.labels):
            assert int(x) % 3 == y

    def test_deterministic(self):
        ds = data.gen_toy(500, rng=np.random.default_rng(0))
        assert data.subset(ds, 10, 3).samples.tobytes() == data.subset(ds, 10, 3).samples.tobytes()

    def test_too_few(self):
        ds = data.Dataset(np.zeros((3, 1)), [0, 0, 1])
        with pytest.raises(ParameterError):
            data.subset(ds, 2, seed=0)


class TestDataset:
    def test_shape_checks(self):
        with pytest.raises(ParameterError):
            data.Dataset(np.zeros((2, 3)), modality="images")
        with pytest.raises(ParameterError):
            data.Dataset(np.zeros((2, 3)), labels=[0])

    def test_batch_and_unlabeled(self):
        ds = data.Dataset(np.zeros((3, 2, 2, 1)), [0, 1, 2], "images")
        assert ds.batch([0, 2]).shape == (2, 4)
        assert ds.unlabeled().labels is None
        with pytest.raises(ParameterError):
            ds.unlabeled().batch_labels([0])
