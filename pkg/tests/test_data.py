import struct

import numpy as np
import pytest

from svwa import data as D
from svwa.errors import FormatError, VersionError
from svwa.geometry import PointCloud


@pytest.fixture(scope="module")
def small():
    return D.make_dataset(3, 2, n_points=64, seed=11)


class TestShapes:
    def test_sphere_without_nuisance_on_unit_sphere(self):
        c = D.generate_shape("sphere", 1024, seed=0, nuisance=False)
        norms = np.linalg.norm(c.points, axis=1)
        assert norms.min() >= 1 - 1e-6 and norms.max() <= 1.0 + 1e-15

    @pytest.mark.parametrize("shape", D.SHAPE_CLASSES)
    def test_normalized_and_labelled(self, shape):
        c = D.generate_shape(shape, 200, seed=3)
        assert c.label == D.SHAPE_CLASSES.index(shape)
        assert len(c) == 200
        np.testing.assert_allclose(c.points.mean(axis=0), 0.0, atol=1e-12)
        assert np.linalg.norm(c.points, axis=1).max() == pytest.approx(1.0, abs=1e-12)

    def test_same_seed_bitwise(self):
        a = D.generate_shape(4, 128, seed=9)
        b = D.generate_shape(4, 128, seed=9)
        assert a.points.tobytes() == b.points.tobytes()

    def test_odd_sphere_count(self):
        c = D.generate_shape("sphere", 9, seed=1, nuisance=False)
        assert len(c) == 9

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            D.generate_shape("cube", 7, seed=0)

    def test_rotation_matrix_orthonormal(self):
        r = D.rotation_matrix(np.array([1.0, 2.0, -0.5]), 0.7)
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-14)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-14)

    def test_cube_vs_sphere_separable(self):
        # nearest centroid on two simple statistics: mean radius and its spread
        def stats(c):
            r = np.linalg.norm(c.points, axis=1)
            return np.array([r.mean(), r.std()])

        train = {k: [stats(D.generate_shape(k, 1024, s)) for s in range(20)] for k in ("cube", "sphere")}
        centroids = {k: np.mean(v, axis=0) for k, v in train.items()}
        correct = 0
        for k in ("cube", "sphere"):
            for s in range(100, 150):
                f = stats(D.generate_shape(k, 1024, s))
                guess = min(centroids, key=lambda c: np.linalg.norm(f - centroids[c]))
                correct += guess == k
        assert correct / 100 > 0.95


class TestDataset:
    def test_desk_split_sizes_arithmetic(self):
        assert 8 * 250 == 2000 and 8 * 50 == 400
        ds = D.make_dataset(2, 1, n_points=16, seed=0)
        assert len(ds.train_indices) == 16 and len(ds.test_indices) == 8

    def test_balanced_and_disjoint(self, small):
        for split in ("train", "test"):
            labels = [c.label for c in small.split(split)]
            assert np.bincount(labels, minlength=8).tolist() == [len(labels) // 8] * 8
        assert not set(small.train_indices) & set(small.test_indices)
        assert small.seed == 11

    def test_regeneration_bitwise(self, small):
        again = D.make_dataset(3, 2, n_points=64, seed=11)
        assert D.dataset_bytes(again) == D.dataset_bytes(small)

    def test_different_seed_differs(self, small):
        assert D.dataset_bytes(D.make_dataset(3, 2, 64, seed=12))[0] != D.dataset_bytes(small)[0]

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            D.make_dataset(0, 1)


class TestFormat:
    def test_round_trip(self, small, tmp_path):
        path = tmp_path / "d.pcd"
        D.save_dataset(small, path)
        loaded = D.load_dataset(path)
        assert D.dataset_bytes(loaded) == D.dataset_bytes(small)
        for a, b in zip(loaded.clouds, small.clouds):
            assert a.points.tobytes() == b.points.tobytes() and a.label == b.label
            assert np.linalg.norm(a.points, axis=1).max() == pytest.approx(1.0, abs=1e-6)
        assert D.split_path(path).exists()

    def test_header_layout(self, small):
        data, split = D.dataset_bytes(small)
        assert data[:4] == b"PCD3"
        assert struct.unpack("<HII", data[4:14]) == (1, 8, 40)
        assert struct.unpack("<II", data[14:22]) == (0, 64)
        x0 = struct.unpack("<3f", data[22:34])
        np.testing.assert_array_equal(x0, small.clouds[0].points[0])
        assert split[:4] == b"PSPL"
        assert struct.unpack("<HII", split[4:14]) == (1, 24, 16)

    def test_truncation_offsets(self, small):
        data, split = D.dataset_bytes(small)
        for cut in (3, 10, 20, 30, len(data) - 1):
            with pytest.raises(FormatError, match="byte offset"):
                D.dataset_from_bytes(data[:cut], split)
        with pytest.raises(FormatError):
            D.dataset_from_bytes(data, split[:-2])

    def test_bad_magic_and_version(self, small):
        data, split = D.dataset_bytes(small)
        with pytest.raises(FormatError):
            D.dataset_from_bytes(b"NOPE" + data[4:], split)
        with pytest.raises(VersionError):
            D.dataset_from_bytes(data[:4] + struct.pack("<H", 9) + data[6:], split)

    def test_overlapping_split_rejected(self, small):
        data, _ = D.dataset_bytes(small)
        bad = D.Dataset(small.clouds, np.array([0, 1]), np.array([1, 2]))
        with pytest.raises(FormatError):
            D.dataset_from_bytes(data, D.dataset_bytes(bad)[1])

    def test_label_out_of_range(self, small):
        data, split = D.dataset_bytes(small)
        bad = data[:14] + struct.pack("<I", 8) + data[18:]
        with pytest.raises(FormatError):
            D.dataset_from_bytes(bad, split)


class TestBatching:
    def clouds(self, n=10):
        return [PointCloud(np.full((2, 3), i), i) for i in range(n)]

    def test_partition(self):
        batches = list(D.batch_iter(self.clouds(), "test", 4, shuffle_seed=3))
        labels = [c.label for b in batches for c in b.clouds]
        assert sorted(labels) == list(range(10))
        assert [len(b) for b in batches] == [4, 4, 2]
        assert [b.remainder for b in batches] == [False, False, True]

    def test_same_seed_same_order(self):
        a = [b.indices.tolist() for b in D.batch_iter(self.clouds(), "test", 3, 5)]
        b = [b.indices.tolist() for b in D.batch_iter(self.clouds(), "test", 3, 5)]
        assert a == b

    def test_no_shuffle(self):
        batches = list(D.batch_iter(self.clouds(6), "test", 3, shuffle_seed=None))
        assert [b.labels.tolist() for b in batches] == [[0, 1, 2], [3, 4, 5]]

    def test_fisher_yates_is_permutation(self):
        order = D.shuffled_order(50, 7)
        assert sorted(order.tolist()) == list(range(50))
        assert order.tolist() != list(range(50))

    def test_default_batch_size(self):
        import inspect

        assert inspect.signature(D.batch_iter).parameters["batch_size"].default == 128

    def test_batch_size_validated(self):
        with pytest.raises(ValueError):
            list(D.batch_iter(self.clouds(), "test", 1))

    def test_dataset_split(self, small):
        batches = list(D.batch_iter(small, "train", 5, 0))
        assert sum(len(b) for b in batches) == 24
