"""Procedural 8-class point-cloud dataset, its binary file format, and batching."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import FormatError, VersionError
from .geometry import PointCloud, mix_seed, normalize_cloud
from .model import Reader

SHAPE_CLASSES = ("sphere", "cube", "cylinder", "cone", "torus", "plane", "helix", "pyramid")
NUM_CLASSES = len(SHAPE_CLASSES)

# per-instance nuisance: anisotropic axis scaling and an arbitrary rotation
NUISANCE_SCALE = (0.75, 1.25)
NUISANCE_MAX_ANGLE = np.pi


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sphere(rng, n):
    # antithetic pairs (plus a great-circle triangle for odd n) keep the centroid at 0
    pairs = _unit(rng.standard_normal(((n - 3 * (n % 2)) // 2, 3)))
    parts = [pairs, -pairs]
    if n % 2:
        a, b = np.linalg.qr(rng.standard_normal((3, 2)))[0].T
        angles = 2 * np.pi * np.arange(3) / 3
        parts.append(np.cos(angles)[:, None] * a + np.sin(angles)[:, None] * b)
    return np.vstack(parts)


def _cube(rng, n):
    pts = rng.uniform(-1, 1, (n, 3))
    axis = rng.integers(3, size=n)
    pts[np.arange(n), axis] = rng.choice([-1.0, 1.0], size=n)
    return pts


def _cylinder(rng, n, radius=0.6, half_height=1.0):
    side = 2 * np.pi * radius * 2 * half_height
    cap = np.pi * radius**2
    on_side = rng.uniform(size=n) < side / (side + 2 * cap)
    theta = rng.uniform(0, 2 * np.pi, n)
    r = np.where(on_side, radius, radius * np.sqrt(rng.uniform(size=n)))
    z = np.where(on_side, rng.uniform(-half_height, half_height, n),
                 rng.choice([-half_height, half_height], size=n))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _cone(rng, n, radius=0.8, height=1.6):
    slant = np.hypot(radius, height)
    lateral = np.pi * radius * slant
    base = np.pi * radius**2
    on_side = rng.uniform(size=n) < lateral / (lateral + base)
    theta = rng.uniform(0, 2 * np.pi, n)
    u = np.sqrt(rng.uniform(size=n))
    r = radius * u
    z = np.where(on_side, height * (1 - u), 0.0)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _torus(rng, n, major=1.0, minor=0.35):
    # rejection sampling of the tube angle for uniform surface density
    out = np.empty((0, 3))
    while len(out) < n:
        u = rng.uniform(0, 2 * np.pi, 2 * n)
        v = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.uniform(size=2 * n) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out = np.vstack([out, np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], 1)])
    return out[:n]


def _plane(rng, n):
    return np.stack([rng.uniform(-1, 1, n), rng.uniform(-0.6, 0.6, n), np.zeros(n)], axis=1)


def _helix(rng, n, radius=0.5, turns=3.0, height=2.0, tube=0.05):
    t = rng.uniform(0, 1, n)
    angle = 2 * np.pi * turns * t
    pts = np.stack([radius * np.cos(angle), radius * np.sin(angle), height * (t - 0.5)], axis=1)
    return pts + rng.normal(0, tube, (n, 3))


def _pyramid(rng, n, half=0.8, height=1.4):
    apex = np.array([0.0, 0.0, height])
    corners = np.array([[-half, -half, 0], [half, -half, 0], [half, half, 0], [-half, half, 0.0]])
    side_area = 0.5 * 2 * half * np.hypot(half, height)
    base_area = (2 * half) ** 2
    probs = np.array([side_area] * 4 + [base_area])
    face = rng.choice(5, size=n, p=probs / probs.sum())
    a, b = rng.uniform(size=(2, n))
    fold = a + b > 1
    a, b = np.where(fold, 1 - a, a), np.where(fold, 1 - b, b)
    c0 = corners[face % 4]
    c1 = corners[(face + 1) % 4]
    tri = c0 + a[:, None] * (c1 - c0) + b[:, None] * (apex - c0)
    base = np.stack([rng.uniform(-half, half, n), rng.uniform(-half, half, n), np.zeros(n)], 1)
    return np.where((face == 4)[:, None], base, tri)


_GENERATORS = dict(zip(SHAPE_CLASSES, (
    _sphere, _cube, _cylinder, _cone, _torus, _plane, _helix, _pyramid,
)))


def rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit ``axis``."""
    x, y, z = axis / np.linalg.norm(axis)
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def generate_shape(shape: int | str, n_points: int, seed: int, nuisance: bool = True) -> PointCloud:
    """Sample ``n_points`` on the surface of a procedural shape, unit-normalized."""
    if n_points < 8:
        raise ValueError("need at least 8 points per shape")
    label = SHAPE_CLASSES.index(shape) if isinstance(shape, str) else int(shape)
    rng = np.random.default_rng(seed)
    pts = _GENERATORS[SHAPE_CLASSES[label]](rng, n_points)
    if nuisance:
        pts = pts * rng.uniform(*NUISANCE_SCALE, 3)
        rot = rotation_matrix(_unit(rng.standard_normal(3)), rng.uniform(-1, 1) * NUISANCE_MAX_ANGLE)
        pts = pts @ rot.T
    return normalize_cloud(PointCloud(pts, label))


# --------------------------------------------------------------------------
# dataset
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    clouds: list[PointCloud]
    train_indices: np.ndarray
    test_indices: np.ndarray
    num_classes: int = NUM_CLASSES
    seed: int | None = None

    def split(self, name: str) -> list[PointCloud]:
        idx = {"train": self.train_indices, "test": self.test_indices}[name]
        return [self.clouds[i] for i in idx]


def _f32_exact(cloud: PointCloud) -> PointCloud:
    # the file stores f32; round now so in-memory and loaded datasets agree bitwise
    return PointCloud(cloud.points.astype(np.float32).astype(np.float64), cloud.label)


def make_dataset(
    num_per_class_train: int,
    num_per_class_test: int,
    n_points: int = 1024,
    seed: int = 0,
) -> Dataset:
    """Balanced dataset with disjoint train/test splits; clouds are stored class-major."""
    if num_per_class_train < 1 or num_per_class_test < 1:
        raise ValueError("per-class counts must be >= 1")
    clouds, train, test = [], [], []
    per_class = num_per_class_train + num_per_class_test
    for label in range(NUM_CLASSES):
        for j in range(per_class):
            cloud = generate_shape(label, n_points, mix_seed(seed, label * per_class + j))
            (train if j < num_per_class_train else test).append(len(clouds))
            clouds.append(_f32_exact(cloud))
    return Dataset(clouds, np.array(train), np.array(test), NUM_CLASSES, seed)


DATASET_MAGIC = b"PCD3"
SPLIT_MAGIC = b"PSPL"
DATASET_VERSION = 1


def split_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".split")


def dataset_bytes(ds: Dataset) -> tuple[bytes, bytes]:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<HII", DATASET_VERSION, ds.num_classes, len(ds.clouds)))
    for cloud in ds.clouds:
        buf.write(struct.pack("<II", cloud.label, len(cloud)))
        buf.write(cloud.points.astype("<f4").tobytes())
    split = io.BytesIO()
    split.write(SPLIT_MAGIC)
    split.write(struct.pack("<HII", DATASET_VERSION, len(ds.train_indices), len(ds.test_indices)))
    for idx in (ds.train_indices, ds.test_indices):
        split.write(np.asarray(idx, dtype="<u4").tobytes())
    return buf.getvalue(), split.getvalue()


def _check_header(r: Reader, magic: bytes) -> None:
    if r.take(4, "magic") != magic:
        raise FormatError(f"bad magic, expected {magic!r}", 0)
    (version,) = r.unpack("H", "version")
    if version != DATASET_VERSION:
        raise VersionError(f"version {version}, expected {DATASET_VERSION}", 4)


def dataset_from_bytes(data: bytes, split: bytes) -> Dataset:
    r = Reader(data)
    _check_header(r, DATASET_MAGIC)
    num_classes, num_clouds = r.unpack("II", "header")
    clouds = []
    for i in range(num_clouds):
        pos = r.pos
        label, n = r.unpack("II", f"cloud {i} header")
        if label >= num_classes or n < 1:
            raise FormatError(f"cloud {i}: label {label}, {n} points", pos)
        raw = r.take(12 * n, f"cloud {i} points")
        pts = np.frombuffer(raw, dtype="<f4").reshape(n, 3).astype(np.float64)
        clouds.append(PointCloud(pts, int(label)))
    r.done()

    s = Reader(split)
    _check_header(s, SPLIT_MAGIC)
    n_train, n_test = s.unpack("II", "split counts")
    indices = []
    for n in (n_train, n_test):
        pos = s.pos
        idx = np.frombuffer(s.take(4 * n, "split indices"), dtype="<u4").astype(np.int64)
        if n and idx.max() >= num_clouds:
            raise FormatError("split index out of range", pos)
        indices.append(idx)
    s.done()
    if np.intersect1d(*indices).size:
        raise FormatError("train and test splits overlap")
    return Dataset(clouds, indices[0], indices[1], num_classes)


def save_dataset(ds: Dataset, path) -> None:
    data, split = dataset_bytes(ds)
    Path(path).write_bytes(data)
    split_path(path).write_bytes(split)


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes(), split_path(path).read_bytes())


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


@dataclass
class Batch:
    clouds: list[PointCloud]
    remainder: bool = False
    indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.clouds)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clouds])


def shuffled_order(n: int, seed: int) -> np.ndarray:
    """Seeded Fisher-Yates permutation of ``range(n)``."""
    rng = np.random.default_rng(seed)
    order = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(i + 1))
        order[i], order[j] = order[j], order[i]
    return order


def batch_iter(
    dataset: Dataset | Sequence[PointCloud],
    split: str = "test",
    batch_size: int = 128,
    shuffle_seed: int | None = 0,
) -> Iterator[Batch]:
    """Fixed-size batches over a split; the trailing short batch is flagged."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    clouds = dataset.split(split) if isinstance(dataset, Dataset) else list(dataset)
    order = np.arange(len(clouds)) if shuffle_seed is None else shuffled_order(len(clouds), shuffle_seed)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield Batch([clouds[i] for i in idx], len(idx) < batch_size, idx)
