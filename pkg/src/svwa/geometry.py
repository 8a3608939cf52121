"""Point-cloud sampling kernels: FPS, KNN, patchification and sampling variations.

All kernels are brute force (no spatial index) and break ties by the smallest
point index so that a ``(cloud, M, K, seed)`` tuple fixes the output bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .errors import SizeError

_MASK64 = (1 << 64) - 1


@dataclass
class PointCloud:
    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {self.points.shape}")
        if len(self.points) < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class PatchSet:
    """FPS centers of one cloud with their KNN patches.

    ``patches`` has shape (M, K, 3); with ``K == 1`` it is just the centers.
    """

    centers: np.ndarray
    patches: np.ndarray
    center_indices: np.ndarray
    variation_seed: int


@dataclass
class VariationSet:
    """``V`` sampling variations of the same batch.

    ``variations[v][b]`` is the PatchSet of cloud ``b`` under variation ``v``.
    """

    variations: list[list[PatchSet]]
    seeds: list[int]

    def __len__(self) -> int:
        return len(self.variations)

    def centers(self, v: int) -> np.ndarray:
        """Centers of variation ``v`` stacked into a (B, M, 3) array."""
        return np.stack([p.centers for p in self.variations[v]])

    def patches(self, v: int) -> np.ndarray:
        return np.stack([p.patches for p in self.variations[v]])


def mix_seed(base: int, index: int) -> int:
    """Derive a child seed from ``(base, index)`` with the splitmix64 finalizer."""
    z = ((base & _MASK64) * 0x9E3779B97F4A7C15 + (index & _MASK64) + 1) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


@numba.njit(cache=True)
def _fps_kernel(points, m, starts, counts, out):
    b_count, n, _ = points.shape
    min_d2 = np.empty(n)
    for b in range(b_count):
        for j in range(n):
            min_d2[j] = np.inf if j < counts[b] else -np.inf
        current = starts[b]
        for i in range(m):
            out[b, i] = current
            min_d2[current] = -np.inf
            cx, cy, cz = points[b, current, 0], points[b, current, 1], points[b, current, 2]
            best = -np.inf
            best_j = 0
            for j in range(n):
                dx = points[b, j, 0] - cx
                dy = points[b, j, 1] - cy
                dz = points[b, j, 2] - cz
                d2 = dx * dx + dy * dy + dz * dz
                if d2 < min_d2[j]:
                    min_d2[j] = d2
                # strict comparison keeps the smallest index among ties
                if min_d2[j] > best:
                    best = min_d2[j]
                    best_j = j
            current = best_j


def farthest_point_sample_batch(
    points: np.ndarray,
    m: int,
    start_indices,
    counts=None,
) -> np.ndarray:
    """FPS over a padded (B, N, 3) batch.

    ``counts[b]`` is the number of valid leading points of cloud ``b`` (padding
    rows are never selected).  Returns (B, m) int64 indices.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    b, n, _ = points.shape
    counts = np.full(b, n, dtype=np.int64) if counts is None else np.asarray(counts, dtype=np.int64)
    start_indices = np.asarray(start_indices, dtype=np.int64)
    if m < 1 or m > counts.min():
        raise SizeError(f"cannot draw {m} centers from clouds of {counts.min()} points")
    if (start_indices < 0).any() or (start_indices >= counts).any():
        raise SizeError("start index out of range")
    out = np.empty((b, m), dtype=np.int64)
    _fps_kernel(points, m, start_indices, counts, out)
    return out


def farthest_point_sample(cloud, m: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling of ``m`` distinct indices.

    The first index is ``start_index``; each following one maximizes the
    Euclidean distance to the nearest already-selected point.
    """
    pts = _as_points(cloud)
    if m > len(pts):
        raise SizeError(f"cannot draw {m} centers from {len(pts)} points")
    return farthest_point_sample_batch(pts[None], m, [start_index])[0]


def knn(cloud, query, k: int) -> np.ndarray:
    """Indices of the ``k`` points nearest to ``query``, sorted by (distance, index)."""
    pts = _as_points(cloud)
    if k < 1 or k > len(pts):
        raise SizeError(f"cannot take {k} neighbours from {len(pts)} points")
    diff = pts - np.asarray(query, dtype=np.float64)
    d2 = np.einsum("nk,nk->n", diff, diff)
    return np.argsort(d2, kind="stable")[:k]


def _build_patchset(pts: np.ndarray, idx: np.ndarray, k: int, seed: int) -> PatchSet:
    centers = pts[idx]
    if k == 1:
        patches = centers[:, None, :].copy()
    else:
        patches = np.stack([pts[knn(pts, c, k)] for c in centers])
    return PatchSet(centers, patches, idx, seed)


def _start_index(seed: int, n_points: int) -> int:
    return int(np.random.default_rng(seed).integers(n_points))


def patchify(cloud, m: int, k: int, seed: int) -> PatchSet:
    """FPS from a seeded random start, then KNN patches around each center."""
    pts = _as_points(cloud)
    if k < 1 or k > len(pts):
        raise SizeError(f"cannot take {k} neighbours from {len(pts)} points")
    idx = farthest_point_sample(pts, m, _start_index(seed, len(pts)))
    return _build_patchset(pts, idx, k, seed)


def patchify_batch(clouds: Sequence, m: int, k: int, seeds: Sequence[int]) -> list[PatchSet]:
    """``patchify`` for every cloud, with the FPS loop shared across the batch.

    Produces exactly ``[patchify(c, m, k, s) for c, s in zip(clouds, seeds)]``.
    """
    arrays = [_as_points(c) for c in clouds]
    counts = np.array([len(a) for a in arrays])
    if k < 1 or k > counts.min():
        raise SizeError(f"cannot take {k} neighbours from {counts.min()} points")
    padded = np.zeros((len(arrays), counts.max(), 3))
    for i, a in enumerate(arrays):
        padded[i, : len(a)] = a
    starts = [_start_index(s, n) for s, n in zip(seeds, counts)]
    idx = farthest_point_sample_batch(padded, m, starts, counts)
    return [_build_patchset(a, i, k, s) for a, i, s in zip(arrays, idx, seeds)]


def variation_seeds(base_seed: int, v_count: int) -> list[int]:
    return [mix_seed(base_seed, v) for v in range(v_count)]


def cloud_seeds(variation_seed: int, batch_size: int) -> list[int]:
    return [mix_seed(variation_seed, b) for b in range(batch_size)]


def generate_variations(
    batch: Sequence,
    v_count: int,
    m: int,
    k: int,
    base_seed: int,
    seeds: Sequence[int] | None = None,
) -> VariationSet:
    """Sample ``v_count`` different FPS/KNN representations of ``batch``.

    Variation ``v`` uses seed ``mix_seed(base_seed, v)`` and cloud ``b`` within
    it seed ``mix_seed(that, b)``.  ``seeds`` overrides the per-variation seeds
    (used by tests to force identical variations).
    """
    if v_count < 1:
        raise ValueError("need at least one variation")
    if seeds is None:
        seeds = variation_seeds(base_seed, v_count)
    elif len(seeds) != v_count:
        raise ValueError(f"expected {v_count} seeds, got {len(seeds)}")
    variations = [
        patchify_batch(batch, m, k, cloud_seeds(s, len(batch))) for s in seeds
    ]
    return VariationSet(variations, list(seeds))


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale to unit maximum norm.

    A cloud whose points all coincide is returned centered but unscaled.
    """
    pts = cloud.points - cloud.points.mean(axis=0)
    radius = np.sqrt(np.einsum("nk,nk->n", pts, pts).max())
    if radius > 0:
        pts = pts / radius
    return PointCloud(pts, cloud.label)
