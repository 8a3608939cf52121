"""Severity-parameterized corruptions and the test-time augmentation transforms.

Severity schedules are linear in the integer severity ``s`` (1..5) at
unit-sphere scale:

=============  ===========================  ==================
kind           parameter                    value at severity s
=============  ===========================  ==================
gaussian       noise std                    0.01 s
uniform        noise half-width             0.01 s
impulse        displacement / fraction      0.01 s / 0.04 s
background     added fraction               0.04 s
upsampling     added fraction               0.04 s
density-inc    added fraction               0.04 s
shear          off-diagonal magnitude       0.05 s
rotation       angle                        6 s degrees
cutout         radius                       0.1 + 0.04 s
density-dec    kept fraction                1 - 0.12 s
=============  ===========================  ==================
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import rotation_matrix
from .geometry import PointCloud, mix_seed

CORRUPTIONS = (
    "uniform", "gaussian", "background", "impulse", "upsampling",
    "shear", "rotation", "cutout", "density-dec", "density-inc",
)
AUGMENTATIONS = ("jitter", "rotation-z", "horizontal-flip", "uniform-scale")

# jitter used when new points are synthesized around existing ones
_DUPLICATE_JITTER = 0.01


def severity_param(kind: str, severity: int) -> float:
    """Magnitude of corruption ``kind`` at ``severity``."""
    s = severity
    table = {
        "gaussian": 0.01 * s,
        "uniform": 0.01 * s,
        "impulse": 0.01 * s,
        "background": 0.04 * s,
        "upsampling": 0.04 * s,
        "density-inc": 0.04 * s,
        "shear": 0.05 * s,
        "rotation": math.radians(6.0 * s),
        "cutout": 0.1 + 0.04 * s,
        "density-dec": 1.0 - 0.12 * s,
    }
    return table[kind]


def added_count(fraction: float, n: int) -> int:
    """``ceil(fraction * n)``, immune to representation error in ``fraction``."""
    return math.ceil(round(fraction * n, 9))


@dataclass(frozen=True)
class CorruptionSpec:
    """A corruption kind, severity and seed.

    ``magnitude`` overrides the severity table (tests use it to pin e.g. a
    zero noise level).
    """

    kind: str
    severity: int = 3
    seed: int = 0
    magnitude: float | None = None

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.kind!r}; choose from {CORRUPTIONS}")
        if not 1 <= int(self.severity) <= 5:
            raise ValueError("severity must lie in [1, 5]")

    @property
    def value(self) -> float:
        if self.magnitude is not None:
            return self.magnitude
        return severity_param(self.kind, self.severity)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "CorruptionSpec":
        """Parse ``"kind:severity"`` (severity defaults to 3)."""
        kind, _, sev = text.partition(":")
        return cls(kind.strip(), int(sev) if sev else 3, seed)

    def __str__(self) -> str:
        return f"{self.kind}:{self.severity}"


def _random_axis(rng) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def shear_matrix(rng, b: float) -> np.ndarray:
    """Unit upper-triangular shear with off-diagonals of magnitude ``b``."""
    m = np.eye(3)
    m[np.triu_indices(3, 1)] = b * rng.choice([-1.0, 1.0], size=3)
    return m


def apply_corruption(cloud: PointCloud, spec: CorruptionSpec) -> PointCloud:
    """Corrupt a unit-normalized cloud. Deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    pts = cloud.points
    n = len(pts)
    a = spec.value
    kind = spec.kind

    if kind == "gaussian":
        out = pts + rng.normal(0.0, 1.0, pts.shape) * a
    elif kind == "uniform":
        out = pts + rng.uniform(-1.0, 1.0, pts.shape) * a
    elif kind == "background":
        out = np.vstack([pts, rng.uniform(-1.0, 1.0, (added_count(a, n), 3))])
    elif kind == "impulse":
        frac = severity_param("background", spec.severity)
        chosen = rng.choice(n, size=min(n, added_count(frac, n)), replace=False)
        axes = rng.integers(3, size=len(chosen))
        out = pts.copy()
        out[chosen, axes] += a * rng.choice([-1.0, 1.0], size=len(chosen))
    elif kind == "upsampling":
        src = rng.integers(n, size=added_count(a, n))
        extra = pts[src] + rng.uniform(-_DUPLICATE_JITTER, _DUPLICATE_JITTER, (len(src), 3))
        out = np.vstack([pts, extra])
    elif kind == "shear":
        out = pts @ shear_matrix(rng, a).T
    elif kind == "rotation":
        out = pts @ rotation_matrix(_random_axis(rng), a).T
    elif kind == "cutout":
        anchor = pts[rng.integers(n)]
        keep = np.linalg.norm(pts - anchor, axis=1) > a
        if not keep.any():
            keep[rng.integers(n)] = True
        out = pts[keep]
    elif kind == "density-dec":
        k = max(1, int(round(a * n)))
        out = pts[np.sort(rng.choice(n, size=k, replace=False))]
    else:  # density-inc
        count = added_count(a, n)
        anchor = pts[rng.integers(n)]
        d2 = ((pts - anchor) ** 2).sum(axis=1)
        local = np.argsort(d2, kind="stable")[: max(1, min(n, count))]
        src = local[np.arange(count) % len(local)]
        extra = pts[src] + rng.normal(0.0, _DUPLICATE_JITTER, (count, 3))
        out = np.vstack([pts, extra])
    return PointCloud(out, cloud.label)


def corrupt_all(clouds: Sequence[PointCloud], spec: CorruptionSpec) -> list[PointCloud]:
    """Apply ``spec`` to each cloud with a per-cloud seed derived from ``spec.seed``."""
    return [
        apply_corruption(c, CorruptionSpec(spec.kind, spec.severity, mix_seed(spec.seed, i), spec.magnitude))
        for i, c in enumerate(clouds)
    ]


# --------------------------------------------------------------------------
# augmentations
# --------------------------------------------------------------------------

JITTER_SIGMA = 0.01
JITTER_CLIP = 0.05
SCALE_RANGE = (0.8, 1.25)


@dataclass(frozen=True)
class AugmentationSpec:
    """An augmentation kind and seed; ``jitter_sigma`` is a test hook."""

    kind: str
    seed: int = 0
    jitter_sigma: float = JITTER_SIGMA

    def __post_init__(self):
        if self.kind not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {self.kind!r}; choose from {AUGMENTATIONS}")


def apply_augmentation(batch: Sequence[PointCloud], spec: AugmentationSpec) -> list[PointCloud]:
    """Augment every cloud of ``batch`` with draws from one seeded generator."""
    rng = np.random.default_rng(spec.seed)
    out = []
    for cloud in batch:
        pts = cloud.points
        if spec.kind == "jitter":
            noise = np.clip(rng.normal(0.0, 1.0, pts.shape) * spec.jitter_sigma, -JITTER_CLIP, JITTER_CLIP)
            pts = pts + noise
        elif spec.kind == "rotation-z":
            t = rng.uniform(0.0, 2 * np.pi)
            c, s = np.cos(t), np.sin(t)
            pts = pts @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T
        elif spec.kind == "horizontal-flip":
            pts = pts.copy()
            pts[:, 0] = -pts[:, 0]
        else:
            pts = pts * rng.uniform(*SCALE_RANGE)
        out.append(PointCloud(pts, cloud.label))
    return out
