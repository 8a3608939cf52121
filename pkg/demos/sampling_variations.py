"""How a random FPS start point changes the subsample of one cloud.

Run with ``python demos/sampling_variations.py``.
"""

import numpy as np

from svwa.data import generate_shape
from svwa.geometry import farthest_point_sample, generate_variations, knn

cloud = generate_shape("torus", 1024, seed=3)
print(f"{cloud.points.shape[0]} points, label {cloud.label}")

# two FPS runs of 64 centers that differ only in where they start
a = farthest_point_sample(cloud, 64, start_index=0)
b = farthest_point_sample(cloud, 64, start_index=500)
shared = len(set(a.tolist()) & set(b.tolist()))
print(f"start 0 vs start 500: {shared} of 64 centers in common")

# the greedy rule: every new center is the point farthest from those already chosen
pts = cloud.points
d = np.linalg.norm(pts[:, None] - pts[a[:10]][None], axis=2).min(axis=1)
print("11th center is the argmax of the min-distance:", a[10] == np.argmax(d))

# six variations of a small batch; variation v seeds cloud b with mix_seed(mix_seed(base, v), b)
batch = [generate_shape(k, 1024, seed=k) for k in range(4)]
variations = generate_variations(batch, 6, 64, 8, base_seed=0)
starts = [[p.center_indices[0] for p in v] for v in variations.variations]
print("start index per variation (rows) and cloud (columns):")
print(np.array(starts))
print("patch tensor of variation 0:", variations.patches(0).shape)

# a patch is the K nearest neighbours of its center, the center itself first
center = pts[a[0]]
print("nearest neighbours of the first center:", knn(cloud, center, 5).tolist())
