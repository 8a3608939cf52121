"""Test-time adaptation of point-cloud classifiers by sampling-variation weight averaging."""

from .adaptation import AdaptConfig, run_stream, svwa_adapt, tent_adapt, weight_average
from .geometry import PointCloud, farthest_point_sample, knn, patchify
from .model import PointNetLiteConfig, init_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
