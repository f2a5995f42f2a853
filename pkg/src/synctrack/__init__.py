"""Single-branch 3D point-cloud single-object tracker.

A joint-attention encoder with attentive search-point sampling feeds a
voxel/BEV anchor-free detection head; training, tracking and evaluation run
on generated synthetic scenes through the `synctrack` command-line tool.
"""

__version__ = "0.1.0"

from .geometry import (
    Box3D,
    PointCloud,
    TrackMetrics,
    crop_points_in_box,
    generate_search_region,
    iou3d,
    tracking_metrics,
    transform_from_box_frame,
    transform_to_box_frame,
)
from .sampling import (
    SampleSelection,
    TokenSet,
    farthest_point_sampling,
    knn_indices,
    resize_to_count,
)

__all__ = [
    "Box3D",
    "PointCloud",
    "TrackMetrics",
    "crop_points_in_box",
    "generate_search_region",
    "iou3d",
    "tracking_metrics",
    "transform_from_box_frame",
    "transform_to_box_frame",
    "SampleSelection",
    "TokenSet",
    "farthest_point_sampling",
    "knn_indices",
    "resize_to_count",
    "__version__",
]
