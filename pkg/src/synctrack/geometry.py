"""Oriented 3D boxes, rigid transforms, cropping, IoU and tracking metrics.

Conventions: boxes are gravity-aligned, yaw is the rotation about the up
(z) axis, and the box frame puts the w/l/h extents on the x/y/z axes.
All functions here are pure and operate on float64 numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to the interval (-pi, pi]."""
    wrapped = (theta + math.pi) % TWO_PI - math.pi
    if wrapped == -math.pi:
        wrapped = math.pi
    return wrapped


def rotation_z(yaw: float) -> np.ndarray:
    """3x3 rotation matrix about the up-axis."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Box3D:
    """Oriented box: center (x, y, z), size (w, l, h), yaw about the up-axis."""

    center: np.ndarray
    size: tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        object.__setattr__(self, "center", center)
        w, l, h = self.size
        if not (w > 0 and l > 0 and h > 0):
            raise ValueError(f"box extents must be positive, got {self.size}")
        object.__setattr__(self, "size", (float(w), float(l), float(h)))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def volume(self) -> float:
        w, l, h = self.size
        return w * l * h

    def corners(self) -> np.ndarray:
        """All 8 corners in world coordinates, shape (8, 3)."""
        w, l, h = self.size
        signs = np.array(
            [[sx, sy, sz] for sz in (-1, 1) for sy in (-1, 1) for sx in (-1, 1)],
            dtype=np.float64,
        )
        local = signs * (np.array([w, l, h]) / 2.0)
        return local @ rotation_z(self.yaw).T + self.center

    def bev_corners(self) -> np.ndarray:
        """The 4 footprint corners in the x-y plane, counter-clockwise, shape (4, 2)."""
        w, l = self.size[0], self.size[1]
        local = np.array(
            [[w, l], [-w, l], [-w, -l], [w, -l]], dtype=np.float64
        ) / 2.0
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]


@dataclass(frozen=True)
class PointCloud:
    """Point positions (N, 3) with an optional aligned feature matrix (N, C)."""

    points: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.features is not None:
            feats = np.asarray(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"features shape {feats.shape} does not align with "
                    f"{pts.shape[0]} points"
                )
            object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return self.points.shape[0]

    def take(self, indices: np.ndarray) -> "PointCloud":
        """Row-subset (or re-ordering) of points and features."""
        feats = None if self.features is None else self.features[indices]
        return PointCloud(self.points[indices], feats)


def transform_to_box_frame(cloud: PointCloud, box: Box3D) -> PointCloud:
    """Express points in the box's canonical frame: p' = R(-yaw) (p - center)."""
    shifted = cloud.points - box.center
    return PointCloud(shifted @ rotation_z(-box.yaw).T, cloud.features)


def transform_from_box_frame(cloud: PointCloud, box: Box3D) -> PointCloud:
    """Inverse of :func:`transform_to_box_frame`."""
    return PointCloud(cloud.points @ rotation_z(box.yaw).T + box.center, cloud.features)


def crop_points_in_box(
    cloud: PointCloud, box: Box3D, margin: float = 0.0
) -> PointCloud:
    """Keep the points whose box-frame coordinates lie within the (inflated) extents.

    A point survives when |x| <= w/2 + margin, |y| <= l/2 + margin and
    |z| <= h/2 + margin in the box frame. Input order is preserved.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if len(cloud) == 0:
        return cloud
    local = transform_to_box_frame(cloud, box)
    half = np.array(box.size) / 2.0 + margin
    keep = np.all(np.abs(local.points) <= half, axis=1)
    return cloud.take(np.flatnonzero(keep))


def generate_search_region(
    frame: PointCloud, prev_box: Box3D, enlarge_xy: float, enlarge_z: float
) -> PointCloud:
    """Crop the frame around an enlarged previous box and canonicalize it.

    The crop keeps points inside prev_box grown by enlarge_xy in x and y and
    by enlarge_z in z; the surviving points are returned in prev_box's frame
    (centered, yaw-aligned). The result may be empty.
    """
    if enlarge_xy < 0 or enlarge_z < 0:
        raise ValueError("enlargements must be non-negative")
    if len(frame) == 0:
        return frame
    local = transform_to_box_frame(frame, prev_box)
    w, l, h = prev_box.size
    half = np.array([w / 2 + enlarge_xy, l / 2 + enlarge_xy, h / 2 + enlarge_z])
    keep = np.all(np.abs(local.points) <= half, axis=1)
    return local.take(np.flatnonzero(keep))


def _clip_polygon(poly: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Clip a convex polygon by the half-plane left of the directed edge a->b."""
    edge = b - a
    out = []
    n = poly.shape[0]
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        side_p = edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])
        side_q = edge[0] * (q[1] - a[1]) - edge[1] * (q[0] - a[0])
        if side_p >= 0:
            out.append(p)
        if (side_p > 0 and side_q < 0) or (side_p < 0 and side_q > 0):
            t = side_p / (side_p - side_q)
            out.append(p + t * (q - p))
    return np.array(out) if out else np.empty((0, 2))


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a counter-clockwise polygon."""
    if poly.shape[0] < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    """Overlap area of the two rotated footprint rectangles."""
    poly = a.bev_corners()
    clip = b.bev_corners()
    for i in range(4):
        poly = _clip_polygon(poly, clip[i], clip[(i + 1) % 4])
        if poly.shape[0] == 0:
            return 0.0
    area = _polygon_area(poly)
    return area if area > 1e-12 else 0.0


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volumetric intersection-over-union of two oriented boxes, in [0, 1]."""
    area = bev_intersection_area(a, b)
    if area == 0.0:
        return 0.0
    za0, za1 = a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2
    zb0, zb1 = b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0:
        return 0.0
    inter = area * dz
    union = a.volume + b.volume - inter
    return min(max(inter / union, 0.0), 1.0)


@dataclass(frozen=True)
class TrackMetrics:
    """One-pass tracking scores plus the per-frame curves they are built from."""

    success: float
    precision: float
    ious: list[float] = field(repr=False)
    distances: list[float] = field(repr=False)

    def __post_init__(self):
        if not (0.0 <= self.success <= 100.0 and 0.0 <= self.precision <= 100.0):
            raise ValueError("scores must lie in [0, 100]")


def tracking_metrics(pred: list[Box3D], gt: list[Box3D]) -> TrackMetrics:
    """Success and Precision over paired per-frame boxes.

    Success is 100 times the mean 3D IoU (the exact area under the
    overlap-success curve). Precision is 100 times the mean of
    1 - min(d, 2)/2 with d the 3D center distance in meters (the exact,
    normalized area under the distance-precision curve over [0, 2] m).
    """
    if len(pred) == 0 or len(pred) != len(gt):
        raise ValueError(
            f"need equal-length nonempty box lists, got {len(pred)} and {len(gt)}"
        )
    ious = [iou3d(p, g) for p, g in zip(pred, gt)]
    dists = [float(np.linalg.norm(p.center - g.center)) for p, g in zip(pred, gt)]
    success = 100.0 * float(np.mean(ious))
    precision = 100.0 * float(np.mean([1.0 - min(d, 2.0) / 2.0 for d in dists]))
    return TrackMetrics(success, precision, ious, dists)
