"""Synthetic LiDAR sequences and the on-disk dataset layout.

A scene is a single cuboid target moving at constant velocity and yaw rate
through uniform clutter, observed as surface samples with isotropic Gaussian
sensor noise. Datasets live as plain 7-bit text: one `frame_NNNNNN.xyz` file
per frame (one `x y z` point per line) and a `gt.boxes` file with one
`x y z w l h theta` line per frame, all at 17 significant digits.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass

import numpy as np

from .geometry import Box3D, PointCloud

# margins (m) around the target trajectory that bound the clutter region
CLUTTER_MARGIN_XY = 4.0
CLUTTER_MARGIN_Z = 2.0


class DatasetError(ValueError):
    """Malformed dataset file; the message names the file and line."""


@dataclass(frozen=True)
class SceneSpec:
    """One synthetic sequence: target geometry, motion and sensing knobs."""

    extents: tuple[float, float, float] = (1.9, 4.4, 1.6)
    start_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    start_yaw: float = 0.0
    velocity: tuple[float, float, float] = (0.2, 0.0, 0.0)
    yaw_rate: float = 0.0
    frames: int = 10
    surface_density: float = 60.0
    clutter_density: float = 0.2
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("need at least one frame")
        if self.surface_density < 0 or self.clutter_density < 0:
            raise ValueError("densities must be non-negative")
        if any(e <= 0 for e in self.extents):
            raise ValueError("extents must be positive")


def _surface_points(rng: np.random.Generator, box: Box3D, density: float) -> np.ndarray:
    """Uniform samples on the cuboid surface, count = round(density * area)."""
    w, l, h = box.size
    face_areas = np.array([l * h, l * h, w * h, w * h, w * l, w * l])
    total_area = face_areas.sum()
    n = max(1, int(round(density * total_area)))
    faces = rng.choice(6, size=n, p=face_areas / total_area)
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    local = np.empty((n, 3))
    half = np.array([w, l, h]) / 2.0
    for face in range(6):
        sel = faces == face
        axis = face // 2
        sign = 1.0 if face % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        local[sel, axis] = sign * half[axis]
        local[sel, others[0]] = u[sel] * 2.0 * half[others[0]]
        local[sel, others[1]] = v[sel] * 2.0 * half[others[1]]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def _scene_bounds(boxes: list[Box3D]) -> tuple[np.ndarray, np.ndarray]:
    centers = np.array([b.center for b in boxes])
    half = np.array(boxes[0].size) / 2.0
    margin = np.array([CLUTTER_MARGIN_XY, CLUTTER_MARGIN_XY, CLUTTER_MARGIN_Z])
    return centers.min(axis=0) - half - margin, centers.max(axis=0) + half + margin


def generate_sequence(spec: SceneSpec) -> tuple[list[PointCloud], list[Box3D]]:
    """Frames and ground-truth boxes for one scene, deterministic per seed."""
    if spec.surface_density == 0:
        raise ValueError("zero surface density produces an untrackable target")
    rng = np.random.default_rng(spec.seed)
    boxes = []
    center = np.array(spec.start_center, dtype=np.float64)
    yaw = spec.start_yaw
    for _ in range(spec.frames):
        boxes.append(Box3D(center.copy(), spec.extents, yaw))
        center = center + np.array(spec.velocity)
        yaw += spec.yaw_rate

    lo, hi = _scene_bounds(boxes)
    volume = float(np.prod(hi - lo))
    n_clutter = int(round(spec.clutter_density * volume))

    frames = []
    for box in boxes:
        pts = _surface_points(rng, box, spec.surface_density)
        if spec.noise_sigma > 0:
            pts = pts + rng.normal(0.0, spec.noise_sigma, size=pts.shape)
        if n_clutter > 0:
            clutter = rng.uniform(lo, hi, size=(n_clutter, 3))
            pts = np.concatenate([pts, clutter], axis=0)
        frames.append(PointCloud(pts))
    return frames, boxes


@dataclass
class SequenceData:
    """A named sequence: frames plus one ground-truth box per frame."""

    name: str
    frames: list[PointCloud]
    boxes: list[Box3D]


@dataclass(frozen=True)
class SceneFamilySpec:
    """Knobs for a batch of generated sequences; per-sequence pose and motion
    are drawn uniformly from the stated ranges."""

    sequences: int = 8
    frames: int = 12
    extents: tuple[float, float, float] = (1.9, 4.4, 1.6)
    surface_density: float = 60.0
    clutter_density: float = 0.2
    noise_sigma: float = 0.01
    speed_min: float = 0.05
    speed_max: float = 0.25
    yaw_rate_max: float = 0.02


def expand_scene_family(family: SceneFamilySpec, seed: int) -> list[SceneSpec]:
    """Per-sequence scene specs with drawn heading, speed, yaw rate and seed."""
    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(family.sequences):
        heading = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(family.speed_min, family.speed_max)
        yaw_rate = rng.uniform(-family.yaw_rate_max, family.yaw_rate_max)
        start = rng.uniform(-0.5, 0.5, 3) * np.array([1.0, 1.0, 0.3])
        specs.append(
            SceneSpec(
                extents=family.extents,
                start_center=tuple(start),
                start_yaw=heading,
                velocity=(
                    speed * math.cos(heading),
                    speed * math.sin(heading),
                    0.0,
                ),
                yaw_rate=yaw_rate,
                frames=family.frames,
                surface_density=family.surface_density,
                clutter_density=family.clutter_density,
                noise_sigma=family.noise_sigma,
                seed=int(rng.integers(2**31)),
            )
        )
    return specs


def generate_dataset(family: SceneFamilySpec, seed: int) -> list[SequenceData]:
    """Generate the whole family as named sequences, deterministic per seed."""
    sequences = []
    for i, spec in enumerate(expand_scene_family(family, seed)):
        frames, boxes = generate_sequence(spec)
        sequences.append(SequenceData(f"seq_{i:04d}", frames, boxes))
    return sequences


_FLOAT_FMT = ".17g"


def _format_row(values) -> str:
    return " ".join(format(float(v), _FLOAT_FMT) for v in values)


def write_boxes(path: str, boxes: list[Box3D]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for b in boxes:
            fh.write(_format_row([*b.center, *b.size, b.yaw]) + "\n")


def read_boxes(path: str) -> list[Box3D]:
    boxes = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 7:
                raise DatasetError(
                    f"{path}:{lineno}: expected 7 fields `x y z w l h theta`, "
                    f"got {len(fields)}"
                )
            try:
                x, y, z, w, l, h, theta = (float(f) for f in fields)
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            boxes.append(Box3D(np.array([x, y, z]), (w, l, h), theta))
    return boxes


def _write_frame(path: str, cloud: PointCloud) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for p in cloud.points:
            fh.write(_format_row(p) + "\n")


def _read_frame(path: str) -> PointCloud:
    points = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 3:
                raise DatasetError(
                    f"{path}:{lineno}: expected 3 coordinates, got {len(fields)}"
                )
            try:
                points.append([float(f) for f in fields])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
    return PointCloud(np.array(points).reshape(-1, 3))


def write_dataset(root: str, sequences: list[SequenceData]) -> None:
    """Lay out `<root>/seq_<id>/frame_<NNNNNN>.xyz` plus `gt.boxes` per sequence."""
    os.makedirs(root, exist_ok=True)
    for seq in sequences:
        seq_dir = os.path.join(root, seq.name)
        os.makedirs(seq_dir, exist_ok=True)
        for i, frame in enumerate(seq.frames):
            _write_frame(os.path.join(seq_dir, f"frame_{i:06d}.xyz"), frame)
        write_boxes(os.path.join(seq_dir, "gt.boxes"), seq.boxes)


def read_dataset(root: str) -> list[SequenceData]:
    """Load every `seq_*` directory under root; an empty root is an empty dataset."""
    if not os.path.isdir(root):
        raise DatasetError(f"{root}: not a directory")
    sequences = []
    for name in sorted(os.listdir(root)):
        seq_dir = os.path.join(root, name)
        if not (os.path.isdir(seq_dir) and re.fullmatch(r"seq_.+", name)):
            continue
        frame_files = sorted(
            f for f in os.listdir(seq_dir) if re.fullmatch(r"frame_\d{6}\.xyz", f)
        )
        frames = [_read_frame(os.path.join(seq_dir, f)) for f in frame_files]
        gt_path = os.path.join(seq_dir, "gt.boxes")
        if not os.path.isfile(gt_path):
            raise DatasetError(f"{gt_path}: missing ground-truth boxes")
        boxes = read_boxes(gt_path)
        if len(boxes) != len(frames):
            raise DatasetError(
                f"{gt_path}: {len(boxes)} boxes for {len(frames)} frames"
            )
        sequences.append(SequenceData(name, frames, boxes))
    return sequences
