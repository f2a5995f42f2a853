"""Online tracking loop, training loop and benchmark driver."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, default_stages
from .bevhead import (
    BevDecoder,
    BevPrediction,
    FeatureFusion,
    HeadMaps,
    VoxelGridConfig,
    build_targets,
    decode_box,
    detection_loss,
    voxelize,
)
from .geometry import (
    Box3D,
    PointCloud,
    TrackMetrics,
    crop_points_in_box,
    generate_search_region,
    rotation_z,
    tracking_metrics,
    transform_to_box_frame,
    wrap_angle,
)
from .numerics import adam_step, engine, zero_grads
from .sampling import resize_to_count


@dataclass(frozen=True)
class TrackerConfig:
    """Point budgets, architecture widths, loss weights and schedule."""

    n_template: int = 512
    n_search: int = 1024
    heads: int = 2
    channels: tuple[int, ...] = (32, 64, 128)
    tokens: tuple[int, ...] = (256, 128, 64)
    knn_k: int = 16
    head_channels: int = 32
    grid: VoxelGridConfig = field(default_factory=VoxelGridConfig)
    enlarge_xy: float = 2.0
    enlarge_z: float = 1.0
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 2.0)
    mask_radius: float = 2.0
    epochs: int = 40
    batch: int = 64
    lr: float = 0.001
    lr_decay: float = 5.0
    lr_decay_every: int = 10
    attentive_softmax: bool = False
    min_search_points: int = 5
    jitter_translation: float = 0.3
    jitter_yaw_deg: float = 5.0
    seed: int = 0
    precision: str = "single"

    def __post_init__(self):
        if len(self.channels) != len(self.tokens):
            raise ValueError("channels and tokens must list one value per stage")
        if self.n_template < self.tokens[0] or self.n_search < self.tokens[0]:
            raise ValueError("point budgets must cover the stage output counts")
        if self.enlarge_xy < 0 or self.enlarge_z < 0:
            raise ValueError("search enlargements must be non-negative")
        if self.precision not in ("single", "double"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def stage_configs(self):
        return default_stages(self.channels, self.tokens, self.heads, self.knn_k)


class TrackerNet:
    """Backbone, multi-scale fusion and BEV decoder under one parameter set."""

    def __init__(self, config: TrackerConfig, seed: int | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed if seed is None else seed)
        dtype = config.dtype
        self.backbone = Backbone(
            config.stage_configs(), rng, dtype, config.attentive_softmax
        )
        chain = [config.channels[0], *config.channels]
        self.fusion = FeatureFusion(chain, config.head_channels, rng, "fusion", dtype)
        self.decoder = BevDecoder(config.head_channels, rng, "decoder", dtype)

    def parameters(self):
        return (
            self.backbone.parameters()
            + self.fusion.parameters()
            + self.decoder.parameters()
        )

    def parameter_counts(self) -> dict[str, int]:
        counts = {
            "backbone": sum(p.size for p in self.backbone.parameters()),
            "fusion": sum(p.size for p in self.fusion.parameters()),
            "decoder": sum(p.size for p in self.decoder.parameters()),
        }
        counts["total"] = sum(counts.values())
        return counts

    def forward_maps(
        self, template: PointCloud, search: PointCloud, training: bool = False
    ) -> HeadMaps:
        out = self.backbone(template, search)
        search_sets = [s for _t, s in out.stages]
        fused = self.fusion(out.search_stage0, search_sets)
        volume = voxelize(out.search_stage0.coords, fused, self.config.grid)
        return self.decoder(volume, training)

    def predict(self, template: PointCloud, search: PointCloud) -> BevPrediction:
        return BevPrediction.from_maps(self.forward_maps(template, search))


@dataclass
class TrackResult:
    """Per-frame predicted boxes; carried marks frames where the search
    region was too sparse and the previous box was reused."""

    boxes: list[Box3D]
    carried: list[bool]


def _frame_seed(seed: int, frame: int) -> int:
    return seed * 1_000_003 + frame


def track_sequence(
    frames: list[PointCloud],
    init_box: Box3D,
    model,
    config: TrackerConfig,
) -> TrackResult:
    """Track one sequence online from the initial box.

    The template is cropped and centered from the first frame and fixed. For
    every later frame, the search region comes from the previous prediction;
    a region with fewer than config.min_search_points points carries the
    previous box forward and flags the frame.
    """
    if not frames:
        raise ValueError("need at least one frame")
    template_crop = crop_points_in_box(frames[0], init_box)
    if len(template_crop) == 0:
        raise ValueError("initial box contains no points; cannot build a template")
    template = resize_to_count(
        transform_to_box_frame(template_crop, init_box),
        config.n_template,
        _frame_seed(config.seed, 0),
    )

    boxes = [init_box]
    carried = [False]
    prev = init_box
    for i in range(1, len(frames)):
        region = generate_search_region(
            frames[i], prev, config.enlarge_xy, config.enlarge_z
        )
        if len(region) < config.min_search_points:
            boxes.append(prev)
            carried.append(True)
            continue
        search = resize_to_count(region, config.n_search, _frame_seed(config.seed, i))
        det = decode_box(model.predict(template, search), config.grid, prev)
        prev = det.box
        boxes.append(det.box)
        carried.append(False)
    return TrackResult(boxes, carried)


@dataclass(frozen=True)
class TrainingSample:
    """Resized template and search clouds with the target box in the search frame."""

    template: PointCloud
    search: PointCloud
    gt_box: Box3D


def make_training_samples(
    sequences, config: TrackerConfig, seed: int
) -> list[TrainingSample]:
    """Frame-pair samples: template from frame i, search around a jittered
    copy of frame i's box in frame i+1, supervised by frame i+1's box."""
    rng = np.random.default_rng(seed)
    samples = []
    for seq in sequences:
        frames, gts = seq.frames, seq.boxes
        for i in range(len(frames) - 1):
            crop = crop_points_in_box(frames[i], gts[i])
            if len(crop) == 0:
                continue
            template = resize_to_count(
                transform_to_box_frame(crop, gts[i]),
                config.n_template,
                int(rng.integers(2**31)),
            )
            jitter = rng.uniform(
                -config.jitter_translation, config.jitter_translation, 3
            )
            jyaw = math.radians(
                rng.uniform(-config.jitter_yaw_deg, config.jitter_yaw_deg)
            )
            prev = Box3D(gts[i].center + jitter, gts[i].size, gts[i].yaw + jyaw)
            region = generate_search_region(
                frames[i + 1], prev, config.enlarge_xy, config.enlarge_z
            )
            if len(region) < config.min_search_points:
                continue
            search = resize_to_count(
                region, config.n_search, int(rng.integers(2**31))
            )
            nxt = gts[i + 1]
            local_center = rotation_z(-prev.yaw) @ (nxt.center - prev.center)
            gt_local = Box3D(local_center, nxt.size, wrap_angle(nxt.yaw - prev.yaw))
            samples.append(TrainingSample(template, search, gt_local))
    return samples


def learning_rate(config: TrackerConfig, epoch: int) -> float:
    """Step schedule: the rate divides by lr_decay every lr_decay_every epochs."""
    return config.lr / config.lr_decay ** (epoch // config.lr_decay_every)


def train_model(
    samples: list[TrainingSample],
    config: TrackerConfig,
    seed: int,
    max_steps: int | None = None,
) -> tuple[TrackerNet, list[dict[str, float]]]:
    """Adam training over shuffled mini-batches; returns the model and the
    per-step loss trace. Fully deterministic given the seed."""
    if not samples:
        raise ValueError("empty training set")
    model = TrackerNet(config, seed)
    params = model.parameters()
    order_rng = np.random.default_rng(seed + 1)
    trace: list[dict[str, float]] = []
    steps = 0
    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        order = order_rng.permutation(len(samples))
        for lo in range(0, len(order), config.batch):
            batch = order[lo : lo + config.batch]
            zero_grads(params)
            total = None
            comps_sum = {"focal": 0.0, "offset": 0.0, "z": 0.0}
            for si in batch:
                s = samples[si]
                maps = model.forward_maps(s.template, s.search, training=True)
                targets = build_targets(s.gt_box, config.grid, config.mask_radius)
                loss, comps = detection_loss(maps, targets, config.loss_weights)
                total = loss if total is None else engine.add(total, loss)
                for key in comps_sum:
                    comps_sum[key] += comps[key]
            total = engine.scale(total, 1.0 / len(batch))
            total.backward()
            adam_step(params, lr=lr)
            entry = {k: v / len(batch) for k, v in comps_sum.items()}
            entry.update(epoch=float(epoch), lr=lr, total=float(total.data))
            trace.append(entry)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                return model, trace
    return model, trace


@dataclass
class BenchmarkResult:
    """Per-sequence metrics and the frame-weighted aggregate."""

    per_sequence: list[tuple[str, int, TrackMetrics]]
    mean_success: float
    mean_precision: float
    total_frames: int


def model_tracker(model, config: TrackerConfig):
    """Adapter turning a model into a (frames, init_box) -> TrackResult callable."""

    def run(frames, init_box):
        return track_sequence(frames, init_box, model, config)

    return run


def stationary_tracker(frames, init_box) -> TrackResult:
    """Baseline that predicts the initial box for every frame."""
    return TrackResult([init_box] * len(frames), [False] * len(frames))


def run_benchmark(sequences, track_fn) -> BenchmarkResult:
    """Evaluate a tracker on every sequence; aggregate by frame count."""
    per_sequence = []
    for seq in sequences:
        result = track_fn(seq.frames, seq.boxes[0])
        metrics = tracking_metrics(result.boxes, seq.boxes)
        per_sequence.append((seq.name, len(seq.frames), metrics))
    total = sum(frames for _n, frames, _m in per_sequence)
    success = sum(f * m.success for _n, f, m in per_sequence) / total
    precision = sum(f * m.precision for _n, f, m in per_sequence) / total
    return BenchmarkResult(per_sequence, success, precision, total)


def write_metrics_csv(path, result: BenchmarkResult) -> None:
    lines = ["sequence,frames,success,precision"]
    for name, frames, metrics in result.per_sequence:
        lines.append(f"{name},{frames},{metrics.success:.6f},{metrics.precision:.6f}")
    lines.append(
        f"MEAN,{result.total_frames},{result.mean_success:.6f},"
        f"{result.mean_precision:.6f}"
    )
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


WEIGHTS_HEADER = "SYNCTRACK-WEIGHTS v1"


class WeightsError(ValueError):
    """Malformed or mismatched weights file."""


def save_weights(path, model: TrackerNet) -> None:
    """Versioned text format: header, then one `name shape values...` line
    per parameter at full float precision."""
    lines = [WEIGHTS_HEADER]
    for p in model.parameters():
        shape = ",".join(str(d) for d in p.data.shape)
        values = " ".join(format(float(v), ".17g") for v in p.data.reshape(-1))
        lines.append(f"{p.name} {shape} {values}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_weights(path, model: TrackerNet) -> None:
    by_name = {p.name: p for p in model.parameters()}
    seen = set()
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n")
        if header != WEIGHTS_HEADER:
            raise WeightsError(f"{path}:1: expected header {WEIGHTS_HEADER!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.split()
            name, shape_text, values = fields[0], fields[1], fields[2:]
            if name not in by_name:
                raise WeightsError(f"{path}:{lineno}: unknown parameter {name!r}")
            shape = tuple(int(d) for d in shape_text.split(","))
            param = by_name[name]
            if shape != param.data.shape:
                raise WeightsError(
                    f"{path}:{lineno}: shape {shape} does not match "
                    f"{param.data.shape} for {name!r}"
                )
            if len(values) != param.size:
                raise WeightsError(
                    f"{path}:{lineno}: expected {param.size} values, "
                    f"got {len(values)}"
                )
            try:
                arr = np.array([float(v) for v in values])
            except ValueError as exc:
                raise WeightsError(f"{path}:{lineno}: {exc}") from exc
            param.tensor.data = arr.reshape(shape).astype(param.data.dtype)
            seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise WeightsError(f"{path}: missing parameters: {sorted(missing)[:3]}...")
