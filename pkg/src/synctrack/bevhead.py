"""Voxel/BEV anchor-free detection head and its supervision targets.

Search-region features are propagated back to full resolution, averaged
into a dense voxel volume, pushed through 3D convolutions, max-pooled along
z into a bird's-eye-view map, and decoded into a center heatmap plus offset,
height and heading regressions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box3D, rotation_z, wrap_angle
from .numerics import engine
from .numerics.engine import Tensor
from .numerics.nn import BatchNorm, Conv, ConvTranspose2d, Layer, Linear
from .sampling import TokenSet, knn_indices


def _axis_cells(lo: float, hi: float, voxel: float) -> int:
    # tolerate float noise in extent/voxel ratios like 4.8/0.3
    return int(math.ceil((hi - lo) / voxel - 1e-9))


@dataclass(frozen=True)
class VoxelGridConfig:
    """Axis ranges (m) and voxel size of the dense BEV volume."""

    x_range: tuple[float, float] = (-5.6, 5.6)
    y_range: tuple[float, float] = (-3.6, 3.6)
    z_range: tuple[float, float] = (-2.4, 2.4)
    voxel: tuple[float, float, float] = (0.3, 0.3, 0.3)

    def __post_init__(self):
        if any(v <= 0 for v in self.voxel):
            raise ValueError("voxel sizes must be positive")

    @property
    def n_x(self) -> int:
        return _axis_cells(*self.x_range, self.voxel[0])

    @property
    def n_y(self) -> int:
        return _axis_cells(*self.y_range, self.voxel[1])

    @property
    def n_z(self) -> int:
        return _axis_cells(*self.z_range, self.voxel[2])


def voxel_indices(coords: np.ndarray, grid: VoxelGridConfig):
    """Cell index per point and the in-range keep mask.

    Index per axis is floor((coord - min)/voxel); points exactly on the upper
    range clamp into the last cell, points outside the ranges are dropped.
    """
    mins = np.array([grid.x_range[0], grid.y_range[0], grid.z_range[0]])
    maxs = np.array([grid.x_range[1], grid.y_range[1], grid.z_range[1]])
    voxel = np.array(grid.voxel)
    dims = np.array([grid.n_x, grid.n_y, grid.n_z])
    keep = np.all((coords >= mins) & (coords <= maxs), axis=1)
    idx = np.floor((coords[keep] - mins) / voxel).astype(np.int64)
    idx = np.minimum(idx, dims - 1)
    return idx, keep


def voxelize(coords: np.ndarray, feats: Tensor, grid: VoxelGridConfig) -> Tensor:
    """Average per-point features into a dense (C, n_z, n_y, n_x) volume."""
    idx, keep = voxel_indices(coords, grid)
    kept = engine.gather_rows(feats, np.flatnonzero(keep))
    flat = (idx[:, 2] * grid.n_y + idx[:, 1]) * grid.n_x + idx[:, 0]
    cells = engine.scatter_mean_rows(kept, flat, grid.n_z * grid.n_y * grid.n_x)
    c = feats.data.shape[1]
    vol = engine.reshape(cells, (grid.n_z, grid.n_y, grid.n_x, c))
    return engine.moveaxis(vol, 3, 0)


class FeatureFusion(Layer):
    """Coarse-to-fine propagation of search features back to full resolution.

    Coarser features reach a finer token set through inverse-distance
    weighted 3-nearest-neighbor interpolation, are concatenated with the
    finer set's own features and mapped by an affine + rectifier; a last
    affine + rectifier emits the head's channel width at every original
    search point.
    """

    def __init__(self, channel_chain: list[int], out_channels: int,
                 rng: np.random.Generator, name: str = "fusion", dtype=np.float64):
        super().__init__()
        if len(channel_chain) < 2:
            raise ValueError("fusion needs at least two scales")
        self.steps = []
        for i in range(len(channel_chain) - 1, 0, -1):
            c_coarse, c_fine = channel_chain[i], channel_chain[i - 1]
            self.steps.append(
                Linear(c_coarse + c_fine, c_fine, rng, f"{name}.prop{i}", dtype)
            )
        self.out = Linear(channel_chain[0], out_channels, rng, f"{name}.out", dtype)
        self._params = [
            p for layer in (*self.steps, self.out) for p in layer.parameters()
        ]

    @staticmethod
    def interpolate(coarse: TokenSet, fine_coords: np.ndarray) -> Tensor:
        """Inverse-distance weighted pull of coarse features onto fine points."""
        k = min(3, len(coarse))
        idx = knn_indices(fine_coords, coarse.coords, k)
        diffs = fine_coords[:, None, :] - coarse.coords[idx]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diffs, diffs))
        w = 1.0 / (dist + 1e-8)
        w /= w.sum(axis=1, keepdims=True)
        n_fine = fine_coords.shape[0]
        c = coarse.feats.data.shape[1]
        gathered = engine.gather_rows(coarse.feats, idx.reshape(-1))
        stacked = engine.reshape(gathered, (n_fine, k, c))
        weights = engine.constant(
            np.repeat(w[:, :, None], c, axis=2), like=coarse.feats
        )
        return engine.sum_axis(engine.mul(stacked, weights), 1)

    def __call__(self, stage0: TokenSet, search_stages: list[TokenSet]) -> Tensor:
        sets = [stage0] + list(search_stages)
        current = sets[-1]
        for step, i in zip(self.steps, range(len(sets) - 2, -1, -1)):
            fine = sets[i]
            interp = self.interpolate(current, fine.coords)
            merged = engine.concat([interp, fine.feats], axis=1)
            current = TokenSet(fine.coords, engine.relu(step(merged)))
        return engine.relu(self.out(current.feats))


@dataclass
class HeadMaps:
    """Decoder outputs on the BEV grid, all (n_y, n_x) spatial."""

    heatmap: Tensor
    offsets: Tensor
    z: Tensor
    theta: Tensor


@dataclass(frozen=True)
class BevPrediction:
    """Detached numpy view of HeadMaps, the input to box decoding."""

    heatmap: np.ndarray
    offsets: np.ndarray
    z: np.ndarray
    theta: np.ndarray

    @classmethod
    def from_maps(cls, maps: HeadMaps) -> "BevPrediction":
        return cls(
            np.asarray(maps.heatmap.data, dtype=np.float64),
            np.asarray(maps.offsets.data, dtype=np.float64),
            np.asarray(maps.z.data, dtype=np.float64),
            np.asarray(maps.theta.data, dtype=np.float64),
        )


class BevDecoder(Layer):
    """3D conv stack, z max-pool, 2D conv stack, upsampling, prediction maps.

    The four 3D blocks stride 2,1,2,1 along z only; the four 2D blocks stride
    2,1,1,2 in both BEV axes; two stride-2 transposed convolutions restore
    full resolution, cropped back to the input BEV extent before the four
    sibling prediction convolutions.
    """

    def __init__(self, in_channels: int, rng: np.random.Generator,
                 name: str = "decoder", dtype=np.float64):
        super().__init__()
        c = in_channels
        plan3d = [(c, c, 2), (c, 2 * c, 1), (2 * c, 2 * c, 2), (2 * c, 4 * c, 1)]
        self.blocks3d = []
        for i, (ci, co, sz) in enumerate(plan3d):
            conv = Conv(ci, co, (sz, 1, 1), rng, f"{name}.c3d{i}", dtype)
            bn = BatchNorm(co, f"{name}.bn3d{i}", dtype)
            self.blocks3d.append((conv, bn))
        wide = 4 * c
        self.blocks2d = []
        for i, s in enumerate((2, 1, 1, 2)):
            conv = Conv(wide, wide, (s, s), rng, f"{name}.c2d{i}", dtype)
            bn = BatchNorm(wide, f"{name}.bn2d{i}", dtype)
            self.blocks2d.append((conv, bn))
        self.up = [
            (
                ConvTranspose2d(wide, 2 * c, rng, f"{name}.up0", dtype),
                BatchNorm(2 * c, f"{name}.upbn0", dtype),
            ),
            (
                ConvTranspose2d(2 * c, c, rng, f"{name}.up1", dtype),
                BatchNorm(c, f"{name}.upbn1", dtype),
            ),
        ]
        self.head_heat = Conv(c, 1, (1, 1), rng, f"{name}.heat", dtype)
        self.head_offsets = Conv(c, 2, (1, 1), rng, f"{name}.offsets", dtype)
        self.head_z = Conv(c, 1, (1, 1), rng, f"{name}.z", dtype)
        self.head_theta = Conv(c, 1, (1, 1), rng, f"{name}.theta", dtype)
        self._params = []
        for conv, bn in (*self.blocks3d, *self.blocks2d, *self.up):
            self._params += conv.parameters() + bn.parameters()
        for head in (self.head_heat, self.head_offsets, self.head_z, self.head_theta):
            self._params += head.parameters()

    def __call__(self, volume: Tensor, training: bool = False) -> HeadMaps:
        n_y, n_x = volume.data.shape[2], volume.data.shape[3]
        x = volume
        for conv, bn in self.blocks3d:
            x = engine.relu(bn(conv(x), training))
        x = engine.max_axis(x, 1)
        for conv, bn in self.blocks2d:
            x = engine.relu(bn(conv(x), training))
        for convt, bn in self.up:
            x = engine.relu(bn(convt(x), training))
        c = x.data.shape[0]
        x = engine.crop(x, ((0, c), (0, n_y), (0, n_x)))
        heat = engine.sigmoid(engine.reshape(self.head_heat(x), (n_y, n_x)))
        offsets = self.head_offsets(x)
        z = engine.reshape(self.head_z(x), (n_y, n_x))
        theta = engine.reshape(self.head_theta(x), (n_y, n_x))
        return HeadMaps(heat, offsets, z, theta)


@dataclass(frozen=True)
class TargetMaps:
    """Dense supervision: center heatmap, offset/heading targets, height, mask."""

    g_cls: np.ndarray
    g_reg: np.ndarray
    g_z: np.ndarray
    mask: np.ndarray

    @property
    def has_center(self) -> bool:
        return bool(self.mask.any())


def build_targets(
    gt_box: Box3D, grid: VoxelGridConfig, radius: float = 2.0
) -> TargetMaps:
    """Supervision maps for one ground-truth box in the search frame.

    The heatmap is 1 at the discrete center pixel, 1/(gamma+1) elsewhere
    inside the BEV footprint (gamma = pixel distance to the discrete center)
    and 0 outside. Offset, heading and height targets are supervised on the
    pixels within ``radius`` of the discrete center. A center that falls off
    the grid yields all-zero maps and an empty mask.
    """
    n_y, n_x = grid.n_y, grid.n_x
    g_cls = np.zeros((n_y, n_x))
    g_reg = np.zeros((3, n_y, n_x))
    g_z = np.zeros((n_y, n_x))
    mask = np.zeros((n_y, n_x), dtype=bool)

    v_x, v_y = grid.voxel[0], grid.voxel[1]
    c_x = (gt_box.center[0] - grid.x_range[0]) / v_x
    c_y = (gt_box.center[1] - grid.y_range[0]) / v_y
    cx_hat, cy_hat = int(math.floor(c_x)), int(math.floor(c_y))
    if not (0 <= cx_hat < n_x and 0 <= cy_hat < n_y):
        return TargetMaps(g_cls, g_reg, g_z, mask)

    jj, ii = np.meshgrid(np.arange(n_x), np.arange(n_y))
    px = grid.x_range[0] + jj * v_x
    py = grid.y_range[0] + ii * v_y
    cos_t, sin_t = math.cos(gt_box.yaw), math.sin(gt_box.yaw)
    dx, dy = px - gt_box.center[0], py - gt_box.center[1]
    u = cos_t * dx + sin_t * dy
    v = -sin_t * dx + cos_t * dy
    w, l = gt_box.size[0], gt_box.size[1]
    inside = (np.abs(u) <= w / 2) & (np.abs(v) <= l / 2)

    gamma = np.hypot(ii - cy_hat, jj - cx_hat)
    g_cls = np.where(inside, 1.0 / (gamma + 1.0), 0.0)
    g_cls[cy_hat, cx_hat] = 1.0

    g_reg[0].fill(c_x - cx_hat)
    g_reg[1].fill(c_y - cy_hat)
    g_reg[2].fill(gt_box.yaw)
    g_z.fill(gt_box.center[2])
    mask = gamma <= radius
    return TargetMaps(g_cls, g_reg, g_z, mask)


def detection_loss(
    preds: HeadMaps,
    targets: TargetMaps,
    weights: tuple[float, float, float] = (1.0, 1.0, 2.0),
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of center focal loss and the two masked L1 regressions.

    The focal term uses the penalty-reduced center-heatmap form: at pixels
    with target 1 it is -(1-p)^2 log p, elsewhere -(1-G)^4 p^2 log(1-p),
    normalized by the number of target-1 pixels. The offset/heading and
    height terms are means of absolute error over the masked entries and
    contribute 0 when the mask is empty. Heatmap values are clamped to
    [1e-6, 1 - 1e-6] before the logarithms.
    """
    p = engine.clamp(preds.heatmap, 1e-6, 1.0 - 1e-6)
    pos = targets.g_cls == 1.0
    n_pos = max(int(pos.sum()), 1)
    one_minus_p = engine.add_scalar(engine.scale(p, -1.0), 1.0)

    pos_w = engine.constant(pos.astype(p.data.dtype), like=p)
    neg_w = engine.constant(
        np.where(pos, 0.0, (1.0 - targets.g_cls) ** 4), like=p
    )
    pos_term = engine.sum_all(
        engine.mul(engine.mul(engine.power(one_minus_p, 2.0), engine.log(p)), pos_w)
    )
    neg_term = engine.sum_all(
        engine.mul(
            engine.mul(engine.power(p, 2.0), engine.log(one_minus_p)), neg_w
        )
    )
    focal = engine.scale(engine.add(pos_term, neg_term), -1.0 / n_pos)

    if targets.has_center:
        n_y, n_x = targets.g_z.shape
        n_mask = int(targets.mask.sum())
        pred_reg = engine.concat(
            [preds.offsets, engine.reshape(preds.theta, (1, n_y, n_x))], axis=0
        )
        mask3 = engine.constant(
            np.broadcast_to(targets.mask, (3, n_y, n_x)).astype(p.data.dtype),
            like=p,
        )
        reg_err = engine.absolute(pred_reg - engine.constant(targets.g_reg, like=p))
        offset_loss = engine.scale(
            engine.sum_all(engine.mul(reg_err, mask3)), 1.0 / (3 * n_mask)
        )
        mask1 = engine.constant(targets.mask.astype(p.data.dtype), like=p)
        z_err = engine.absolute(preds.z - engine.constant(targets.g_z, like=p))
        z_loss = engine.scale(
            engine.sum_all(engine.mul(z_err, mask1)), 1.0 / n_mask
        )
    else:
        offset_loss = engine.constant(np.zeros(()), like=p)
        z_loss = engine.constant(np.zeros(()), like=p)

    total = engine.add(
        engine.add(engine.scale(focal, weights[0]), engine.scale(offset_loss, weights[1])),
        engine.scale(z_loss, weights[2]),
    )
    components = {
        "focal": float(focal.data),
        "offset": float(offset_loss.data),
        "z": float(z_loss.data),
        "total": float(total.data),
    }
    return total, components


@dataclass(frozen=True)
class Detection:
    """A decoded world-frame box with its heatmap peak score."""

    box: Box3D
    score: float


def decode_box(
    pred: BevPrediction, grid: VoxelGridConfig, prev_box: Box3D
) -> Detection:
    """Anchor-free decode: heatmap peak plus regressed offsets, height, heading.

    The canonical-frame estimate is mapped back to world coordinates through
    prev_box's frame; the box size is copied from prev_box. Ties at the peak
    resolve to the lowest row-major index.
    """
    flat = int(np.argmax(pred.heatmap))
    i, j = divmod(flat, pred.heatmap.shape[1])
    d_x = float(pred.offsets[0, i, j])
    d_y = float(pred.offsets[1, i, j])
    x = grid.x_range[0] + (j + d_x) * grid.voxel[0]
    y = grid.y_range[0] + (i + d_y) * grid.voxel[1]
    z = float(pred.z[i, j])
    theta = float(pred.theta[i, j])
    center = rotation_z(prev_box.yaw) @ np.array([x, y, z]) + prev_box.center
    box = Box3D(center, prev_box.size, wrap_angle(prev_box.yaw + theta))
    return Detection(box, float(pred.heatmap[i, j]))
