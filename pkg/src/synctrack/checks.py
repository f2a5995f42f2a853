"""End-to-end gradient verification across the model chain.

Builds a miniature grouping + attention stage + fusion + voxel head and
checks the analytic gradient of the detection loss with respect to every
parameter against central finite differences.
"""

from __future__ import annotations

import numpy as np

from .backbone import ApstStage, StageConfig
from .bevhead import BevDecoder, FeatureFusion, VoxelGridConfig, build_targets, detection_loss, voxelize
from .geometry import Box3D
from .numerics import finite_diff_gradcheck
from .sampling import QueryAndGroup


def composed_stage_loss_check(seed: int = 0, epsilon: float = 1e-5) -> float:
    """Max relative gradient error of the composed stage + head + loss scalar."""
    rng = np.random.default_rng(seed)
    grid = VoxelGridConfig((-0.9, 0.9), (-0.75, 0.75), (-0.6, 0.6), (0.3, 0.3, 0.3))
    cfg = StageConfig(channels=4, heads=2, out_template=3, out_search=4, knn_k=3)
    group = QueryAndGroup(0, 4, rng, "check.group")
    stage = ApstStage(4, cfg, rng, "check.stage")
    fusion = FeatureFusion([4, 4], 2, rng, "check.fusion")
    decoder = BevDecoder(2, rng, "check.decoder")

    coords_t = rng.uniform(-0.6, 0.6, (5, 3))
    coords_s = rng.uniform(-0.6, 0.6, (6, 3)) * np.array([1.0, 1.0, 0.8])
    gt = Box3D(np.array([0.1, -0.05, 0.0]), (0.7, 0.9, 0.5), 0.3)
    targets = build_targets(gt, grid, radius=1.5)

    params = (
        group.parameters()
        + stage.parameters()
        + fusion.parameters()
        + decoder.parameters()
    )

    def fn(_inputs):
        tokens_t = group(coords_t, None, cfg.knn_k)
        tokens_s = group(coords_s, None, cfg.knn_k)
        _t, sampled_s, _rec = stage(tokens_t, tokens_s)
        fused = fusion(tokens_s, [sampled_s])
        volume = voxelize(tokens_s.coords, fused, grid)
        # eval-mode normalization: train-mode batch statistics make the loss
        # exactly invariant to the conv biases, which degenerates the check
        # (the train path is covered by the primitive suite)
        maps = decoder(volume, training=False)
        loss, _ = detection_loss(maps, targets)
        # power-of-two conditioning so the checker's absolute 1e-8 floor sits
        # well above finite-difference rounding noise; exact in binary
        # floating point, so real VJP disagreements scale identically
        from .numerics import engine

        return engine.scale(loss, 2.0**-9)

    return finite_diff_gradcheck(fn, [p.tensor for p in params], epsilon)
