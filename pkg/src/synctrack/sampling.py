"""Point down-sampling and local grouping kernels.

Farthest point sampling and kNN are brute-force O(N^2) scans, which is
plenty at the point budgets used here. All ties break toward the lowest
index so every kernel is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud
from .numerics import engine
from .numerics.engine import Tensor
from .numerics.nn import Layer, Linear


@dataclass(frozen=True)
class SampleSelection:
    """Ordered, unique row indices plus optional per-index scores."""

    indices: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        if len(np.unique(idx)) != idx.size:
            raise ValueError("selected indices must be unique")

    def __len__(self) -> int:
        return self.indices.size


@dataclass(frozen=True)
class TokenSet:
    """Point coordinates (N, 3) paired with a feature Tensor (N, C).

    Coordinates ride along untouched through every feature transform.
    """

    coords: np.ndarray
    feats: Tensor

    def __post_init__(self):
        if self.coords.shape[0] != self.feats.data.shape[0]:
            raise ValueError(
                f"coords/features row mismatch: {self.coords.shape[0]} vs "
                f"{self.feats.data.shape[0]}"
            )

    def __len__(self) -> int:
        return self.coords.shape[0]


def resize_to_count(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Force a cloud to exactly n points by discarding or duplicating.

    With at least n points, a uniform without-replacement subsample is drawn
    and kept in ascending index order; with fewer, all originals are kept and
    uniformly drawn duplicates are appended. Deterministic given the seed.
    """
    if len(cloud) == 0:
        raise ValueError("cannot resize an empty cloud")
    if n < 1:
        raise ValueError("target count must be positive")
    rng = np.random.default_rng(seed)
    count = len(cloud)
    if count >= n:
        idx = np.sort(rng.choice(count, size=n, replace=False))
    else:
        idx = np.concatenate([np.arange(count), rng.integers(0, count, size=n - count)])
    return cloud.take(idx)


def _pairwise_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def farthest_point_sampling(coords: np.ndarray, k: int, start: int = 0) -> SampleSelection:
    """Greedy max-min coverage subset of k point indices.

    The first index is ``start``; every following pick maximizes the minimum
    Euclidean distance to the points already chosen, ties to the lowest index.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"cannot select {k} of {n} points")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    selected = np.empty(k, dtype=np.int64)
    selected[0] = start
    min_sq = ((coords - coords[start]) ** 2).sum(axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(min_sq))
        selected[i] = nxt
        min_sq = np.minimum(min_sq, ((coords - coords[nxt]) ** 2).sum(axis=1))
    return SampleSelection(selected)


def knn_indices(queries: np.ndarray, refs: np.ndarray, k: int) -> np.ndarray:
    """Per query, the k nearest reference indices sorted by distance.

    Equidistant references rank by index; a query that coincides with a
    reference therefore lists that reference first at distance zero.
    """
    queries = np.asarray(queries, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if k > refs.shape[0]:
        raise ValueError(f"cannot take {k} neighbors from {refs.shape[0]} points")
    sq = _pairwise_sq_dist(queries, refs)
    return np.argsort(sq, axis=1, kind="stable")[:, :k]


class QueryAndGroup(Layer):
    """Neighborhood feature embedding: gather k neighbors, lift, max-reduce.

    Per point, the rows [neighbor_coord - coord ; neighbor_features] pass
    through a shared affine map and rectifier, then reduce by elementwise
    maximum over the neighborhood.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, name: str,
                 dtype=np.float64):
        super().__init__()
        self.c_in = c_in
        self.lift = Linear(3 + c_in, c_out, rng, f"{name}.lift", dtype)
        self._params = self.lift.parameters()

    def __call__(self, coords: np.ndarray, feats: Tensor | None, k: int) -> TokenSet:
        n = coords.shape[0]
        idx = knn_indices(coords, coords, k)
        rel = coords[idx] - coords[:, None, :]
        rel_rows = engine.constant(
            rel.reshape(n * k, 3), like=self.lift.weight.tensor
        )
        if self.c_in == 0 or feats is None:
            rows = rel_rows
        else:
            gathered = engine.gather_rows(feats, idx.reshape(-1))
            rows = engine.concat([rel_rows, gathered], axis=1)
        lifted = engine.relu(self.lift(rows))
        grouped = engine.reshape(lifted, (n, k, -1))
        return TokenSet(coords, engine.max_axis(grouped, 1))
