"""Single-branch encoder over concatenated template and search tokens.

Each stage projects the joint token set, runs multi-head attention with one
softmax over the full key set, then shrinks the token sets: template tokens
by farthest point sampling on their coordinates, search tokens by keeping
the ones the template attends to most strongly. The matching block of the
attention map is recomputed from the current tokens at every stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud
from .numerics import engine
from .numerics.engine import Tensor
from .numerics.nn import Layer, LayerNorm, Linear
from .sampling import (
    QueryAndGroup,
    SampleSelection,
    TokenSet,
    farthest_point_sampling,
)


@dataclass(frozen=True)
class StageConfig:
    """Widths and output token budgets for one encoder stage."""

    channels: int
    heads: int
    out_template: int
    out_search: int
    knn_k: int = 16

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ValueError(
                f"channels {self.channels} not divisible by {self.heads} heads"
            )


def default_stages(
    channels=(32, 64, 128), tokens=(256, 128, 64), heads=2, knn_k=16
) -> list[StageConfig]:
    return [
        StageConfig(c, heads, t, t, knn_k) for c, t in zip(channels, tokens)
    ]


@dataclass
class AttentionRecord:
    """Joint attention of one stage: pre-softmax scores, weights, new tokens.

    logits and attn have shape (heads, N_t + N_s, N_t + N_s); every attn row
    sums to 1 over the full concatenated key set.
    """

    logits: np.ndarray
    attn: np.ndarray
    tokens: Tensor = field(repr=False)


class MultiHeadJointAttention(Layer):
    """Self-attention over the joint token matrix with a residual output map."""

    def __init__(self, channels: int, heads: int, rng: np.random.Generator,
                 name: str, dtype=np.float64):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"{heads} heads do not divide {channels} channels")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        self.wq = Linear(channels, channels, rng, f"{name}.wq", dtype)
        self.wk = Linear(channels, channels, rng, f"{name}.wk", dtype)
        self.wv = Linear(channels, channels, rng, f"{name}.wv", dtype)
        self.wo = Linear(channels, channels, rng, f"{name}.wo", dtype)
        self._params = [
            p
            for layer in (self.wq, self.wk, self.wv, self.wo)
            for p in layer.parameters()
        ]

    def __call__(self, x: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
        n = x.data.shape[0]
        d = self.head_dim
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        outs, logits, attn = [], [], []
        for m in range(self.heads):
            cols = ((0, n), (m * d, (m + 1) * d))
            qm, km, vm = engine.crop(q, cols), engine.crop(k, cols), engine.crop(v, cols)
            lm = engine.scale(engine.matmul(qm, engine.transpose(km)), 1.0 / math.sqrt(d))
            am = engine.softmax_rows(lm)
            outs.append(engine.matmul(am, vm))
            logits.append(lm.data.copy())
            attn.append(am.data.copy())
        merged = engine.concat(outs, axis=1)
        y = engine.add(self.wo(merged), x)
        return y, np.stack(logits), np.stack(attn)

    def attend(self, tokens_t: TokenSet, tokens_s: TokenSet) -> AttentionRecord:
        """Joint attention over template-then-search rows."""
        x = engine.concat([tokens_t.feats, tokens_s.feats], axis=0)
        tokens, logits, attn = self(x)
        return AttentionRecord(logits, attn, tokens)


def attentive_sample(
    record: AttentionRecord, n_t: int, k: int, use_softmax: bool = False
) -> SampleSelection:
    """Top-k search tokens by template-to-search attention response.

    Per search token, the score averages the pre-softmax scores it receives
    from every template query row across all heads; the selection is the
    additive-objective optimum, ties to the lowest index. Indices come back
    sorted ascending so downstream coordinate order is stable. use_softmax
    switches to averaging the normalized attention weights instead
    (experimental alternative reading of the sampling rule).
    """
    base = record.attn if use_softmax else record.logits
    n_s = base.shape[2] - n_t
    if k > n_s:
        raise ValueError(f"cannot keep {k} of {n_s} search tokens")
    scores = base[:, :n_t, n_t:].mean(axis=(0, 1))
    top = np.argsort(-scores, kind="stable")[:k]
    idx = np.sort(top)
    return SampleSelection(idx, scores[idx])


class ApstStage(Layer):
    """One attention stage with entry projection and post-sampling feed-forward."""

    def __init__(self, c_in: int, cfg: StageConfig, rng: np.random.Generator,
                 name: str, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.entry = Linear(c_in, c, rng, f"{name}.entry", dtype)
        self.norm = LayerNorm(c, f"{name}.norm", dtype)
        self.attn = MultiHeadJointAttention(c, cfg.heads, rng, f"{name}.attn", dtype)
        self.ffn_in = Linear(c, 2 * c, rng, f"{name}.ffn_in", dtype)
        self.ffn_out = Linear(2 * c, c, rng, f"{name}.ffn_out", dtype)
        self._params = [
            p
            for layer in (self.entry, self.norm, self.attn, self.ffn_in, self.ffn_out)
            for p in layer.parameters()
        ]

    def __call__(
        self, tokens_t: TokenSet, tokens_s: TokenSet, use_softmax: bool = False
    ) -> tuple[TokenSet, TokenSet, AttentionRecord]:
        n_t, n_s = len(tokens_t), len(tokens_s)
        cfg = self.cfg
        if cfg.out_template > n_t or cfg.out_search > n_s:
            raise ValueError(
                f"stage cannot grow token counts: ({n_t}, {n_s}) -> "
                f"({cfg.out_template}, {cfg.out_search})"
            )
        x = engine.concat([tokens_t.feats, tokens_s.feats], axis=0)
        x = self.norm(engine.relu(self.entry(x)))
        tokens, logits, attn = self.attn(x)
        record = AttentionRecord(logits, attn, tokens)

        sel_t = farthest_point_sampling(tokens_t.coords, cfg.out_template, 0).indices
        sel_s = attentive_sample(record, n_t, cfg.out_search, use_softmax).indices
        rows = np.concatenate([sel_t, n_t + sel_s])
        sampled = engine.gather_rows(tokens, rows)
        out = engine.add(sampled, self.ffn_out(engine.relu(self.ffn_in(sampled))))

        c = cfg.channels
        feats_t = engine.crop(out, ((0, cfg.out_template), (0, c)))
        feats_s = engine.crop(
            out, ((cfg.out_template, cfg.out_template + cfg.out_search), (0, c))
        )
        return (
            TokenSet(tokens_t.coords[sel_t], feats_t),
            TokenSet(tokens_s.coords[sel_s], feats_s),
            record,
        )


@dataclass
class BackboneOutput:
    """Per-stage (template, search) token sets plus the pre-attention search set."""

    stages: list[tuple[TokenSet, TokenSet]]
    search_stage0: TokenSet
    records: list[AttentionRecord]


class Backbone(Layer):
    """Shared grouping embedding, joint positional embedding, stacked stages.

    The template cloud is reduced by FPS to the first stage's template budget
    before grouping; the search cloud is grouped without reduction. The
    positional embedding is a learned affine map of raw coordinates added
    once, where the token sets first meet.
    """

    def __init__(self, stages: list[StageConfig], rng: np.random.Generator,
                 dtype=np.float64, attentive_softmax: bool = False,
                 name: str = "backbone"):
        super().__init__()
        if not stages:
            raise ValueError("need at least one stage")
        self.stage_configs = list(stages)
        self.attentive_softmax = attentive_softmax
        c0 = stages[0].channels
        self.group = QueryAndGroup(0, c0, rng, f"{name}.group", dtype)
        self.pos = Linear(3, c0, rng, f"{name}.pos", dtype)
        self.stages = []
        c_in = c0
        for i, cfg in enumerate(stages):
            stage = ApstStage(c_in, cfg, rng, f"{name}.stage{i + 1}", dtype)
            self.stages.append(stage)
            c_in = cfg.channels
        self._params = (
            self.group.parameters()
            + self.pos.parameters()
            + [p for s in self.stages for p in s.parameters()]
        )

    def _embed(self, tokens: TokenSet) -> TokenSet:
        coords = engine.constant(tokens.coords, like=tokens.feats)
        return TokenSet(tokens.coords, engine.add(tokens.feats, self.pos(coords)))

    def __call__(self, template: PointCloud, search: PointCloud) -> BackboneOutput:
        k = self.stage_configs[0].knn_k
        n_prime = self.stage_configs[0].out_template
        sel = farthest_point_sampling(template.points, n_prime, 0)
        tokens_t = self.group(template.points[sel.indices], None, k)
        tokens_s = self.group(search.points, None, k)
        tokens_t = self._embed(tokens_t)
        tokens_s = self._embed(tokens_s)
        search_stage0 = tokens_s

        outputs, records = [], []
        for stage in self.stages:
            tokens_t, tokens_s, record = stage(
                tokens_t, tokens_s, self.attentive_softmax
            )
            outputs.append((tokens_t, tokens_s))
            records.append(record)
        return BackboneOutput(outputs, search_stage0, records)
