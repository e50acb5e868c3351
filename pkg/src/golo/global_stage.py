"""Global localisation stage.

Queries built from learnable meta vectors attend to a fused multi-scale
summary of the image, exchange information through self-attention, then
sample and mix pyramid features before class-agnostic foreground and box
heads.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from golo import tensor as T
from golo.errors import ConfigError
from golo.losses import StageOutput
from golo.nn import FFN, LayerNorm, Linear, Module, parameter, xavier_uniform
from golo.sampling import FeaturePyramid, SamplingSpec, bidirectional_sample
from golo.tensor import Tensor

MFF_WIDTH = 1 + 4 + 16 + 64
FOCAL_PRIOR = 0.01


def prior_bias(prob: float = FOCAL_PRIOR) -> float:
    return -math.log((1 - prob) / prob)


class MetaQueryInit(Module):
    """Queries as learned linear combinations of ``m`` meta vectors."""

    def __init__(self, n: int, m: int, c: int, rng: np.random.Generator):
        self.meta = parameter(xavier_uniform(rng, m, c, (m, c)))
        self.alpha = parameter(xavier_uniform(rng, n, m, (n, m)))

    def forward(self) -> Tensor:
        return meta_query_init(self.alpha, self.meta)


class RandomQueryInit(Module):
    """Ablation baseline: each query is an independent learnable vector."""

    def __init__(self, n: int, c: int, rng: np.random.Generator):
        self.query = parameter(xavier_uniform(rng, n, c, (n, c)))

    def forward(self) -> Tensor:
        return self.query


def meta_query_init(alpha: Tensor, meta: Tensor) -> Tensor:
    return T.matmul(alpha, meta)


def mff_gather(pyramid: FeaturePyramid) -> Tensor:
    """Per P5 cell, the aligned P5, P4 (2x2), P3 (4x4) and P2 (8x8) features -> [B, hs, ws, c, 85]."""
    p2, p3, p4, p5 = pyramid.levels
    b, c, hs, ws = p5.shape
    parts = []
    for level, f in ((p5, 1), (p4, 2), (p3, 4), (p2, 8)):
        if level.shape[2:] != (hs * f, ws * f):
            raise T.ShapeError(f"pyramid level {level.shape} is not aligned with P5 {p5.shape}")
        blocks = level.reshape(b, c, hs, f, ws, f).transpose(0, 2, 4, 1, 3, 5)
        parts.append(blocks.reshape(b, hs, ws, c, f * f))
    return T.concat(parts, axis=-1)


class MultiScaleFusion(Module):
    """Expand-then-reduce linear pair over the 85 gathered entries of every P5 cell."""

    def __init__(self, k_mff: int, rng: np.random.Generator):
        self.expand = Linear(MFF_WIDTH, 2 * k_mff, rng)
        self.reduce = Linear(2 * k_mff, k_mff, rng)

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        return self.reduce(T.relu(self.expand(mff_gather(pyramid))))


class MffToKV(Module):
    def __init__(self, k_mff: int, rng: np.random.Generator):
        self.proj = Linear(k_mff, 2, rng)

    def forward(self, x_mff: Tensor) -> tuple[Tensor, Tensor]:
        b, hs, ws, c, _ = x_mff.shape
        y = self.proj(x_mff)
        return y[..., 0].reshape(b, hs * ws, c), y[..., 1].reshape(b, hs * ws, c)


class MultiHeadAttention(Module):
    def __init__(self, c: int, heads: int, rng: np.random.Generator):
        if c % heads:
            raise ConfigError(f"channels {c} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = Linear(c, c, rng)
        self.k_proj = Linear(c, c, rng)
        self.v_proj = Linear(c, c, rng)
        self.out_proj = Linear(c, c, rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, c = x.shape
        return x.reshape(*lead, n, self.heads, c // self.heads).transpose(
            *range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2)

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        *lead, n, c = q.shape
        d_k = c // self.heads
        qh, kh, vh = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        attn = T.softmax(T.matmul(qh, kh.T) * (1.0 / math.sqrt(d_k)), axis=-1)
        out = T.matmul(attn, vh)  # [..., heads, n, d_k]
        nl = len(lead)
        out = out.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, n, c)
        return self.out_proj(out)


class AttentionBlock(Module):
    """Multi-head attention followed by residual add and layer norm."""

    def __init__(self, c: int, heads: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(c, heads, rng)
        self.norm = LayerNorm(c)

    def forward(self, q: Tensor, k: Optional[Tensor] = None, v: Optional[Tensor] = None) -> Tensor:
        if k is None:
            k = v = q
        return self.norm(q + self.attn(q, k, v))


def cross_attention(block: AttentionBlock, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    return block(q, k, v)


def self_attention(block: AttentionBlock, q: Tensor) -> Tensor:
    return block(q)


class PointSampler(Module):
    """Predicts ``n_points`` (x, y, z_w, z_h) per query with one linear map.

    Global mode squashes x, y to absolute image coordinates; box mode places
    them relative to the query's current box.  z values are clamped to the
    pyramid's log2-stride range.
    """

    def __init__(self, c: int, n_points: int, rng: np.random.Generator, relative: bool = False):
        self.proj = Linear(c, n_points * 4, rng)
        bias = self.proj.bias.data.reshape(n_points, 4)
        bias[:, 2:] = 3.5  # start midway between P2 and P5
        if relative:
            bias[:, :2] = rng.uniform(-0.5, 0.5, size=(n_points, 2))
        self.n_points = n_points
        self.relative = relative

    def forward(self, q: Tensor, boxes: Optional[Tensor] = None) -> SamplingSpec:
        raw = self.proj(q).reshape(*q.shape[:-1], self.n_points, 4)
        zw = T.clamp(raw[..., 2], 2.0, 5.0)
        zh = T.clamp(raw[..., 3], 2.0, 5.0)
        if not self.relative:
            return SamplingSpec(T.sigmoid(raw[..., 0]), T.sigmoid(raw[..., 1]), zw, zh)
        if boxes is None:
            raise ValueError("box-relative sampling needs reference boxes")
        cx, cy, w, h = (boxes[..., i:i + 1] for i in range(4))
        x = T.clamp(cx + raw[..., 0] * w, 0.0, 1.0)
        y = T.clamp(cy + raw[..., 1] * h, 0.0, 1.0)
        return SamplingSpec(x, y, zw, zh)


class AdaptiveMixing(Module):
    """Query-conditioned channel mixing then spatial mixing of sampled points."""

    def __init__(self, c: int, n_points: int, rng: np.random.Generator, p_out: Optional[int] = None):
        p_out = p_out or n_points
        self.channel_gen = Linear(c, c * c, rng)
        self.spatial_gen = Linear(c, n_points * p_out, rng)
        self.channel_norm = LayerNorm(c)
        self.spatial_norm = LayerNorm(p_out)
        self.out = Linear(c * p_out, c, rng)
        self.c, self.n_points, self.p_out = c, n_points, p_out

    def forward(self, q: Tensor, sampled: Tensor) -> Tensor:
        lead = q.shape[:-1]
        m_c = self.channel_gen(q).reshape(*lead, self.c, self.c)
        m_s = self.spatial_gen(q).reshape(*lead, self.n_points, self.p_out)
        s1 = T.relu(self.channel_norm(T.matmul(sampled, m_c)))          # [..., P, c]
        s2 = T.relu(self.spatial_norm(T.matmul(s1.T, m_s)))            # [..., c, p_out]
        return q + self.out(s2.reshape(*lead, self.c * self.p_out))


class GlobalHeads(Module):
    def __init__(self, c: int, rng: np.random.Generator):
        self.cls = FFN(c, c, 1, rng)
        self.box = FFN(c, c, 4, rng)
        self.cls.fc2.bias.data[:] = prior_bias()

    def logits(self, q: Tensor) -> Tensor:
        return self.cls(q)

    def boxes(self, q: Tensor) -> Tensor:
        return T.sigmoid(self.box(q))


class GlobalStage(Module):
    def __init__(self, cfg, rng: np.random.Generator):
        c = cfg.channels
        if cfg.meta_init:
            self.init = MetaQueryInit(cfg.n_queries, cfg.n_meta, c, rng)
        else:
            self.init = RandomQueryInit(cfg.n_queries, c, rng)
        self.mff = MultiScaleFusion(cfg.k_mff, rng)
        self.kv = MffToKV(cfg.k_mff, rng)
        self.cross = AttentionBlock(c, cfg.heads, rng)
        self.self_attn = AttentionBlock(c, cfg.heads, rng)
        self.sampler = PointSampler(c, cfg.n_points, rng)
        self.mixing = AdaptiveMixing(c, cfg.n_points, rng)
        self.heads = GlobalHeads(c, rng)
        self.use_mff = cfg.use_mff

    def forward(self, pyramid: FeaturePyramid) -> tuple[Tensor, StageOutput]:
        b = pyramid.batch
        q0 = self.init()
        q = q0.reshape((1,) + q0.shape) + Tensor(np.zeros((b, 1, 1)), dtype=q0.dtype)
        if self.use_mff:
            k, v = self.kv(self.mff(pyramid))
        else:
            _, c, hs, ws = pyramid.levels[3].shape
            k = v = Tensor(np.zeros((b, hs * ws, c)), dtype=q.dtype)
        q = self.cross(q, k, v)                       # step 1
        aux_boxes = self.heads.boxes(q)
        q = self.self_attn(q)                         # step 2
        aux_logits = self.heads.logits(q)
        sampled = bidirectional_sample(pyramid, self.sampler(q))
        q = self.mixing(q, sampled)                   # step 3
        out = StageOutput(self.heads.logits(q), self.heads.boxes(q), aux_boxes, aux_logits)
        return q, out
