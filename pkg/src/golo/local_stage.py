"""Local refinement stage.

Each query pools RoI features inside its global box, folds them in through
query-generated kernels, talks to the other queries, samples the pyramid
around its box and finally predicts per-class logits and a box delta.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from golo import tensor as T
from golo.errors import ShapeError
from golo.global_stage import AdaptiveMixing, AttentionBlock, PointSampler, prior_bias
from golo.losses import StageOutput
from golo.nn import LayerNorm, Linear, Module
from golo.sampling import FeaturePyramid, bidirectional_sample, roi_align
from golo.tensor import Tensor

MAX_LOG_SCALE = 4.0
MIN_BOX_SIZE = 1e-4


class QGFE(Module):
    """Query-guided feature enhancing.

    Two query-generated kernels of shape (C, S*S) mix the pooled RoI grid,
    first spatially into (S*S, S*S) and then back to (C, S*S); a final
    linear map flattens that to a C-vector.  Leading batch axes are carried
    through unchanged.
    """

    def __init__(self, c: int, roi_size: int, rng: np.random.Generator):
        ss = roi_size * roi_size
        self.linear1 = Linear(c, c * ss, rng)
        self.linear2 = Linear(c, c * ss, rng)
        self.norm1 = LayerNorm(ss)
        self.norm2 = LayerNorm(ss)
        self.linear3 = Linear(c * ss, c, rng)
        self.c, self.ss = c, ss

    def forward(self, q: Tensor, roi: Tensor, trace: Optional[list] = None) -> Tensor:
        lead = q.shape[:-1]
        if q.shape[-1] != self.c or roi.shape[-2:] != (self.ss, self.c) or roi.shape[:-2] != lead:
            raise ShapeError(f"qgfe expects q (..., {self.c}) and roi (..., {self.ss}, {self.c}); "
                             f"got {q.shape} and {roi.shape}")
        k1 = self.linear1(q).reshape(*lead, self.c, self.ss)
        k2 = self.linear2(q).reshape(*lead, self.c, self.ss)
        x = T.relu(self.norm1(T.matmul(roi, k1)))
        if trace is not None:
            trace.append(x.shape[-2:])
        x = T.relu(self.norm2(T.matmul(k2, x)))
        if trace is not None:
            trace.append(x.shape[-2:])
        return self.linear3(x.reshape(*lead, self.c * self.ss))


def qgfe(module: QGFE, q: Tensor, roi: Tensor, trace: Optional[list] = None) -> Tensor:
    return module(q, roi, trace)


class RoiBranch(Module):
    """r = W2(LN(ReLU(W1(f)))) on the spatial mean of the RoI grid."""

    def __init__(self, c: int, rng: np.random.Generator):
        self.w1 = Linear(c, c, rng)
        self.norm = LayerNorm(c)
        self.w2 = Linear(c, c, rng)

    def forward(self, roi: Tensor) -> Tensor:
        return self.w2(self.norm(T.relu(self.w1(roi.mean(axis=-2)))))


def fuse_query(q: Tensor, d: Tensor, r: Tensor) -> Tensor:
    return q + d + r


def decode_boxes(ref: Tensor, delta: Tensor) -> Tensor:
    """Apply (dx, dy, dlog w, dlog h) to reference (cx, cy, w, h) boxes and clip to the image."""
    cx, cy, w, h = (ref[..., i:i + 1] for i in range(4))
    ncx = T.clamp(cx + delta[..., 0:1] * w, 0.0, 1.0)
    ncy = T.clamp(cy + delta[..., 1:2] * h, 0.0, 1.0)
    nw = T.clamp(w * T.exp(T.clamp(delta[..., 2:3], -MAX_LOG_SCALE, MAX_LOG_SCALE)), MIN_BOX_SIZE, 1.0)
    nh = T.clamp(h * T.exp(T.clamp(delta[..., 3:4], -MAX_LOG_SCALE, MAX_LOG_SCALE)), MIN_BOX_SIZE, 1.0)
    return T.concat([ncx, ncy, nw, nh], axis=-1)


class LocalHeads(Module):
    """Shared two-layer trunk of width 4c feeding class-logit and box-delta branches."""

    def __init__(self, c: int, num_classes: int, rng: np.random.Generator):
        self.fc1 = Linear(c, 4 * c, rng)
        self.fc2 = Linear(4 * c, 4 * c, rng)
        self.cls = Linear(4 * c, num_classes, rng)
        self.delta = Linear(4 * c, 4, rng)
        self.cls.bias.data[:] = prior_bias()
        self.delta.weight.data *= 0.1

    def _trunk(self, q: Tensor) -> Tensor:
        return T.relu(self.fc2(T.relu(self.fc1(q))))

    def logits(self, q: Tensor) -> Tensor:
        return self.cls(self._trunk(q))

    def boxes(self, q: Tensor, ref: Tensor) -> Tensor:
        return decode_boxes(ref, self.delta(self._trunk(q)))


class LocalStage(Module):
    def __init__(self, cfg, rng: np.random.Generator):
        c = cfg.channels
        self.qgfe = QGFE(c, cfg.roi_size, rng)
        self.roi_branch = RoiBranch(c, rng)
        self.self_attn = AttentionBlock(c, cfg.heads, rng)
        self.sampler = PointSampler(c, cfg.n_points, rng, relative=True)
        self.mixing = AdaptiveMixing(c, cfg.n_points, rng)
        self.heads = LocalHeads(c, cfg.num_classes, rng)
        self.roi_size = cfg.roi_size
        self.canonical = cfg.roi_canonical

    def forward(self, pyramid: FeaturePyramid, q: Tensor, ref_boxes: Tensor) -> StageOutput:
        roi = roi_align(pyramid, ref_boxes, self.roi_size, canonical=self.canonical)
        q = fuse_query(q, self.qgfe(q, roi), self.roi_branch(roi))   # step 1
        aux_boxes = self.heads.boxes(q, ref_boxes)
        q = self.self_attn(q)                                         # step 2
        aux_logits = self.heads.logits(q)
        sampled = bidirectional_sample(pyramid, self.sampler(q, ref_boxes))
        q = self.mixing(q, sampled)                                   # step 3
        return StageOutput(self.heads.logits(q), self.heads.boxes(q, ref_boxes), aux_boxes, aux_logits)
