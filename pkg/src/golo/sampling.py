"""Feature-pyramid sampling: bilinear reads, scale-aware level weighting, RoIAlign."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from golo import tensor as T
from golo.tensor import Tensor

log = logging.getLogger(__name__)

LEVEL_Z = (2.0, 3.0, 4.0, 5.0)  # log2 of strides 4, 8, 16, 32


def bilinear_sample(fmap: Tensor, batch_index: np.ndarray, x: Tensor, y: Tensor) -> Tensor:
    """Read ``fmap`` [B,C,H,W] at normalised points, returning [P, C].

    ``x``/``y`` are in [0, 1] image coordinates (align-corners=False: pixel
    centre ``k`` sits at ``(k + 0.5) / size``).  Reads outside the map are
    zero.  Differentiable w.r.t. the map and both coordinates.
    """
    b, c, h, w = fmap.shape
    batch_index = np.asarray(batch_index, dtype=np.int64).reshape(-1)
    u = x.data.reshape(-1) * w - 0.5
    v = y.data.reshape(-1) * h - 0.5
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = (u - x0).astype(fmap.dtype)
    fy = (v - y0).astype(fmap.dtype)
    flat = np.ascontiguousarray(fmap.data.transpose(0, 2, 3, 1)).reshape(b * h * w, c)
    base = batch_index * (h * w)

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.where(valid, base + np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1), 0)
        vals = flat[idx] * valid[:, None]
        wx = fx if dx else 1 - fx
        wy = fy if dy else 1 - fy
        corners.append((idx, valid, wx, wy, vals))

    out = sum(wx[:, None] * wy[:, None] * vals for _, _, wx, wy, vals in corners)
    n = u.shape[0]

    def grad_fn(g):
        rows = np.tile(np.arange(n), 4)
        cols = np.concatenate([idx for idx, *_ in corners])
        weights = np.concatenate([wx * wy * valid for _, valid, wx, wy, _ in corners])
        m = sp.csr_matrix((weights, (rows, cols)), shape=(n, b * h * w))
        g_flat = np.asarray(m.T @ g, dtype=fmap.dtype)
        g_map = g_flat.reshape(b, h, w, c).transpose(0, 3, 1, 2)

        (_, _, _, _, v00), (_, _, _, _, v01), (_, _, _, _, v10), (_, _, _, _, v11) = corners
        du = ((1 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10))
        dv = ((1 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01))
        gx = (g * du).sum(axis=1) * w
        gy = (g * dv).sum(axis=1) * h
        return g_map, gx.reshape(x.shape), gy.reshape(y.shape)

    return Tensor._result(out, (fmap, x, y), grad_fn, "bilinear_sample")


@dataclass
class FeaturePyramid:
    """P2..P5 maps, each [B, c, H/stride, W/stride]."""

    levels: list
    strides: tuple = (4, 8, 16, 32)

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]

    @property
    def batch(self) -> int:
        return self.levels[0].shape[0]

    @property
    def image_size(self) -> tuple:
        _, _, h, w = self.levels[0].shape
        return h * self.strides[0], w * self.strides[0]

    @property
    def z(self) -> tuple:
        return tuple(float(np.log2(s)) for s in self.strides)

    @classmethod
    def from_single(cls, levels: Sequence[Tensor]) -> "FeaturePyramid":
        return cls([lv if lv.ndim == 4 else lv.reshape((1,) + lv.shape) for lv in levels])


@dataclass
class SamplingSpec:
    """Per-point sampling coordinates; all four tensors share a leading shape."""

    x: Tensor
    y: Tensor
    z_w: Tensor
    z_h: Tensor

    @property
    def num_points(self) -> int:
        return int(np.prod(self.x.shape))


def level_weights(z_w: Tensor, z_h: Tensor, levels: Sequence[float] = LEVEL_Z) -> Tensor:
    """Per-level weights from two Gaussians over log2-stride, one per box direction.

    Each direction contributes a softmax over levels of ``-(z_level - z)^2 / 2``,
    so the weights of every point sum to 2.
    """
    z_levels = Tensor(np.asarray(levels), dtype=z_w.dtype)

    def term(z):
        d = z.reshape(z.shape + (1,)) - z_levels
        return T.softmax(d * d * -0.5, axis=-1)

    return term(z_h) + term(z_w)


def bidirectional_sample(pyramid: FeaturePyramid, spec: SamplingSpec) -> Tensor:
    """Scale-weighted sum of bilinear reads across pyramid levels.

    Points carry a leading batch axis matching the pyramid: the result has
    shape ``spec.x.shape + (c,)``.
    """
    lead = spec.x.shape
    if len(lead) == 0 or lead[0] != pyramid.batch:
        raise ValueError(f"sampling spec leading dim {lead} must match batch {pyramid.batch}")
    per_image = int(np.prod(lead[1:]))
    bidx = np.repeat(np.arange(pyramid.batch), per_image)
    x = T.clamp(spec.x.reshape(-1), 0.0, 1.0)
    y = T.clamp(spec.y.reshape(-1), 0.0, 1.0)
    weights = level_weights(spec.z_w.reshape(-1), spec.z_h.reshape(-1), pyramid.z)
    out = None
    for j, level in enumerate(pyramid.levels):
        term = bilinear_sample(level, bidx, x, y) * weights[:, j:j + 1]
        out = term if out is None else out + term
    return out.reshape(lead + (pyramid.channels,))


def fpn_level(boxes: np.ndarray, image_size: tuple, canonical: float = 56.0) -> np.ndarray:
    """Pyramid level (2..5) per normalised (cx, cy, w, h) box."""
    h, w = image_size
    scale = np.sqrt(np.maximum(boxes[..., 2] * w * boxes[..., 3] * h, 1e-12))
    k = np.floor(4 + np.log2(scale / canonical))
    return np.clip(k, 2, 5).astype(np.int64)


def _roi_offsets(size: int, ratio: int) -> tuple[np.ndarray, np.ndarray]:
    # fractional box positions ordered (bin row, bin col, sub row, sub col)
    i, j, a, b = np.meshgrid(*(np.arange(k) for k in (size, size, ratio, ratio)), indexing="ij")
    oy = (i + (a + 0.5) / ratio) / size
    ox = (j + (b + 0.5) / ratio) / size
    return ox.reshape(-1), oy.reshape(-1)


def roi_align(pyramid: FeaturePyramid, boxes: Tensor, size: int = 7, sampling_ratio: int = 2,
              canonical: float = 56.0, min_size: float = 1e-4) -> Tensor:
    """Pool an S x S grid of features inside each box.

    ``boxes`` is [B, n, 4] in normalised (cx, cy, w, h).  Each bin averages
    ``sampling_ratio``^2 bilinear reads; the source level follows the FPN
    assignment rule.  Returns [B, n, S*S, c].
    """
    bsz, n, _ = boxes.shape
    if np.any(boxes.data[..., 2:] < min_size):
        log.debug("clamping degenerate RoI sizes to %g", min_size)
    wh = T.clamp(boxes[..., 2:], min_size, None)
    x1 = boxes[..., 0:1] - wh[..., 0:1] * 0.5
    y1 = boxes[..., 1:2] - wh[..., 1:2] * 0.5
    ox, oy = _roi_offsets(size, sampling_ratio)
    ox = Tensor(ox, dtype=boxes.dtype)
    oy = Tensor(oy, dtype=boxes.dtype)
    xs = (x1 + wh[..., 0:1] * ox).reshape(bsz * n, -1)  # [N, S*S*r*r]
    ys = (y1 + wh[..., 1:2] * oy).reshape(bsz * n, -1)

    levels = fpn_level(boxes.data, pyramid.image_size, canonical).reshape(-1)
    bidx_all = np.repeat(np.arange(bsz), n)
    pieces, order = [], []
    for j, fmap in enumerate(pyramid.levels):
        sel = np.nonzero(levels == j + 2)[0]
        if sel.size == 0:
            continue
        k = xs.shape[1]
        bidx = np.repeat(bidx_all[sel], k)
        vals = bilinear_sample(fmap, bidx, xs[sel].reshape(-1), ys[sel].reshape(-1))
        pieces.append(vals.reshape(sel.size, size * size, sampling_ratio ** 2, -1).mean(axis=2))
        order.append(sel)
    order = np.concatenate(order)
    pooled = T.concat(pieces, axis=0)[np.argsort(order)]
    return pooled.reshape(bsz, n, size * size, pyramid.channels)
