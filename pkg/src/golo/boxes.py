"""Box format conversions and overlap measures.

Model-side boxes are normalised ``(cx, cy, w, h)``; annotations are absolute
``(x, y, w, h)`` with a top-left origin.
"""

from __future__ import annotations

import numpy as np

from golo import tensor as T
from golo.errors import ContractError
from golo.tensor import Tensor


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    cx, cy, w, h = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    x1, y1, x2, y2 = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def xywh_to_cxcywh_normalized(b: np.ndarray, width: int, height: int) -> np.ndarray:
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    scale = np.array([width, height, width, height], dtype=float)
    return np.stack([b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2, b[:, 2], b[:, 3]], axis=-1) / scale


def cxcywh_normalized_to_xywh(b: np.ndarray, width: int, height: int) -> np.ndarray:
    b = np.asarray(b, dtype=float).reshape(-1, 4) * np.array([width, height, width, height])
    return np.stack([b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2, b[:, 2], b[:, 3]], axis=-1)


def giou(box_a, box_b) -> float:
    """Generalised IoU of two ``(cx, cy, w, h)`` boxes, in [-1, 1]."""
    a = np.asarray(box_a, dtype=float)
    b = np.asarray(box_b, dtype=float)
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ContractError(f"boxes need positive width and height: {a}, {b}")
    return float(pairwise_giou(a[None], b[None])[0, 0])


def pairwise_iou_xyxy(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """IoU and union of every pair of corner boxes, each [n, m]."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union, union


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """GIoU between every pair of ``(cx, cy, w, h)`` boxes -> [n, m]."""
    a = cxcywh_to_xyxy(a).reshape(-1, 4)
    b = cxcywh_to_xyxy(b).reshape(-1, 4)
    iou, union = pairwise_iou_xyxy(a, b)
    lt = np.minimum(a[:, None, :2], b[None, :, :2])
    rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    hull = (rb - lt).prod(axis=-1)
    return iou - (hull - union) / hull


def pairwise_iou_xywh(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between absolute ``(x, y, w, h)`` boxes -> [n, m]."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ca = np.concatenate([a[:, :2], a[:, :2] + a[:, 2:]], axis=1)
    cb = np.concatenate([b[:, :2], b[:, :2] + b[:, 2:]], axis=1)
    return pairwise_iou_xyxy(ca, cb)[0]


def elementwise_giou(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable GIoU of row-aligned ``(cx, cy, w, h)`` boxes [..., 4] -> [...]."""

    def corners(t):
        half = t[..., 2:] * 0.5
        return t[..., :2] - half, t[..., :2] + half

    a_lo, a_hi = corners(a)
    b_lo, b_hi = corners(b)
    area_a = a[..., 2] * a[..., 3]
    area_b = b[..., 2] * b[..., 3]
    inter_wh = T.clamp(T.minimum(a_hi, b_hi) - T.maximum(a_lo, b_lo), 0.0, None)
    inter = inter_wh[..., 0] * inter_wh[..., 1]
    union = area_a + area_b - inter
    hull_wh = T.maximum(a_hi, b_hi) - T.minimum(a_lo, b_lo)
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return inter / union - (hull - union) / hull
