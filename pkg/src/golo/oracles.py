"""Slow reference implementations used to cross-check the vectorised paths.

Everything here works on plain numpy arrays with explicit Python loops and
``math`` scalars, and shares no code with the differentiable implementations.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def naive_bilinear(fmap: np.ndarray, x: float, y: float) -> np.ndarray:
    """Bilinear read of a single [C, H, W] map at normalised (x, y), zero padded."""
    c, h, w = fmap.shape
    px = x * w - 0.5
    py = y * h - 0.5
    left = math.floor(px)
    top = math.floor(py)
    out = np.zeros(c)
    for row in (top, top + 1):
        for col in (left, left + 1):
            if 0 <= row < h and 0 <= col < w:
                weight = (1 - abs(px - col)) * (1 - abs(py - row))
                out += weight * fmap[:, row, col]
    return out


def naive_level_weights(z_w: float, z_h: float, levels=(2, 3, 4, 5)) -> list:
    def gauss(z):
        raw = [math.exp(-((lv - z) ** 2) / 2.0) for lv in levels]
        total = sum(raw)
        return [r / total for r in raw]

    return [a + b for a, b in zip(gauss(z_h), gauss(z_w))]


def naive_bidirectional(levels: list, x: float, y: float, z_w: float, z_h: float) -> np.ndarray:
    """Scale-weighted read over a list of [C, H, W] maps at one point."""
    x = min(max(x, 0.0), 1.0)
    y = min(max(y, 0.0), 1.0)
    weights = naive_level_weights(z_w, z_h)
    return sum(wt * naive_bilinear(fm, x, y) for wt, fm in zip(weights, levels))


def naive_roi_align(fmap: np.ndarray, box, size: int, ratio: int = 2) -> np.ndarray:
    """RoIAlign of one normalised (cx, cy, w, h) box on one [C, H, W] map -> [S*S, C]."""
    cx, cy, bw, bh = box
    x1 = cx - bw / 2
    y1 = cy - bh / 2
    out = np.zeros((size * size, fmap.shape[0]))
    for i in range(size):
        for j in range(size):
            acc = np.zeros(fmap.shape[0])
            for a in range(ratio):
                for b in range(ratio):
                    sy = y1 + bh * (i + (a + 0.5) / ratio) / size
                    sx = x1 + bw * (j + (b + 0.5) / ratio) / size
                    acc += naive_bilinear(fmap, sx, sy)
            out[i * size + j] = acc / (ratio * ratio)
    return out


def naive_fpn_level(box, image_size, canonical: float = 56.0) -> int:
    h, w = image_size
    scale = math.sqrt(box[2] * w * box[3] * h)
    return int(min(max(math.floor(4 + math.log2(scale / canonical)), 2), 5))


def permutation_costs(cost: np.ndarray):
    """Yield (pred_indices, total) for every injection gt -> pred, lexicographically."""
    n_pred, n_gt = cost.shape
    for perm in itertools.permutations(range(n_pred), n_gt):
        yield perm, sum(cost[p, g] for g, p in enumerate(perm))


def naive_giou(a, b) -> float:
    """GIoU of two corner boxes (x1, y1, x2, y2)."""
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    hull = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return inter / union - (hull - union) / hull


def naive_focal(logit: float, target: int, alpha: float = 0.25, gamma: float = 2.0) -> float:
    p = 1.0 / (1.0 + math.exp(-logit))
    if target == 1:
        return -alpha * (1 - p) ** gamma * math.log(p)
    return -(1 - alpha) * p ** gamma * math.log(1 - p)


def naive_mff_cell(levels: list, i: int, j: int) -> np.ndarray:
    """(c, 85) block for P5 cell (i, j) from single-image [c, h, w] maps P2..P5.

    Column order: the P5 cell, then P4, P3 and P2 texels of the aligned
    region in row-major order.
    """
    p2, p3, p4, p5 = levels
    cols = [p5[:, i, j]]
    for fmap, f in ((p4, 2), (p3, 4), (p2, 8)):
        for r in range(i * f, (i + 1) * f):
            for s in range(j * f, (j + 1) * f):
                cols.append(fmap[:, r, s])
    return np.stack(cols, axis=1)


def naive_layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape[:-1]):
        row = x[idx]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[idx] = (row - mu) / math.sqrt(var + eps)
    return out


def naive_qgfe(q: np.ndarray, roi: np.ndarray, w1, b1, w2, b2, w3, b3) -> np.ndarray:
    """Query-guided enhancement of one (S*S, C) RoI grid with unit-gain norms."""
    c = q.shape[0]
    ss = roi.shape[0]
    k1 = (q @ w1 + b1).reshape(c, ss)
    k2 = (q @ w2 + b2).reshape(c, ss)
    x = np.maximum(naive_layer_norm(roi @ k1), 0.0)
    x = np.maximum(naive_layer_norm(k2 @ x), 0.0)
    return x.reshape(-1) @ w3 + b3


def naive_iou_xywh(a, b) -> float:
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def naive_ap(dets: list, gts: list, threshold: float) -> float:
    """Single-class AP by explicit PR-curve construction.

    ``dets`` is a list of (score, image, box) and ``gts`` a list of
    (image, box); every ranked prefix is scored separately and the 101
    recall points take the best precision at any prefix reaching them.
    """
    if not gts:
        return 0.0
    ranked = sorted(dets, key=lambda d: -d[0])
    matched = set()
    flags = []
    for score, image, box in ranked:
        best, best_iou = None, -1.0
        for g, (g_image, g_box) in enumerate(gts):
            if g_image != image or g in matched:
                continue
            iou = naive_iou_xywh(box, g_box)
            if iou > best_iou:
                best, best_iou = g, iou
        hit = best is not None and best_iou >= threshold
        if hit:
            matched.add(best)
        flags.append(hit)
    curve = []
    for k in range(1, len(flags) + 1):
        tp = sum(flags[:k])
        curve.append((tp / len(gts), tp / k))
    total = 0.0
    for i in range(101):
        r = i / 100
        reachable = [p for rec, p in curve if rec >= r - 1e-12]
        total += max(reachable) if reachable else 0.0
    return total / 101
