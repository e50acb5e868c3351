"""COCO-protocol average precision, reimplemented without external tooling.

Per class, predictions from all images are ranked by score and greedily
matched to unmatched ground truths of the same image at each IoU threshold
(0.50, 0.55, ..., 0.95).  Precision is made monotone and read at 101 recall
points.  Classes with no ground truth are left out of the mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from golo.boxes import pairwise_iou_xywh

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class ImagePredictions:
    boxes: np.ndarray   # [N, 4] absolute xywh
    scores: np.ndarray  # [N]
    labels: np.ndarray  # [N] category ids


@dataclass
class ImageTruth:
    boxes: np.ndarray   # [M, 4] absolute xywh
    labels: np.ndarray  # [M]


@dataclass
class EvalResult:
    AP: float
    AP50: float
    AP75: float
    per_class: dict = field(default_factory=dict)
    num_images: int = 0
    num_gts: int = 0
    num_preds: int = 0

    def as_dict(self) -> dict:
        return {"AP": self.AP, "AP50": self.AP50, "AP75": self.AP75,
                "per_class": {str(k): v for k, v in self.per_class.items()},
                "num_images": self.num_images, "num_gts": self.num_gts, "num_preds": self.num_preds}


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from a ranked true-positive indicator."""
    if num_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS - 1e-12, side="left")
    values = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(values.mean())


def _class_tp(preds, truths, category, threshold):
    entries = []  # (score, image index, box)
    gt_by_image = {}
    for i, (p, t) in enumerate(zip(preds, truths)):
        sel = p.labels == category
        for score, box in zip(p.scores[sel], p.boxes[sel]):
            entries.append((float(score), i, box))
        gt_by_image[i] = t.boxes[t.labels == category]
    num_gt = sum(len(b) for b in gt_by_image.values())
    order = sorted(range(len(entries)), key=lambda k: -entries[k][0])
    used = {i: np.zeros(len(b), dtype=bool) for i, b in gt_by_image.items()}
    tp = np.zeros(len(entries))
    for rank, k in enumerate(order):
        _, img, box = entries[k]
        gts = gt_by_image[img]
        if len(gts) == 0:
            continue
        ious = pairwise_iou_xywh(box[None], gts)[0]
        ious[used[img]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= threshold:
            used[img][best] = True
            tp[rank] = 1.0
    return tp, num_gt


def evaluate_detections(preds: Sequence[ImagePredictions], truths: Sequence[ImageTruth],
                        score_thresh: float = 0.0) -> EvalResult:
    if len(preds) != len(truths):
        raise ValueError("need one prediction set per image")
    preds = [ImagePredictions(np.asarray(p.boxes, float).reshape(-1, 4), np.asarray(p.scores, float),
                              np.asarray(p.labels)) for p in preds]
    preds = [ImagePredictions(p.boxes[p.scores >= score_thresh], p.scores[p.scores >= score_thresh],
                              p.labels[p.scores >= score_thresh]) for p in preds]
    truths = [ImageTruth(np.asarray(t.boxes, float).reshape(-1, 4), np.asarray(t.labels)) for t in truths]
    categories = sorted({int(c) for t in truths for c in t.labels})
    table = np.zeros((len(categories), len(IOU_THRESHOLDS)))
    for ci, cat in enumerate(categories):
        for ti, thr in enumerate(IOU_THRESHOLDS):
            tp, num_gt = _class_tp(preds, truths, cat, thr)
            table[ci, ti] = interpolated_ap(tp, num_gt)
    if categories:
        ap, ap50, ap75 = float(table.mean()), float(table[:, 0].mean()), float(table[:, 5].mean())
    else:
        ap = ap50 = ap75 = 0.0
    return EvalResult(ap, ap50, ap75, {cat: float(table[ci].mean()) for ci, cat in enumerate(categories)},
                      len(truths), sum(len(t.labels) for t in truths), sum(len(p.scores) for p in preds))


def evaluate_model(model, scenes, batch_size: int = 8, score_thresh: float = 0.0) -> EvalResult:
    """Score every (query, class) pair of the refined stage as one detection."""
    from golo.boxes import cxcywh_normalized_to_xywh
    from golo.data import collate

    preds, truths = [], []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        images, _ = collate(chunk)
        probs, boxes = model.predict(images)
        h, w = images.shape[2:]
        for b, scene in enumerate(chunk):
            n, k = probs[b].shape
            xywh = cxcywh_normalized_to_xywh(boxes[b], w, h)
            preds.append(ImagePredictions(np.repeat(xywh, k, axis=0), probs[b].reshape(-1),
                                          np.tile(np.arange(1, k + 1), n)))
            truths.append(ImageTruth(scene.boxes(), scene.labels()))
    return evaluate_detections(preds, truths, score_thresh)
