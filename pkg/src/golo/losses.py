"""Set-prediction losses: focal classification, L1 and GIoU box terms, auxiliary terms."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Optional, Sequence

import numpy as np

from golo import tensor as T
from golo.boxes import elementwise_giou, pairwise_giou
from golo.errors import ContractError
from golo.matching import Assignment, hungarian
from golo.tensor import Tensor

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    aux_bbox: float = 0.25
    aux_cls: float = 0.25

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


@dataclass
class StageOutput:
    """Predictions of one decoder stage.

    ``logits`` is [B, n, K] (K = 1 for the class-agnostic global stage),
    ``boxes`` is [B, n, 4] normalised (cx, cy, w, h).  ``aux_boxes`` are the
    boxes decoded after the first step and ``aux_logits`` the logits after the
    second step.
    """

    logits: Tensor
    boxes: Tensor
    aux_boxes: Optional[Tensor] = None
    aux_logits: Optional[Tensor] = None

    @property
    def fg_logit(self) -> Tensor:
        return self.logits[..., 0]


@dataclass
class Target:
    boxes: np.ndarray   # [m, 4] normalised (cx, cy, w, h)
    labels: np.ndarray  # [m] zero-based class index

    def __len__(self):
        return len(self.labels)


@dataclass
class LossBreakdown:
    l_cls: Tensor
    l_l1: Tensor
    l_giou: Tensor
    l_aux_bbox: Tensor
    l_aux_cls: Tensor
    total: Tensor

    def as_floats(self) -> dict:
        return {f.name: float(getattr(self, f.name).data) for f in fields(self)}


def focal_loss(logits, targets, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Elementwise alpha-balanced sigmoid focal loss."""
    logits = T.as_tensor(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    p = T.sigmoid(logits)
    pos = T.power(1.0 - p, gamma) * T.log_sigmoid(logits) * (-alpha)
    neg = T.power(p, gamma) * T.log_sigmoid(-logits) * (-(1.0 - alpha))
    return pos * t + neg * (1.0 - t)


def focal_cost(logits: np.ndarray, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> np.ndarray:
    """Matching cost of labelling each logit positive: positive loss minus negative loss."""
    x = np.asarray(logits, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-x))
    log_p = -np.logaddexp(0.0, -x)
    log_1mp = -np.logaddexp(0.0, x)
    pos = alpha * (1 - p) ** gamma * (-log_p)
    neg = (1 - alpha) * p ** gamma * (-log_1mp)
    return pos - neg


def pairwise_cost(logits: np.ndarray, boxes: np.ndarray, target: Target,
                  weights: LossWeights) -> np.ndarray:
    """Cost [n_pred, n_gt] of pairing each prediction with each ground truth.

    With a single logit column every ground truth is scored against the
    foreground logit; otherwise against its own class column.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[:, None]
    boxes = np.asarray(boxes, dtype=np.float64)
    n = boxes.shape[0]
    m = len(target)
    if m == 0:
        return np.zeros((n, 0))
    if n < m:
        raise ContractError(f"need at least as many predictions ({n}) as ground truths ({m})")
    cols = np.zeros(m, dtype=np.int64) if logits.shape[1] == 1 else target.labels
    cls = focal_cost(logits)[:, cols]
    l1 = np.abs(boxes[:, None, :] - target.boxes[None, :, :]).sum(axis=-1)
    g = pairwise_giou(boxes, target.boxes)
    return weights.cls * cls + weights.l1 * l1 + weights.giou * (1.0 - g)


def _class_targets(shape: tuple, targets: Sequence[Target], assignments: Sequence[Assignment]):
    onehot = np.zeros(shape)
    for b, (tgt, asg) in enumerate(zip(targets, assignments)):
        if not asg.pairs:
            continue
        cols = np.zeros(len(asg.pairs), dtype=np.int64) if shape[-1] == 1 else tgt.labels[asg.gt_indices]
        onehot[b, asg.pred_indices, cols] = 1.0
    return onehot


def _matched(boxes: Tensor, targets, assignments, norms):
    bsz, n, _ = boxes.shape
    flat_idx, gt_boxes, row_w = [], [], []
    for b, (tgt, asg) in enumerate(zip(targets, assignments)):
        if not asg.pairs:
            continue
        flat_idx.append(b * n + asg.pred_indices)
        gt_boxes.append(tgt.boxes[asg.gt_indices])
        row_w.append(np.full(len(asg.pairs), 1.0 / (norms[b] * bsz)))
    if not flat_idx:
        return None
    pred = boxes.reshape(bsz * n, 4)[np.concatenate(flat_idx)]
    gt = Tensor(np.concatenate(gt_boxes), dtype=boxes.dtype)
    return pred, gt, Tensor(np.concatenate(row_w), dtype=boxes.dtype)


def _zero(like: Tensor) -> Tensor:
    return (like * 0.0).sum()


def box_losses(boxes: Tensor, targets, assignments) -> tuple[Tensor, Tensor]:
    """Per-image (sum L1, sum 1 - GIoU) over matched pairs / n_gt, averaged over the batch."""
    norms = [max(len(t), 1) for t in targets]
    matched = _matched(boxes, targets, assignments, norms)
    if matched is None:
        return _zero(boxes), _zero(boxes)
    pred, gt, w = matched
    l1 = (T.absolute(pred - gt).sum(axis=-1) * w).sum()
    lg = ((1.0 - elementwise_giou(pred, gt)) * w).sum()
    return l1, lg


def cls_loss(logits: Tensor, targets, assignments) -> Tensor:
    """Focal loss over all predictions / n_gt per image, averaged over the batch.

    Unmatched predictions (and every prediction of an image without objects)
    are pushed towards background.
    """
    bsz = logits.shape[0]
    onehot = _class_targets(logits.shape, targets, assignments)
    norms = np.array([max(len(t), 1) for t in targets], dtype=float)
    w = Tensor((1.0 / (norms * bsz)).reshape(bsz, 1, 1), dtype=logits.dtype)
    return (focal_loss(logits, onehot) * w).sum()


def stage_loss(out: StageOutput, targets: Sequence[Target],
               assignments: Sequence[Assignment]) -> dict:
    """Unweighted matching-loss terms of one stage: {'cls', 'l1', 'giou'}."""
    l1, lg = box_losses(out.boxes, targets, assignments)
    return {"cls": cls_loss(out.logits, targets, assignments), "l1": l1, "giou": lg}


def match_stage(out: StageOutput, targets: Sequence[Target], weights: LossWeights,
                matcher: Callable = hungarian) -> list:
    logits = out.logits.data
    boxes = out.boxes.data
    result = []
    for b, tgt in enumerate(targets):
        if len(tgt) == 0:
            result.append(Assignment([], 0.0))
            continue
        result.append(matcher(pairwise_cost(logits[b], boxes[b], tgt, weights)))
    return result


def total_loss(global_out: StageOutput, local_out: StageOutput, targets: Sequence[Target],
               weights: LossWeights, matcher: Callable = hungarian) -> LossBreakdown:
    """Matching losses of both stages plus auxiliary step-1 box and step-2 class terms.

    Auxiliary targets reuse each stage's final assignment; the auxiliary
    branches are not detached.
    """
    terms = {"cls": [], "l1": [], "giou": [], "aux_bbox": [], "aux_cls": []}
    for out in (global_out, local_out):
        if out.aux_boxes is None or out.aux_logits is None:
            raise ContractError("stage output is missing auxiliary intermediates")
        assignments = match_stage(out, targets, weights, matcher)
        main = stage_loss(out, targets, assignments)
        for key in ("cls", "l1", "giou"):
            terms[key].append(main[key])
        aux_l1, aux_giou = box_losses(out.aux_boxes, targets, assignments)
        terms["aux_bbox"].append(aux_l1 + aux_giou)
        terms["aux_cls"].append(cls_loss(out.aux_logits, targets, assignments))

    parts = {k: v[0] + v[1] for k, v in terms.items()}
    total = (parts["cls"] * weights.cls + parts["l1"] * weights.l1 + parts["giou"] * weights.giou
             + parts["aux_bbox"] * weights.aux_bbox + parts["aux_cls"] * weights.aux_cls)
    return LossBreakdown(parts["cls"], parts["l1"], parts["giou"], parts["aux_bbox"],
                         parts["aux_cls"], total)
