"""Focal loss for classes and attributes, smooth-L1 box loss, and the joint objective.

Scalar ``binary_ce``/``focal_loss`` operate on plain floats and serve as the
reference the tensor losses are checked against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

EPS = 1e-7
HUBER_BETA = 1.0 / 9.0


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class LossWeights:
    box: float = 1.0
    attr: float = 1.0


def _clamp(p: float) -> float:
    return min(max(p, EPS), 1.0 - EPS)


def _p_t(p: float, y: int) -> float:
    if y not in (1, -1):
        raise ValueError(f"label must be +1 or -1, got {y}")
    return p if y == 1 else 1.0 - p


def binary_ce(p: float, y: int) -> float:
    return -math.log(_p_t(_clamp(p), y))


def focal_loss(p: float, y: int, params: FocalParams = FocalParams()) -> float:
    pt = _p_t(_clamp(p), y)
    return -params.alpha * (1.0 - pt) ** params.gamma * math.log(pt)


def sigmoid_focal_loss(logits: torch.Tensor, targets: torch.Tensor,
                       params: FocalParams) -> torch.Tensor:
    """Elementwise focal loss on logits with 0/1 targets (no reduction)."""
    p = torch.sigmoid(logits).clamp(EPS, 1.0 - EPS)
    pt = torch.where(targets > 0.5, p, 1.0 - p)
    return -params.alpha * (1.0 - pt) ** params.gamma * torch.log(pt)


def smooth_l1(residual: torch.Tensor, beta: float = HUBER_BETA) -> torch.Tensor:
    a = residual.abs()
    return torch.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def _check(pred: torch.Tensor, target: torch.Tensor, what: str):
    if pred.shape != target.shape:
        raise ShapeMismatchError(
            f"{what}: prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")


def _normalizer(state: torch.Tensor) -> torch.Tensor:
    return (state == 1).sum().clamp(min=1).to(torch.float64)


def class_loss(pred_logits: torch.Tensor, class_target: torch.Tensor, anchor_state: torch.Tensor,
               params: FocalParams = FocalParams()) -> torch.Tensor:
    """Focal loss over all (anchor, class) pairs of non-ignored anchors / #positives.

    Tensors may carry a leading batch dimension; the normalizer then counts
    positives over the whole batch.
    """
    _check(pred_logits, class_target, "class_loss")
    if anchor_state.shape != pred_logits.shape[:-1]:
        raise ShapeMismatchError("class_loss: anchor_state does not match anchor count")
    valid = (anchor_state != -1).unsqueeze(-1)
    fl = sigmoid_focal_loss(pred_logits, class_target, params)
    return (fl * valid).sum() / _normalizer(anchor_state).to(fl.dtype)


def attribute_loss(pred_logits: torch.Tensor, attr_target: torch.Tensor,
                   anchor_state: torch.Tensor, params: FocalParams = FocalParams(),
                   include_negatives: bool = False) -> torch.Tensor:
    """Independent per-attribute focal loss on positive anchors / #positives.

    With ``include_negatives`` the negative anchors also contribute, against
    all-zero attribute targets.
    """
    _check(pred_logits, attr_target, "attribute_loss")
    if anchor_state.shape != pred_logits.shape[:-1]:
        raise ShapeMismatchError("attribute_loss: anchor_state does not match anchor count")
    mask = anchor_state == 1
    if include_negatives:
        mask = mask | (anchor_state == 0)
    fl = sigmoid_focal_loss(pred_logits, attr_target, params)
    return (fl * mask.unsqueeze(-1)).sum() / _normalizer(anchor_state).to(fl.dtype)


def box_loss(pred_offsets: torch.Tensor, box_target: torch.Tensor,
             anchor_state: torch.Tensor) -> torch.Tensor:
    _check(pred_offsets, box_target, "box_loss")
    if anchor_state.shape != pred_offsets.shape[:-1]:
        raise ShapeMismatchError("box_loss: anchor_state does not match anchor count")
    pos = (anchor_state == 1).unsqueeze(-1)
    sl1 = smooth_l1(pred_offsets - box_target)
    return (sl1 * pos).sum() / _normalizer(anchor_state).to(sl1.dtype)


@dataclass
class LossBreakdown:
    class_loss: torch.Tensor
    box_loss: torch.Tensor
    attr_loss: torch.Tensor
    total: torch.Tensor
    normalizer: int

    def as_floats(self) -> dict:
        return {
            "class_loss": float(self.class_loss),
            "box_loss": float(self.box_loss),
            "attr_loss": float(self.attr_loss),
            "total": float(self.total),
            "normalizer": self.normalizer,
        }


def total_loss(cls_logits: torch.Tensor, box_pred: torch.Tensor, attr_logits: torch.Tensor,
               targets: dict, weights: LossWeights = LossWeights(),
               params: FocalParams = FocalParams(),
               attr_on_negatives: bool = False) -> LossBreakdown:
    """``class + w_box * box + w_attr * attr``.

    ``targets`` maps ``class_target``, ``box_target``, ``attr_target`` and
    ``anchor_state`` to tensors aligned with the predictions (see
    :func:`targets_to_torch`).
    """
    state = targets["anchor_state"]
    lc = class_loss(cls_logits, targets["class_target"], state, params)
    lb = box_loss(box_pred, targets["box_target"], state)
    la = attribute_loss(attr_logits, targets["attr_target"], state, params, attr_on_negatives)
    total = lc + weights.box * lb + weights.attr * la
    return LossBreakdown(lc, lb, la, total, int((state == 1).sum()))


def targets_to_torch(targets, dtype=torch.float32) -> dict:
    """Stack one or more :class:`~dad.anchors.TargetTensors` into batched tensors."""
    if not isinstance(targets, (list, tuple)):
        targets = [targets]
    return {
        "class_target": torch.stack([torch.as_tensor(t.class_target, dtype=dtype) for t in targets]),
        "box_target": torch.stack([torch.as_tensor(t.box_target, dtype=dtype) for t in targets]),
        "attr_target": torch.stack([torch.as_tensor(t.attr_target, dtype=dtype) for t in targets]),
        "anchor_state": torch.stack([torch.as_tensor(t.anchor_state).long() for t in targets]),
    }
