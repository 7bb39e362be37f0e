"""Anchor grids over pyramid levels and per-anchor training targets.

Anchor ordering is level-major, then row-major over the level's feature map,
then anchor slot. Slot ``s`` enumerates ``(ratio, octave)`` pairs ratio-major:
``s = ratio_index * len(scale_octaves) + octave_index``. Head outputs are
flattened in the same order, so row ``i`` of every head lines up with anchor
``i``.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import as_boxes, encode_boxes, pairwise_iou, validate_boxes

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1

DEFAULT_LEVELS = ((8, 32.0), (16, 64.0), (32, 128.0), (64, 256.0), (128, 512.0))
DEFAULT_OCTAVES = (1.0, 2.0 ** (1.0 / 3.0), 2.0 ** (2.0 / 3.0))


@dataclass(frozen=True)
class AnchorConfig:
    levels: tuple = DEFAULT_LEVELS  # (stride, base_size) per level
    ratios: tuple = (0.5, 1.0, 2.0)
    scale_octaves: tuple = DEFAULT_OCTAVES
    pos_iou: float = 0.5
    neg_iou: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple((int(s), float(b)) for s, b in self.levels))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        object.__setattr__(self, "scale_octaves", tuple(float(o) for o in self.scale_octaves))
        if not self.levels or not self.ratios or not self.scale_octaves:
            raise ValueError("levels, ratios and scale_octaves must be non-empty")
        if any(r <= 0 for r in self.ratios) or any(o <= 0 for o in self.scale_octaves):
            raise ValueError("ratios and octaves must be positive")
        if not 0.0 <= self.neg_iou <= self.pos_iou <= 1.0:
            raise ValueError("need 0 <= neg_iou <= pos_iou <= 1")

    @property
    def num_anchors(self) -> int:
        return len(self.ratios) * len(self.scale_octaves)

    @property
    def strides(self) -> tuple:
        return tuple(s for s, _ in self.levels)

    def shapes(self, base_size: float) -> np.ndarray:
        """``(A, 2)`` anchor widths/heights for one level, in slot order.

        Ratio ``r`` means width:height = 1:r at preserved area.
        """
        wh = []
        for r in self.ratios:
            for o in self.scale_octaves:
                size = base_size * o
                wh.append((size / math.sqrt(r), size * math.sqrt(r)))
        return np.asarray(wh, dtype=np.float64)

    def feature_shapes(self, image_size) -> list[tuple[int, int]]:
        h, w = image_size
        return [(-(-h // s), -(-w // s)) for s in self.strides]

    def to_dict(self) -> dict:
        return {
            "levels": [list(lv) for lv in self.levels],
            "ratios": list(self.ratios),
            "scale_octaves": list(self.scale_octaves),
            "pos_iou": self.pos_iou,
            "neg_iou": self.neg_iou,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorConfig":
        return cls(**{k: tuple(map(tuple, v)) if k == "levels" else v for k, v in d.items()})


@dataclass(frozen=True)
class AnchorSet:
    boxes: np.ndarray  # (N, 4)
    provenance: np.ndarray  # (N, 4) int: level, grid y, grid x, slot
    feature_shapes: tuple

    def __len__(self):
        return len(self.boxes)

    def level_slices(self) -> list[slice]:
        out, start = [], 0
        for lvl in range(len(self.feature_shapes)):
            n = int((self.provenance[:, 0] == lvl).sum())
            out.append(slice(start, start + n))
            start += n
        return out


@functools.lru_cache(maxsize=64)
def _cached_anchors(config: AnchorConfig, image_size: tuple) -> AnchorSet:
    boxes, prov = [], []
    shapes = config.feature_shapes(image_size)
    for lvl, ((stride, base), (fh, fw)) in enumerate(zip(config.levels, shapes)):
        wh = config.shapes(base)
        a = len(wh)
        ys, xs = np.meshgrid(np.arange(fh), np.arange(fw), indexing="ij")
        cx = ((xs + 0.5) * stride).reshape(-1, 1)
        cy = ((ys + 0.5) * stride).reshape(-1, 1)
        lvl_boxes = np.stack(
            [cx - wh[:, 0] / 2, cy - wh[:, 1] / 2, cx + wh[:, 0] / 2, cy + wh[:, 1] / 2],
            axis=-1,
        ).reshape(-1, 4)
        p = np.stack(
            [
                np.full(fh * fw * a, lvl),
                np.repeat(ys.reshape(-1), a),
                np.repeat(xs.reshape(-1), a),
                np.tile(np.arange(a), fh * fw),
            ],
            axis=1,
        )
        boxes.append(lvl_boxes)
        prov.append(p)
    boxes = np.concatenate(boxes).astype(np.float64)
    prov = np.concatenate(prov).astype(np.int64)
    boxes.setflags(write=False)
    prov.setflags(write=False)
    return AnchorSet(boxes, prov, tuple(shapes))


def generate_anchors(config: AnchorConfig, image_size) -> AnchorSet:
    """All anchors for an image of ``(H, W)`` pixels; memoized and read-only."""
    h, w = (int(v) for v in image_size)
    return _cached_anchors(config, (h, w))


@dataclass
class TargetTensors:
    class_target: np.ndarray  # (N, K) float 0/1
    box_target: np.ndarray  # (N, 4), zero off the positives
    attr_target: np.ndarray  # (N, Z), zero off the positives
    anchor_state: np.ndarray  # (N,) int8 in {POSITIVE, NEGATIVE, IGNORE}
    matched_gt: np.ndarray  # (N,) int, -1 where unmatched

    @property
    def positive(self) -> np.ndarray:
        return self.anchor_state == POSITIVE

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def match_anchors(anchor_boxes: np.ndarray, gt_boxes: np.ndarray, pos_iou: float,
                  neg_iou: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(state, matched_gt)`` for every anchor.

    Each anchor takes its max-IoU gt (lowest gt index on ties). Then gts are
    visited in order and each forces its best still-unforced anchor (lowest
    anchor index on ties) to be positive for itself, so every gt owns at
    least one positive anchor.
    """
    n = len(anchor_boxes)
    state = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        return state, matched
    ious = pairwise_iou(anchor_boxes, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    state[best_iou >= pos_iou] = POSITIVE
    state[(best_iou >= neg_iou) & (best_iou < pos_iou)] = IGNORE
    matched[:] = best_gt
    forced = np.zeros(n, dtype=bool)
    for j in range(len(gt_boxes)):
        col = np.where(forced, -np.inf, ious[:, j])
        a = int(col.argmax())
        forced[a] = True
        state[a] = POSITIVE
        matched[a] = j
    matched[state != POSITIVE] = -1
    return state, matched


def assign_targets(anchors: AnchorSet, gts: Sequence, config: AnchorConfig,
                   num_classes: int, num_attributes: int) -> TargetTensors:
    """Label every anchor positive / negative / ignore against ``gts``.

    ``gts`` holds objects with ``box`` (a :class:`~dad.geometry.Box`),
    ``class_id`` and ``attributes``.
    """
    n = len(anchors)
    cls_t = np.zeros((n, num_classes), dtype=np.float32)
    box_t = np.zeros((n, 4), dtype=np.float64)
    attr_t = np.zeros((n, num_attributes), dtype=np.float32)
    if not gts:
        state, matched = match_anchors(anchors.boxes, np.zeros((0, 4)), config.pos_iou,
                                       config.neg_iou)
        return TargetTensors(cls_t, box_t, attr_t, state, matched)

    gt_boxes = as_boxes([tuple(g.box) for g in gts])
    validate_boxes(gt_boxes)
    gt_cls = np.asarray([g.class_id for g in gts], dtype=np.int64)
    gt_attr = np.asarray([list(g.attributes) for g in gts], dtype=np.float32)
    if gt_attr.shape[1] != num_attributes:
        raise ValueError(f"attribute vectors have length {gt_attr.shape[1]}, "
                         f"expected {num_attributes}")
    if gt_cls.min() < 0 or gt_cls.max() >= num_classes:
        raise ValueError("class_id out of range")

    state, matched = match_anchors(anchors.boxes, gt_boxes, config.pos_iou, config.neg_iou)
    pos = np.flatnonzero(state == POSITIVE)
    m = matched[pos]
    cls_t[pos, gt_cls[m]] = 1.0
    box_t[pos] = encode_boxes(anchors.boxes[pos], gt_boxes[m])
    attr_t[pos] = gt_attr[m]
    return TargetTensors(cls_t, box_t, attr_t, state, matched)
