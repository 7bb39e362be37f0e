"""Box arithmetic: IoU, anchor-relative offset coding and greedy NMS.

Boxes are ``(x1, y1, x2, y2)`` in continuous pixel coordinates; pixel
``(i, j)`` covers ``[j, j + 1) x [i, i + 1)``. Array functions take ``(N, 4)``
float arrays; the scalar helpers wrap them for single :class:`Box` values.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

# log(1000 / 16), the usual cap on exp() of a log-size offset
DEFAULT_SIZE_CLAMP = math.log(1000.0 / 16)


class DegenerateBoxError(ValueError):
    """Raised for boxes with non-positive width or height."""


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self):
            raise DegenerateBoxError(f"non-finite box {tuple(self)}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise DegenerateBoxError(f"box {tuple(self)} has non-positive area")

    def __iter__(self):
        return iter((self.x1, self.y1, self.x2, self.y2))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array(tuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return cls(x1, y1, x2, y2)


class BoxOffsets(NamedTuple):
    tx: float
    ty: float
    tw: float
    th: float


class _ClampCounter:
    """Thread-safe tally of decode calls whose log-size offsets were clamped."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n: int):
        if n:
            with self._lock:
                self._count += n

    @property
    def count(self) -> int:
        return self._count

    def reset(self):
        with self._lock:
            self._count = 0


clamp_counter = _ClampCounter()


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected (N, 4) boxes, got shape {arr.shape}")
    return arr


def box_area(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def validate_boxes(boxes: np.ndarray):
    bad = ~((boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1]))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DegenerateBoxError(f"box {i} {boxes[i].tolist()} has non-positive area")


def pairwise_iou(a, b) -> np.ndarray:
    """IoU matrix of shape ``(len(a), len(b))``."""
    a = as_boxes(a)
    b = as_boxes(b)
    validate_boxes(a)
    validate_boxes(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return inter / union


def iou(a: Box, b: Box) -> float:
    return float(pairwise_iou(a.as_array(), b.as_array())[0, 0])


def _center_size(boxes: np.ndarray):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode_boxes(anchors, gts) -> np.ndarray:
    """Center/log-size offsets of ``gts`` relative to ``anchors`` (row-wise)."""
    anchors = as_boxes(anchors)
    gts = as_boxes(gts)
    ax, ay, aw, ah = _center_size(anchors)
    gx, gy, gw, gh = _center_size(gts)
    return np.stack(
        [(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )


def decode_boxes(anchors, offsets, size_clamp: float = DEFAULT_SIZE_CLAMP) -> np.ndarray:
    """Inverse of :func:`encode_boxes`.

    ``tw``/``th`` beyond ``+-size_clamp`` are clamped before ``exp`` and counted
    in :data:`clamp_counter`. No clipping to image bounds happens here.
    """
    anchors = as_boxes(anchors)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    ax, ay, aw, ah = _center_size(anchors)
    tw, th = offsets[:, 2], offsets[:, 3]
    over = (np.abs(tw) > size_clamp) | (np.abs(th) > size_clamp)
    clamp_counter.add(int(over.sum()))
    tw = np.clip(tw, -size_clamp, size_clamp)
    th = np.clip(th, -size_clamp, size_clamp)
    cx = ax + offsets[:, 0] * aw
    cy = ay + offsets[:, 1] * ah
    w = aw * np.exp(tw)
    h = ah * np.exp(th)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode(anchor: Box, gt: Box) -> BoxOffsets:
    return BoxOffsets(*encode_boxes(anchor.as_array(), gt.as_array())[0].tolist())


def decode(anchor: Box, offsets: Sequence[float],
           size_clamp: float = DEFAULT_SIZE_CLAMP) -> Box:
    return Box.from_array(decode_boxes(anchor.as_array(), offsets, size_clamp)[0])


def clip_boxes(boxes: np.ndarray, image_size) -> np.ndarray:
    h, w = image_size
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, w)
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, h)
    return out


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties to the lower index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy hard NMS.

    A box survives iff its IoU with every previously kept box is
    ``<= iou_threshold``. Returns kept indices in descending score order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return []
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    boxes = as_boxes(boxes)
    validate_boxes(boxes)
    x1, y1, x2, y2 = boxes.T
    areas = box_area(boxes)
    order = score_order(scores)
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0, None)
        inter = iw * ih
        ovr = inter / (areas[i] + areas[rest] - inter)
        order = rest[ovr <= iou_threshold]
    return keep


def batched_nms(boxes, scores, groups, iou_threshold: float) -> list[int]:
    """NMS applied independently within each group (e.g. class id)."""
    scores = np.asarray(scores, dtype=np.float64)
    groups = np.asarray(groups)
    keep = []
    for g in np.unique(groups):
        idx = np.flatnonzero(groups == g)
        keep.extend(idx[nms(np.asarray(boxes)[idx], scores[idx], iou_threshold)].tolist())
    keep = np.asarray(keep, dtype=np.int64)
    if keep.size == 0:
        return []
    order = np.lexsort((keep, -scores[keep]))
    return keep[order].tolist()
