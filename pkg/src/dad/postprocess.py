"""Turn head outputs into detections, render them, and serialize them."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .anchors import AnchorSet
from .geometry import Box, batched_nms, clip_boxes, decode_boxes, nms, score_order


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    score_threshold: float = 0.05
    pre_nms_topk: int = 1000  # per level
    nms_iou: float = 0.5
    max_detections: int = 100
    attr_threshold: float = 0.5
    class_agnostic_nms: bool = False

    def __post_init__(self):
        for name in ("score_threshold", "nms_iou", "attr_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.pre_nms_topk < 1 or self.max_detections < 1:
            raise ValueError("pre_nms_topk and max_detections must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    attr_probs: tuple
    attr_flags: tuple
    anchor_index: int = -1


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def decode(cls_logits, box_offsets, attr_logits, anchors: AnchorSet, config: DecodeConfig,
           image_size) -> list[Detection]:
    """Decode one image's flattened head rows (``(N, K)``, ``(N, 4)``, ``(N, Z)``).

    Per level: score threshold, then the top ``pre_nms_topk`` (anchor, class)
    candidates. Levels are pooled, boxes decoded and clipped, then NMS runs
    (per class unless ``class_agnostic_nms``). Each detection carries the
    attribute probabilities of the anchor that produced its class score.
    """
    cls_logits = np.asarray(cls_logits, dtype=np.float64)
    box_offsets = np.asarray(box_offsets, dtype=np.float64)
    attr_logits = np.asarray(attr_logits, dtype=np.float64)
    n = len(anchors)
    if not (cls_logits.shape[0] == box_offsets.shape[0] == attr_logits.shape[0] == n):
        raise AlignmentError(
            f"head rows {cls_logits.shape[0]}/{box_offsets.shape[0]}/{attr_logits.shape[0]} "
            f"do not match {n} anchors")
    k = cls_logits.shape[1]
    scores = _sigmoid(cls_logits)

    cand_anchor, cand_class = [], []
    for sl in anchors.level_slices():
        flat = scores[sl].reshape(-1)
        idx = np.flatnonzero(flat > config.score_threshold)
        if idx.size == 0:
            continue
        idx = idx[score_order(flat[idx])[: config.pre_nms_topk]]
        cand_anchor.append(idx // k + sl.start)
        cand_class.append(idx % k)
    if not cand_anchor:
        return []
    a_idx = np.concatenate(cand_anchor)
    c_idx = np.concatenate(cand_class)
    s = scores[a_idx, c_idx]
    boxes = clip_boxes(decode_boxes(anchors.boxes[a_idx], box_offsets[a_idx]), image_size)
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    a_idx, c_idx, s, boxes = a_idx[ok], c_idx[ok], s[ok], boxes[ok]
    if config.class_agnostic_nms:
        keep = nms(boxes, s, config.nms_iou)
    else:
        keep = batched_nms(boxes, s, c_idx, config.nms_iou)
    keep = keep[: config.max_detections]

    attr_probs = _sigmoid(attr_logits[a_idx[keep]])
    dets = []
    for j, i in enumerate(keep):
        probs = attr_probs[j]
        dets.append(Detection(
            box=Box.from_array(boxes[i]),
            class_id=int(c_idx[i]),
            score=float(s[i]),
            attr_probs=tuple(float(p) for p in probs),
            attr_flags=tuple(int(p >= config.attr_threshold) for p in probs),
            anchor_index=int(a_idx[i]),
        ))
    return dets


def attribute_labels(det: Detection, attribute_names: Sequence[str], top: int = 8) -> list[str]:
    """The ``top`` most confident attribute decisions, most confident first.

    Confidence of a decision is ``max(p, 1 - p)``; absent attributes read
    ``"No <name>"``.
    """
    p = np.asarray(det.attr_probs)
    conf = np.maximum(p, 1.0 - p)
    order = np.argsort(-conf, kind="stable")[:top]
    return [attribute_names[z] if det.attr_flags[z] else f"No {attribute_names[z]}"
            for z in order]


_PALETTE = ((255, 64, 64), (64, 200, 64), (80, 120, 255), (255, 200, 0), (255, 0, 255),
            (0, 220, 220), (255, 128, 0), (160, 80, 255))


def _place_block(box: Box, w: float, h: float, width: int, height: int,
                 placed: Sequence[tuple[float, float, float, float]]) -> tuple[float, float]:
    """Pick a label position beside the box that stays on the canvas and
    overlaps earlier labels least. Right of the box wins ties."""
    candidates = [(box.x2 + 2, box.y1), (box.x1 - w - 2, box.y1),
                  (box.x1, box.y2 + 2), (box.x1, box.y1 - h - 2)]
    best, best_cost = None, None
    for rank, (x, y) in enumerate(candidates):
        x = min(max(x, 0.0), max(width - w, 0.0))
        y = min(max(y, 0.0), max(height - h, 0.0))
        cost = sum(max(0.0, min(x + w, r[2]) - max(x, r[0])) *
                   max(0.0, min(y + h, r[3]) - max(y, r[1])) for r in placed)
        # also penalise covering the box itself
        cost += max(0.0, min(x + w, box.x2) - max(x, box.x1)) * \
            max(0.0, min(y + h, box.y2) - max(y, box.y1))
        if best_cost is None or cost < best_cost - 1e-9:
            best, best_cost = (x, y), cost
        if best_cost == 0.0 and rank == 0:
            break
    return best


def render(image: np.ndarray, detections: Sequence[Detection], class_names: Sequence[str],
           attribute_names: Sequence[str], attr_top: int = 8,
           font: ImageFont.ImageFont | None = None) -> np.ndarray:
    """Draw boxes, ``class score`` captions and attribute labels on a copy."""
    out = Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8))
    if not detections:
        return np.asarray(out).copy()
    font = font or ImageFont.load_default()
    draw = ImageDraw.Draw(out)
    width, height = out.size
    placed: list[tuple[float, float, float, float]] = []
    for det in detections:
        color = _PALETTE[det.class_id % len(_PALETTE)]
        b = det.box
        draw.rectangle([b.x1, b.y1, b.x2 - 1, b.y2 - 1], outline=color, width=2)
        lines = [f"{class_names[det.class_id]} {det.score:.2f}"]
        lines += attribute_labels(det, attribute_names, attr_top)
        sizes = [draw.textbbox((0, 0), t, font=font) for t in lines]
        block_w = max(x1 - x0 for x0, _, x1, _ in sizes) + 2
        block_h = sum(y1 - y0 + 2 for _, y0, _, y1 in sizes)
        x, y = _place_block(b, block_w, block_h, width, height, placed)
        placed.append((x, y, x + block_w, y + block_h))
        for text, (_, y0, _, y1) in zip(lines, sizes):
            tx0, ty0, tx1, ty1 = draw.textbbox((x + 1, y), text, font=font)
            draw.rectangle([tx0 - 1, ty0 - 1, tx1 + 1, ty1 + 1], fill=(0, 0, 0))
            draw.text((x + 1, y), text, fill=color, font=font)
            y += y1 - y0 + 2
    return np.asarray(out)


DETECTION_SCHEMA = {
    "type": "object",
    "required": ["image", "detections"],
    "additionalProperties": False,
    "properties": {
        "image": {"type": "string"},
        "detections": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["box", "class", "score", "attributes"],
                "additionalProperties": False,
                "properties": {
                    "box": {"type": "array", "items": {"type": "number"},
                            "minItems": 4, "maxItems": 4},
                    "class": {"type": "string"},
                    "score": {"type": "number", "minimum": 0, "maximum": 1},
                    "attributes": {"type": "object",
                                   "additionalProperties": {"type": "number", "minimum": 0,
                                                            "maximum": 1}},
                },
            },
        },
    },
}


def detections_to_json(image_name: str, detections: Sequence[Detection],
                       class_names: Sequence[str], attribute_names: Sequence[str]) -> dict:
    return {
        "image": image_name,
        "detections": [
            {
                "box": [float(v) for v in d.box],
                "class": class_names[d.class_id],
                "score": d.score,
                "attributes": dict(zip(attribute_names, d.attr_probs)),
            }
            for d in detections
        ],
    }
