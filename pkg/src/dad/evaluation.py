"""Attribute ROC-AUC and detection recall/precision over a manifest."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import pairwise_iou


class UndefinedMetricError(ValueError):
    pass


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as 1/2.

    Uses average ranks, so tied scores get exactly half credit.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    # average 1-based rank over each run of equal scores
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], scores.size]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class MatchedPair:
    gt: object  # GroundTruthInstance
    pred_attr_probs: tuple
    match_iou: float


def greedy_match(det_boxes, det_scores, det_classes, gt_boxes, gt_classes,
                 iou_threshold: float = 0.5):
    """Visit detections by descending score; each takes the unmatched
    same-class gt of highest IoU >= ``iou_threshold`` (lowest gt index on ties).

    Returns a list of ``(det_index, gt_index, iou)``.
    """
    nd, ng = len(det_scores), len(gt_classes)
    if nd == 0 or ng == 0:
        return []
    ious = pairwise_iou(det_boxes, gt_boxes)
    same = np.asarray(det_classes)[:, None] == np.asarray(gt_classes)[None, :]
    ious = np.where(same, ious, -1.0)
    taken = np.zeros(ng, dtype=bool)
    out = []
    for d in np.argsort(-np.asarray(det_scores, dtype=np.float64), kind="stable"):
        row = np.where(taken, -1.0, ious[d])
        g = int(row.argmax())
        if row[g] >= iou_threshold:
            taken[g] = True
            out.append((int(d), g, float(row[g])))
    return out


def _match_image(dets, gts, iou_threshold):
    if not dets or not gts:
        return []
    return greedy_match(
        [tuple(d.box) for d in dets], [d.score for d in dets], [d.class_id for d in dets],
        [tuple(g.box) for g in gts], [g.class_id for g in gts], iou_threshold)


def match_for_attributes(detections_per_image: Sequence, gts_per_image: Sequence,
                         iou_threshold: float = 0.5):
    """Pair each matched gt with its detection's attribute probabilities.

    Returns ``(pairs, n_unmatched_gts)``.
    """
    pairs, unmatched = [], 0
    for dets, gts in zip(detections_per_image, gts_per_image):
        m = _match_image(dets, gts, iou_threshold)
        for d, g, v in m:
            pairs.append(MatchedPair(gts[g], tuple(dets[d].attr_probs), v))
        unmatched += len(gts) - len(m)
    return pairs, unmatched


@dataclass
class AucReport:
    micro_auc: float | None
    per_attribute_auc: list
    n_pairs: int


def attribute_auc(pairs: Sequence[MatchedPair], num_attributes: int) -> AucReport:
    if not pairs:
        return AucReport(None, [None] * num_attributes, 0)
    scores = np.asarray([p.pred_attr_probs for p in pairs], dtype=np.float64)
    labels = np.asarray([p.gt.attributes for p in pairs], dtype=np.int64)
    try:
        micro = roc_auc(scores, labels)
    except UndefinedMetricError:
        micro = None
    per = []
    for z in range(num_attributes):
        try:
            per.append(roc_auc(scores[:, z], labels[:, z]))
        except UndefinedMetricError:
            per.append(None)
    return AucReport(micro, per, len(pairs))


@dataclass(frozen=True)
class EvalConfig:
    match_iou: float = 0.5
    # detections scored for recall/precision; attribute matching uses all decoded ones
    report_score_threshold: float = 0.5

    def to_dict(self) -> dict:
        return {"match_iou": self.match_iou, "report_score_threshold": self.report_score_threshold}


@dataclass
class EvalReport:
    auc: AucReport
    match_coverage: float
    recall: float
    precision: float
    n_images: int
    attribute_names: list = field(default_factory=list)
    pairs: list = field(default_factory=list, repr=False)

    @property
    def micro_auc(self):
        return self.auc.micro_auc

    def to_json(self) -> dict:
        return {
            "micro_auc": self.auc.micro_auc,
            "per_attribute_auc": dict(zip(self.attribute_names, self.auc.per_attribute_auc)),
            "match_coverage": self.match_coverage,
            "detection": {"recall@0.5": self.recall, "precision@0.5": self.precision},
            "n_images": self.n_images,
        }


REPORT_SCHEMA = {
    "type": "object",
    "required": ["micro_auc", "per_attribute_auc", "match_coverage", "detection", "n_images"],
    "additionalProperties": False,
    "properties": {
        "micro_auc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "per_attribute_auc": {"type": "object",
                              "additionalProperties": {"type": ["number", "null"]}},
        "match_coverage": {"type": "number", "minimum": 0, "maximum": 1},
        "detection": {
            "type": "object",
            "required": ["recall@0.5", "precision@0.5"],
            "additionalProperties": False,
            "properties": {"recall@0.5": {"type": "number", "minimum": 0, "maximum": 1},
                           "precision@0.5": {"type": "number", "minimum": 0, "maximum": 1}},
        },
        "n_images": {"type": "integer", "minimum": 0},
    },
}


def evaluate(predict: Callable, manifest, config: EvalConfig = EvalConfig(),
             images: Sequence | None = None) -> EvalReport:
    """Score ``predict(image) -> list[Detection]`` on every sample of ``manifest``.

    ``images`` may supply preloaded arrays aligned with ``manifest.samples``.
    """
    if not manifest.samples:
        raise ValueError("manifest has no samples")
    all_dets, all_gts = [], []
    for i, sample in enumerate(manifest.samples):
        img = images[i] if images is not None else manifest.load_image(sample)
        all_dets.append(predict(img))
        all_gts.append(list(sample.instances))
    pairs, unmatched = match_for_attributes(all_dets, all_gts, config.match_iou)
    n_gt = sum(len(g) for g in all_gts)

    confident = [[d for d in dets if d.score >= config.report_score_threshold]
                 for dets in all_dets]
    hits = sum(len(_match_image(d, g, config.match_iou)) for d, g in zip(confident, all_gts))
    n_det = sum(len(d) for d in confident)
    return EvalReport(
        auc=attribute_auc(pairs, manifest.num_attributes),
        match_coverage=(n_gt - unmatched) / n_gt if n_gt else 0.0,
        recall=hits / n_gt if n_gt else 0.0,
        precision=hits / n_det if n_det else 1.0,
        n_images=len(manifest.samples),
        attribute_names=list(manifest.attribute_names),
        pairs=pairs,
    )
