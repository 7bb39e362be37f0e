import jsonschema
import numpy as np
import pytest

from dad.anchors import AnchorConfig, generate_anchors
from dad.geometry import decode_boxes
from dad.postprocess import (DETECTION_SCHEMA, AlignmentError, DecodeConfig, Detection,
                             attribute_labels, decode, detections_to_json, render)
from dad.geometry import Box

from oracles import iou_float

CFG = AnchorConfig(levels=((8, 16.0), (16, 32.0)), ratios=(1.0,), scale_octaves=(1.0, 1.5))
SIZE = (24, 16)  # 3x2 + 2x1 cells, 2 anchors each -> 16 anchors


def _sig(x):
    return 1 / (1 + np.exp(-x))


def decode_bruteforce(cls, box, attr, anchors, cfg, size):
    h, w = size
    cands = []
    for i in range(len(anchors)):
        for c in range(cls.shape[1]):
            s = _sig(cls[i, c])
            if s <= cfg.score_threshold:
                continue
            b = decode_boxes(anchors.boxes[i:i + 1], box[i:i + 1])[0]
            b = np.clip(b, 0, [w, h, w, h])
            if b[2] <= b[0] or b[3] <= b[1]:
                continue
            cands.append((s, i, c, b))
    cands.sort(key=lambda t: -t[0])
    kept = []
    for s, i, c, b in cands:
        if all(k[2] != c or iou_float(b, k[3]) <= cfg.nms_iou for k in kept):
            kept.append((s, i, c, b))
    return kept[: cfg.max_detections]


def _rows(rng, n, k=2, z=3, spread=3.0):
    return rng.normal(-1, spread, (n, k)), rng.normal(0, 0.5, (n, 4)), rng.normal(0, 2, (n, z))


@pytest.mark.parametrize("seed", range(10))
def test_matches_bruteforce_oracle(seed):
    rng = np.random.default_rng(seed)
    size = (56, 64)
    anchors = generate_anchors(CFG, size)
    assert len(anchors) >= 50
    cls, box, attr = _rows(rng, len(anchors))
    cfg = DecodeConfig(score_threshold=0.3, pre_nms_topk=10_000, max_detections=15)
    got = decode(cls, box, attr, anchors, cfg, size)
    want = decode_bruteforce(cls, box, attr, anchors, cfg, size)
    assert [(d.anchor_index, d.class_id) for d in got] == [(i, c) for _, i, c, _ in want]
    for d, (s, i, c, b) in zip(got, want):
        assert d.score == pytest.approx(s, abs=1e-12)
        np.testing.assert_allclose(tuple(d.box), b, atol=1e-9)


def test_prior_logits_give_no_detections():
    anchors = generate_anchors(CFG, SIZE)
    n = len(anchors)
    cls = np.full((n, 2), -np.log(99))
    assert decode(cls, np.zeros((n, 4)), np.zeros((n, 3)), anchors, DecodeConfig(), SIZE) == []


def test_single_confident_anchor():
    anchors = generate_anchors(CFG, SIZE)
    n = len(anchors)
    cls = np.full((n, 2), -20.0)
    cls[5, 1] = np.log(99)
    attr = np.random.default_rng(0).normal(size=(n, 3))
    dets = decode(cls, np.zeros((n, 4)), attr, anchors, DecodeConfig(), SIZE)
    assert len(dets) == 1
    d = dets[0]
    assert d.anchor_index == 5 and d.class_id == 1
    assert d.score == pytest.approx(0.99)
    np.testing.assert_allclose(d.attr_probs, _sig(attr[5]), rtol=0, atol=1e-15)
    expected = np.clip(anchors.boxes[5], 0, [16, 24, 16, 24])
    np.testing.assert_allclose(tuple(d.box), expected)


@pytest.mark.parametrize("seed", range(5))
def test_detection_invariants_and_alignment(seed):
    rng = np.random.default_rng(seed)
    size = (56, 64)
    anchors = generate_anchors(CFG, size)
    cls, box, attr = _rows(rng, len(anchors))
    cfg = DecodeConfig(score_threshold=0.2, max_detections=10, attr_threshold=0.6)
    dets = decode(cls, box, attr, anchors, cfg, size)
    assert len(dets) <= 10
    for d in dets:
        assert d.score >= 0.2
        assert d.attr_probs == tuple(float(p) for p in _sig(attr[d.anchor_index]))
        assert d.attr_flags == tuple(int(p >= 0.6) for p in d.attr_probs)
        assert 0 <= d.box.x1 < d.box.x2 <= 64 and 0 <= d.box.y1 < d.box.y2 <= 56
    for i, a in enumerate(dets):
        for b in dets[i + 1:]:
            if a.class_id == b.class_id:
                assert iou_float(tuple(a.box), tuple(b.box)) <= cfg.nms_iou


def test_raising_threshold_never_adds_detections():
    rng = np.random.default_rng(9)
    size = (56, 64)
    anchors = generate_anchors(CFG, size)
    cls, box, attr = _rows(rng, len(anchors))
    prev = None
    for thr in (0.05, 0.2, 0.4, 0.6, 0.8, 0.95):
        keys = {(d.anchor_index, d.class_id)
                for d in decode(cls, box, attr, anchors, DecodeConfig(score_threshold=thr), size)}
        if prev is not None:
            assert keys <= prev
        prev = keys


def test_misaligned_rows_rejected():
    anchors = generate_anchors(CFG, SIZE)
    n = len(anchors)
    with pytest.raises(AlignmentError):
        decode(np.zeros((n - 1, 2)), np.zeros((n, 4)), np.zeros((n, 3)), anchors,
               DecodeConfig(), SIZE)


def test_decode_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(score_threshold=1.5)
    with pytest.raises(ValueError):
        DecodeConfig(max_detections=0)


def _det(probs, cls=0):
    return Detection(Box(2, 2, 20, 20), cls, 0.9, tuple(probs),
                     tuple(int(p >= 0.5) for p in probs), 0)


def test_attribute_labels_no_prefix():
    assert attribute_labels(_det((0.9, 0.1)), ["Metal", "Wing"]) == ["Metal", "No Wing"]


def test_attribute_labels_top_by_confidence():
    names = [f"a{i}" for i in range(10)]
    probs = [0.5, 0.99, 0.02, 0.6, 0.7, 0.45, 0.8, 0.3, 0.9, 0.55]
    labels = attribute_labels(_det(probs), names, top=3)
    assert labels == ["a1", "No a2", "a8"]


def test_render_empty_returns_copy():
    img = np.full((20, 20, 3), 7, np.uint8)
    out = render(img, [], ["x"], ["a"])
    assert np.array_equal(out, img) and out is not img


def test_render_deterministic_and_draws():
    img = np.zeros((64, 96, 3), np.uint8)
    dets = [_det((0.9, 0.1))]
    a = render(img, dets, ["thing"], ["Metal", "Wing"])
    b = render(img, dets, ["thing"], ["Metal", "Wing"])
    assert np.array_equal(a, b)
    assert a.any() and not img.any()


def test_json_contract():
    doc = detections_to_json("x.png", [_det((0.9, 0.1), cls=1)], ["a", "b"], ["Metal", "Wing"])
    jsonschema.validate(doc, DETECTION_SCHEMA)
    assert doc["detections"][0]["class"] == "b"
    assert doc["detections"][0]["attributes"] == {"Metal": 0.9, "Wing": 0.1}
