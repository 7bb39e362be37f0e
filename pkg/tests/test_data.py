from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from dad.data import (SHAPE_ATTRIBUTES, DatasetManifest, FormatError, GroundTruthInstance,
                      ResizeSpec, ShapesSpec, check_instance_attributes, generate_shapes_dataset,
                      hflip, load_apascal, load_manifest, resize, save_manifest,
                      validation_split)
from dad.geometry import Box, pairwise_iou

FIXTURES = Path(__file__).parent / "fixtures" / "apascal"


@pytest.fixture(scope="module")
def shapes500():
    return generate_shapes_dataset(11, 500)


def test_generator_is_deterministic():
    m1, im1 = generate_shapes_dataset(3, 6)
    m2, im2 = generate_shapes_dataset(3, 6)
    assert m1 == m2
    for a, b in zip(im1, im2):
        assert a.dtype == np.uint8 and np.array_equal(a, b)
    m3, _ = generate_shapes_dataset(4, 6)
    assert m3 != m1


def test_generator_instances_are_valid(shapes500):
    manifest, images = shapes500
    manifest.validate()
    for s in manifest.samples:
        assert 1 <= len(s.instances) <= 4
        boxes = np.array([tuple(g.box) for g in s.instances])
        assert boxes.min() >= 0 and boxes.max() <= 96
        ious = pairwise_iou(boxes, boxes)
        np.fill_diagonal(ious, 0)
        assert (ious < 0.2).all()


def test_attribute_marginals_balanced(shapes500):
    manifest, _ = shapes500
    attrs = np.array([g.attributes for s in manifest.samples for g in s.instances])
    marg = attrs.mean(0)
    assert ((marg >= 0.3) & (marg <= 0.7)).all(), dict(zip(SHAPE_ATTRIBUTES, marg.round(3)))
    classes = np.bincount([g.class_id for s in manifest.samples for g in s.instances])
    assert classes.min() / classes.sum() > 0.25


def test_pixel_checker_agrees_with_labels(shapes500):
    manifest, images = shapes500
    bad = []
    for s, img in zip(manifest.samples, images):
        for g in s.instances:
            derived = check_instance_attributes(img, g)
            stored = dict(zip(manifest.attribute_names, g.attributes))
            if any(int(derived[k]) != stored[k] for k in derived):
                bad.append((s.image, g))
    assert not bad


def test_single_attribute_spec():
    spec = ShapesSpec(classes=("circle",), attributes=("filled",))
    manifest, images = generate_shapes_dataset(5, 20, spec=spec)
    assert manifest.num_attributes == 1
    seen = set()
    for s, img in zip(manifest.samples, images):
        for g in s.instances:
            assert len(g.attributes) == 1
            assert check_instance_attributes(img, g, spec)["filled"] == bool(g.attributes[0])
            seen.add(g.attributes[0])
    assert seen == {0, 1}


def test_generated_files_roundtrip(tmp_path):
    manifest, images = generate_shapes_dataset(2, 3, out_dir=tmp_path)
    loaded = load_manifest(tmp_path)
    assert loaded == manifest
    for s, img in zip(loaded.samples, images):
        png = np.asarray(Image.open(tmp_path / s.image))
        assert png.dtype == np.uint8 and np.array_equal(png, img)


def test_manifest_json_roundtrip(tmp_path, shapes500):
    manifest = shapes500[0].subset(range(20))
    save_manifest(manifest, tmp_path / "m.json")
    assert load_manifest(tmp_path / "m.json") == manifest
    assert DatasetManifest.from_json(manifest.to_json()) == manifest


def test_validation_split_is_seeded_quarter(shapes500):
    manifest = shapes500[0].subset(range(100))
    a = validation_split(manifest, 0.25, seed=0)
    b = validation_split(manifest, 0.25, seed=0)
    assert len(a.samples) == 25 and a == b
    assert validation_split(manifest, 0.25, seed=1) != a


def test_apascal_fixture():
    m = load_apascal(FIXTURES, split="test")
    assert m.num_attributes == 64
    assert len(m.samples) == 3 and m.num_instances == 5
    first = m.samples[0].instances[0]
    assert m.class_names[first.class_id] == "horse"
    assert tuple(first.box) == (52.0, 86.0, 471.0, 420.0)
    line = (FIXTURES / "apascal_test.txt").read_text().splitlines()[0].split()
    assert first.attributes == tuple(int(v) for v in line[6:])
    assert DatasetManifest.from_json(m.to_json()) == m


def test_apascal_two_line_file(tmp_path):
    lines = (FIXTURES / "apascal_test.txt").read_text().splitlines()[:2]
    (tmp_path / "apascal_train.txt").write_text("\n".join(lines) + "\n")
    m = load_apascal(tmp_path)
    assert m.num_instances == 2 and len(m.samples) == 1


def test_apascal_bad_attribute_count_names_line(tmp_path):
    lines = (FIXTURES / "apascal_test.txt").read_text().splitlines()[:3]
    lines[2] = lines[2].rsplit(" ", 1)[0]
    (tmp_path / "apascal_train.txt").write_text("\n".join(lines))
    with pytest.raises(FormatError, match=":3:"):
        load_apascal(tmp_path)


def test_apascal_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_apascal(tmp_path)


def _img(h, w):
    return np.zeros((h, w, 3), np.uint8)


def test_resize_identity():
    g = [GroundTruthInstance(Box(1, 2, 30, 40), 0, (1,))]
    img, gts, scale = resize(_img(800, 800), g, ResizeSpec())
    assert scale == 1.0 and img.shape == (800, 800, 3) and gts == g


def test_resize_long_side_cap():
    g = [GroundTruthInstance(Box(10, 20, 300, 990), 0, (0, 1))]
    img, gts, scale = resize(_img(1000, 400), g, ResizeSpec())
    assert scale == pytest.approx(1.333)
    assert img.shape[:2] == (1333, 533)
    assert gts[0].attributes == (0, 1)
    for orig, new in zip(g[0].box, gts[0].box):
        assert new / scale == pytest.approx(orig, abs=1e-9)


@pytest.mark.parametrize("h,w", [(50, 70), (96, 96), (300, 120), (33, 500)])
def test_resized_boxes_stay_in_bounds(h, w):
    rng = np.random.default_rng(h * w)
    gts = []
    for _ in range(5):
        x1, y1 = rng.uniform(0, w - 2), rng.uniform(0, h - 2)
        gts.append(GroundTruthInstance(Box(x1, y1, rng.uniform(x1 + 1, w), rng.uniform(y1 + 1, h)),
                                       0, (1,)))
    img, out, _ = resize(_img(h, w), gts, ResizeSpec(96, 160))
    nh, nw = img.shape[:2]
    assert max(nh, nw) <= 160
    for g in out:
        assert 0 <= g.box.x1 < g.box.x2 <= nw and 0 <= g.box.y1 < g.box.y2 <= nh


def test_hflip_twice_is_identity():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (20, 30, 3), dtype=np.uint8)
    g = [GroundTruthInstance(Box(2, 3, 10, 19), 1, (1, 0))]
    once_img, once = hflip(img, g)
    assert tuple(once[0].box) == (20, 3, 28, 19)
    back_img, back = hflip(once_img, once)
    assert np.array_equal(back_img, img) and back == g
