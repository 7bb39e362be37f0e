"""Datasets: manifest I/O, the aPascal annotation loader, a synthetic
attributed-shapes generator, and isotropic resizing."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage
from scipy.spatial import ConvexHull

from .geometry import Box, iou

APASCAL_NUM_ATTRIBUTES = 64
VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
)


class FormatError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GroundTruthInstance:
    box: Box
    class_id: int
    attributes: tuple

    def to_json(self) -> dict:
        return {"box": list(self.box), "class_id": self.class_id,
                "attributes": list(self.attributes)}

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruthInstance":
        return cls(Box(*d["box"]), int(d["class_id"]), tuple(int(a) for a in d["attributes"]))


@dataclass(frozen=True)
class Sample:
    image: str
    instances: tuple
    image_size: tuple | None = None  # (H, W)
    seed: int | None = None

    def to_json(self) -> dict:
        d = {"image": self.image, "instances": [g.to_json() for g in self.instances]}
        if self.image_size is not None:
            d["image_size"] = list(self.image_size)
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Sample":
        size = d.get("image_size")
        return cls(d["image"], tuple(GroundTruthInstance.from_json(g) for g in d["instances"]),
                   tuple(size) if size is not None else None, d.get("seed"))


@dataclass
class DatasetManifest:
    class_names: list
    attribute_names: list
    samples: list = field(default_factory=list)
    root: Path | None = None  # directory that relative image paths resolve against

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_attributes(self) -> int:
        return len(self.attribute_names)

    @property
    def num_instances(self) -> int:
        return sum(len(s.instances) for s in self.samples)

    def validate(self):
        for i, s in enumerate(self.samples):
            for g in s.instances:
                if not 0 <= g.class_id < self.num_classes:
                    raise FormatError(f"sample {i}: class_id {g.class_id} out of range")
                if len(g.attributes) != self.num_attributes:
                    raise FormatError(f"sample {i}: {len(g.attributes)} attributes, "
                                      f"expected {self.num_attributes}")

    def image_path(self, sample: Sample) -> Path:
        p = Path(sample.image)
        return p if p.is_absolute() or self.root is None else self.root / p

    def load_image(self, sample: Sample) -> np.ndarray:
        with Image.open(self.image_path(sample)) as im:
            return np.asarray(im.convert("RGB"))

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest(self.class_names, self.attribute_names,
                               [self.samples[i] for i in indices], self.root)

    def to_json(self) -> dict:
        return {"class_names": list(self.class_names),
                "attribute_names": list(self.attribute_names),
                "samples": [s.to_json() for s in self.samples]}

    @classmethod
    def from_json(cls, d: dict, root: Path | None = None) -> "DatasetManifest":
        m = cls(list(d["class_names"]), list(d["attribute_names"]),
                [Sample.from_json(s) for s in d["samples"]], root)
        m.validate()
        return m

    def __eq__(self, other):
        return isinstance(other, DatasetManifest) and self.to_json() == other.to_json()


def save_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    path.write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    """Load ``manifest.json`` (or a directory containing one)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return DatasetManifest.from_json(json.loads(path.read_text()), root=path.parent)


def validation_split(manifest: DatasetManifest, fraction: float = 0.25, seed: int = 0):
    """Seeded random ``fraction`` of ``manifest`` (the validation subset)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(manifest.samples))
    n = int(round(fraction * len(order)))
    return manifest.subset(sorted(order[:n].tolist()))


# --------------------------------------------------------------------------- aPascal

def load_apascal(annotation_dir, image_dir=None, split: str = "train") -> DatasetManifest:
    """Read ``apascal_<split>.txt`` from ``annotation_dir``.

    Each non-empty line describes one object instance::

        <image file> <class name> <x1> <y1> <x2> <y2> <a_1> ... <a_64>

    Coordinates are the 1-based inclusive VOC pixel indices and are converted to
    continuous corners ``(x1 - 1, y1 - 1, x2, y2)``. Attribute flags are 0/1.
    Attribute names are taken from ``attribute_names.txt`` (one per line) when
    that file exists. If ``image_dir`` is given, each image's size is read and
    boxes are clipped to it.
    """
    annotation_dir = Path(annotation_dir)
    ann = annotation_dir / f"apascal_{split}.txt"
    if not ann.exists():
        raise FileNotFoundError(ann)
    names_file = annotation_dir / "attribute_names.txt"
    if names_file.exists():
        attr_names = [ln.strip() for ln in names_file.read_text().splitlines() if ln.strip()]
        if len(attr_names) != APASCAL_NUM_ATTRIBUTES:
            raise FormatError(f"{names_file}: {len(attr_names)} names, expected 64")
    else:
        attr_names = [f"attr_{i:02d}" for i in range(APASCAL_NUM_ATTRIBUTES)]
    class_index = {c: i for i, c in enumerate(VOC_CLASSES)}

    per_image: dict[str, list] = {}
    for lineno, line in enumerate(ann.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6 + APASCAL_NUM_ATTRIBUTES:
            raise FormatError(f"{ann}:{lineno}: expected 6 fields + 64 attribute flags, "
                              f"got {len(parts)} fields")
        img, cls = parts[0], parts[1]
        if cls not in class_index:
            raise FormatError(f"{ann}:{lineno}: unknown class {cls!r}")
        try:
            x1, y1, x2, y2 = (float(v) for v in parts[2:6])
            flags = tuple(int(v) for v in parts[6:])
        except ValueError as e:
            raise FormatError(f"{ann}:{lineno}: {e}") from None
        if any(f not in (0, 1) for f in flags):
            raise FormatError(f"{ann}:{lineno}: attribute flags must be 0/1")
        try:
            box = Box(x1 - 1.0, y1 - 1.0, x2, y2)
        except ValueError as e:
            raise FormatError(f"{ann}:{lineno}: {e}") from None
        per_image.setdefault(img, []).append(GroundTruthInstance(box, class_index[cls], flags))

    samples = []
    for img, insts in per_image.items():
        size = None
        if image_dir is not None:
            with Image.open(Path(image_dir) / img) as im:
                size = (im.height, im.width)
            insts = [_clip_instance(g, size) for g in insts]
        samples.append(Sample(img, tuple(insts), size))
    root = Path(image_dir) if image_dir is not None else None
    return DatasetManifest(list(VOC_CLASSES), attr_names, samples, root)


def _clip_instance(g: GroundTruthInstance, size) -> GroundTruthInstance:
    h, w = size
    b = g.box
    box = Box(max(b.x1, 0.0), max(b.y1, 0.0), min(b.x2, float(w)), min(b.y2, float(h)))
    return GroundTruthInstance(box, g.class_id, g.attributes)


# --------------------------------------------------------------------------- shapes

SHAPE_CLASSES = ("circle", "square", "triangle")
SHAPE_ATTRIBUTES = ("filled", "outlined", "striped", "large", "red-family", "green-family",
                    "blue-family", "rotated")
BACKGROUND = 96
_SQUARE = np.ones((3, 3), dtype=bool)
# shape area as a fraction of size**2
AREA_FACTOR = {"circle": math.pi / 4, "square": 1.0, "triangle": 0.5}


@dataclass(frozen=True)
class ShapesSpec:
    """Rendering rules for the synthetic set.

    Every shape has a nominal size drawn from ``small_sizes`` or ``large_sizes``
    (the gap between them keeps "large" unambiguous), a body colour whose
    channels are each either low (0-40) or high (200-255), and a fill mode:
    solid, striped (3 px bands of colour and background) or hollow. The
    outline is a 2 px ring in the complementary colour ``255 - c``; hollow
    shapes are always outlined. Squares and triangles may be rotated by
    20-70 degrees; circles never are.
    """
    classes: tuple = SHAPE_CLASSES
    attributes: tuple = SHAPE_ATTRIBUTES
    small_sizes: tuple = (14, 22)
    large_sizes: tuple = (30, 38)
    large_prob: float = 0.55
    fill_probs: tuple = (0.4, 0.4, 0.2)  # solid, striped, hollow
    outline_prob: float = 0.4
    rotate_prob: float = 0.6
    max_objects: int = 4
    max_iou: float = 0.2
    placement_tries: int = 100
    resample_tries: int = 20

    def __post_init__(self):
        unknown = set(self.classes) - set(SHAPE_CLASSES)
        if unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}")
        unknown = set(self.attributes) - set(SHAPE_ATTRIBUTES)
        if unknown:
            raise ValueError(f"unknown shape attributes {sorted(unknown)}")

    @property
    def large_threshold(self) -> float:
        return 0.5 * (self.small_sizes[1] + self.large_sizes[0])


@dataclass
class _Shape:
    cls: str
    size: int
    angle: float
    color: tuple
    fill: str  # "solid" | "striped" | "hollow"
    outlined: bool

    def flags(self, spec: ShapesSpec) -> dict:
        return {
            "filled": self.fill == "solid",
            "outlined": self.outlined,
            "striped": self.fill == "striped",
            "large": self.size > spec.large_threshold,
            "red-family": self.color[0] > 127,
            "green-family": self.color[1] > 127,
            "blue-family": self.color[2] > 127,
            "rotated": self.angle != 0.0,
        }


def _sample_shape(rng: np.random.Generator, spec: ShapesSpec) -> _Shape:
    cls = spec.classes[rng.integers(len(spec.classes))]
    lo, hi = spec.large_sizes if rng.random() < spec.large_prob else spec.small_sizes
    size = int(rng.integers(lo, hi + 1))
    angle = 0.0
    if cls != "circle" and rng.random() < spec.rotate_prob:
        angle = float(rng.uniform(20.0, 70.0))
    color = tuple(int(rng.integers(200, 256)) if rng.random() < 0.5 else int(rng.integers(0, 41))
                  for _ in range(3))
    fill = ("solid", "striped", "hollow")[rng.choice(3, p=spec.fill_probs)]
    outlined = fill == "hollow" or rng.random() < spec.outline_prob
    return _Shape(cls, size, angle, color, fill, outlined)


def _polygon(shape: _Shape, cx: float, cy: float) -> list:
    s = shape.size / 2.0
    if shape.cls == "circle":
        t = np.linspace(0.0, 2 * np.pi, 64, endpoint=False)
        pts = np.stack([s * np.cos(t), s * np.sin(t)], axis=1)
    elif shape.cls == "square":
        pts = np.array([[-s, -s], [s, -s], [s, s], [-s, s]])
    else:
        pts = np.array([[0.0, -s], [s, s], [-s, s]])
    th = math.radians(shape.angle)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    pts = pts @ rot.T + [cx, cy]
    return [tuple(p) for p in pts]


def _shape_mask(shape: _Shape, cx: float, cy: float, image_size: int) -> np.ndarray:
    im = Image.new("L", (image_size, image_size), 0)
    ImageDraw.Draw(im).polygon(_polygon(shape, cx, cy), fill=1)
    return np.asarray(im, dtype=bool)


def _mask_box(mask: np.ndarray) -> Box:
    ys, xs = np.nonzero(mask)
    return Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _paint(img: np.ndarray, shape: _Shape, mask: np.ndarray, cx: float, cy: float):
    color = np.asarray(shape.color, dtype=np.uint8)
    ring = mask & ~ndimage.binary_erosion(mask, _SQUARE, iterations=2)
    if shape.fill == "solid":
        img[mask] = color
    elif shape.fill == "striped":
        ys, xs = np.nonzero(mask)
        th = math.radians(shape.angle)
        u = -(xs + 0.5 - cx) * math.sin(th) + (ys + 0.5 - cy) * math.cos(th)
        on = (np.floor(u / 3.0).astype(int) % 2) == 0
        img[ys[on], xs[on]] = color
    if shape.outlined:
        img[ring] = 255 - color


def render_shapes_image(seed: int, index: int, image_size: int, spec: ShapesSpec):
    """Render sample ``index`` of the dataset with ``seed``.

    Returns ``(image, instances)``; the result depends only on the arguments.
    """
    rng = np.random.default_rng([seed, index])
    n = int(rng.integers(1, spec.max_objects + 1))
    placed = []  # (shape, mask, box, cx, cy)
    for _ in range(n):
        for _attempt in range(spec.resample_tries):
            shape = _sample_shape(rng, spec)
            spot = _place(rng, shape, placed, image_size, spec)
            if spot is not None:
                placed.append((shape,) + spot)
                break
        else:
            raise GenerationError(
                f"seed {seed} index {index}: could not place {n} shapes in a "
                f"{image_size}px image after {spec.resample_tries} resamples")

    img = np.full((image_size, image_size, 3), BACKGROUND, dtype=np.uint8)
    instances = []
    for shape, mask, box, cx, cy in placed:
        _paint(img, shape, mask, cx, cy)
        flags = shape.flags(spec)
        instances.append(GroundTruthInstance(
            box, spec.classes.index(shape.cls), tuple(int(flags[a]) for a in spec.attributes)))
    return img, tuple(instances)


def _place(rng, shape, placed, image_size, spec):

    for _ in range(spec.placement_tries):
        cx, cy = rng.uniform(shape.size * 0.75, image_size - shape.size * 0.75, size=2)
        mask = _shape_mask(shape, cx, cy, image_size)
        if not mask.any():
            continue
        ys, xs = np.nonzero(mask)
        if xs.min() < 1 or ys.min() < 1 or xs.max() > image_size - 2 or ys.max() > image_size - 2:
            continue
        box = _mask_box(mask)
        # boxes stay apart by >= 2 px so crops never see a neighbour
        grown = Box(box.x1 - 2, box.y1 - 2, box.x2 + 2, box.y2 + 2)
        if any(iou(grown, other[2]) > 0.0 for other in placed):
            continue
        if any(iou(box, other[2]) >= spec.max_iou for other in placed):
            continue
        return mask, box, cx, cy
    return None


def generate_shapes_dataset(seed: int, n_images: int, image_size: int = 96,
                            spec: ShapesSpec = ShapesSpec(), out_dir=None):
    """Build ``n_images`` synthetic images.

    Returns ``(manifest, images)``. With ``out_dir`` the images are written as
    8-bit RGB PNGs under ``out_dir/images`` with ``out_dir/manifest.json``.
    """
    samples, images = [], []
    for i in range(n_images):
        img, insts = render_shapes_image(seed, i, image_size, spec)
        images.append(img)
        samples.append(Sample(f"images/{i:06d}.png", insts, (image_size, image_size), seed))
    manifest = DatasetManifest(list(spec.classes), list(spec.attributes), samples)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        for s, img in zip(samples, images):
            Image.fromarray(img).save(out_dir / s.image, format="PNG", optimize=False)
        save_manifest(manifest, out_dir / "manifest.json")
        manifest.root = out_dir
    return manifest, images


def check_instance_attributes(image: np.ndarray, inst: GroundTruthInstance,
                              spec: ShapesSpec = ShapesSpec()) -> dict:
    """Re-derive fill, outline, size and colour flags from rendered pixels.

    Only the crop under ``inst.box`` and the class name are used.
    """
    b = inst.box
    crop = image[int(b.y1):int(b.y2), int(b.x1):int(b.x2)].astype(np.int32)
    fg = (crop != BACKGROUND).any(axis=2)
    ys, xs = np.nonzero(fg)
    corners = np.concatenate([np.stack([xs + dx, ys + dy], 1) for dx in (0, 1) for dy in (0, 1)])
    hull = ConvexHull(corners)
    cls = spec.classes[inst.class_id]
    size = math.sqrt(hull.volume / AREA_FACTOR[cls])

    hull_img = Image.new("L", (crop.shape[1], crop.shape[0]), 0)
    ImageDraw.Draw(hull_img).polygon([tuple(corners[v]) for v in hull.vertices], fill=1)
    hull_mask = np.asarray(hull_img, dtype=bool) | fg
    hull_depth = ndimage.distance_transform_edt(np.pad(hull_mask, 1))[1:-1, 1:-1]
    core = hull_depth > 1.5
    bg_frac = 1.0 - fg[core].mean()

    # channel high/low code per pixel; an outline carries the complement code
    codes = (crop > 127) @ np.array([4, 2, 1])
    counts = np.bincount(codes[fg], minlength=8)
    present = np.flatnonzero(counts >= max(3, 0.05 * fg.sum()))
    if len(present) == 2:
        outlined = True
        edge = fg & ~core
        body = 7 - int(np.bincount(codes[edge], minlength=8).argmax())
        inside = hull_depth > 3.0
        if inside.any():
            bg_frac = 1.0 - fg[inside].mean()
        fill = "solid" if bg_frac < 0.15 else "striped"
    else:
        code = int(counts.argmax())
        holes = ndimage.binary_fill_holes(fg) & ~fg
        if holes.any():
            fill, outlined, body = "hollow", True, 7 - code
        else:
            fill, outlined, body = ("solid" if bg_frac < 0.15 else "striped"), False, code
    color = [(body >> 2) & 1, (body >> 1) & 1, body & 1]
    flags = {
        "filled": fill == "solid",
        "outlined": outlined,
        "striped": fill == "striped",
        "large": size > spec.large_threshold,
        "red-family": color[0],
        "green-family": color[1],
        "blue-family": color[2],
    }
    return {k: int(v) for k, v in flags.items() if k in spec.attributes}


# --------------------------------------------------------------------------- resize

@dataclass(frozen=True)
class ResizeSpec:
    min_side: int = 800
    max_side: int = 1333

    def scale_for(self, image_size) -> float:
        h, w = image_size
        return min(self.min_side / min(h, w), self.max_side / max(h, w))

    def to_dict(self) -> dict:
        return {"min_side": self.min_side, "max_side": self.max_side}


def resize(image: np.ndarray, gts: Sequence[GroundTruthInstance], spec: ResizeSpec):
    """Isotropic resize so the short side hits ``min_side`` unless the long side
    would exceed ``max_side``. Returns ``(image, gts, scale)``."""
    h, w = image.shape[:2]
    scale = spec.scale_for((h, w))
    if scale == 1.0:
        return image.copy(), list(gts), 1.0
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    out = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
    new = []
    for g in gts:
        b = g.box
        box = Box(min(b.x1 * scale, nw), min(b.y1 * scale, nh),
                  min(b.x2 * scale, nw), min(b.y2 * scale, nh))
        new.append(GroundTruthInstance(box, g.class_id, g.attributes))
    return out, new, scale


def hflip(image: np.ndarray, gts: Sequence[GroundTruthInstance]):
    w = image.shape[1]
    out = image[:, ::-1].copy()
    return out, [GroundTruthInstance(Box(w - g.box.x2, g.box.y1, w - g.box.x1, g.box.y2),
                                     g.class_id, g.attributes) for g in gts]
