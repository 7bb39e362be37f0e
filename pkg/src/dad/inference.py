"""Image -> detections, in original image coordinates."""
from __future__ import annotations

import numpy as np
import torch

from .anchors import AnchorConfig, generate_anchors
from .data import ResizeSpec, resize
from .geometry import Box
from .model import DaDNet, image_to_tensor
from .postprocess import DecodeConfig, Detection, decode


class Predictor:
    def __init__(self, model: DaDNet, anchors: AnchorConfig, decode_config: DecodeConfig,
                 resize_spec: ResizeSpec):
        self.model = model
        self.anchors = anchors
        self.decode_config = decode_config
        self.resize_spec = resize_spec

    def head_rows(self, image: np.ndarray):
        """Resize, run the network, and return flattened numpy head rows plus
        the resized size and scale."""
        img, _, scale = resize(image, [], self.resize_spec)
        x = image_to_tensor(img).to(next(self.model.parameters()).dtype)
        self.model.eval()
        with torch.no_grad():
            cls, box, attr = self.model(x).flatten()
        return cls[0].numpy(), box[0].numpy(), attr[0].numpy(), img.shape[:2], scale

    def __call__(self, image: np.ndarray) -> list[Detection]:
        cls, box, attr, size, scale = self.head_rows(image)
        dets = decode(cls, box, attr, generate_anchors(self.anchors, size), self.decode_config,
                      size)
        if scale == 1.0:
            return dets
        h, w = image.shape[:2]
        out = []
        for d in dets:
            b = d.box
            x1, y1 = min(b.x1 / scale, w), min(b.y1 / scale, h)
            x2, y2 = min(b.x2 / scale, w), min(b.y2 / scale, h)
            if x2 <= x1 or y2 <= y1:
                continue
            out.append(Detection(Box(x1, y1, x2, y2), d.class_id, d.score, d.attr_probs,
                                 d.attr_flags, d.anchor_index))
        return out
