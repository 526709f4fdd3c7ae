"""Classical candidate detector: connected hematoxylin blobs.

Stands in for a trained first-stage detector so the rest of the pipeline can
run end to end without neural networks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .ensemble import DetectionBox, DetectionSet
from .stain import StainModel, deconvolve

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class BlobParams:
    conc_threshold: float = 0.5
    min_area: int = 40
    max_area: int = 5000
    score_scale: float = 0.5

    def __post_init__(self):
        if self.conc_threshold <= 0:
            raise ValueError("conc_threshold must be positive")
        if not 0 < self.min_area <= self.max_area:
            raise ValueError("need 0 < min_area <= max_area")


def detect_candidates(img, model: StainModel, params: BlobParams = BlobParams(), image_id="") -> DetectionSet:
    """Bounding boxes of 4-connected components of ``H > conc_threshold``.

    Boxes use exclusive right/bottom edges, so a component spanning columns
    ``c0..c1`` gives ``x1 = c0, x2 = c1 + 1``. The score is
    ``min(1, mean H concentration * score_scale)``.
    """
    hema = deconvolve(img, model)[..., 0]
    labels, n = ndimage.label(hema > params.conc_threshold, structure=FOUR_CONNECTED)
    if n == 0:
        return DetectionSet(image_id, [], 1)
    index = np.arange(1, n + 1)
    areas = ndimage.sum_labels(np.ones_like(hema), labels, index)
    means = ndimage.mean(hema, labels, index)
    boxes = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        area = areas[lab - 1]
        if not params.min_area <= area <= params.max_area:
            continue
        ys, xs = sl
        score = float(min(1.0, means[lab - 1] * params.score_scale))
        boxes.append(DetectionBox(xs.start, ys.start, xs.stop, ys.stop, score))
    return DetectionSet(image_id, boxes, 1).sorted()
