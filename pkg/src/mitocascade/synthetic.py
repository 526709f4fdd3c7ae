"""Synthetic H&E fixtures with known ground truth.

Everything here renders images from explicit stain matrices and
concentrations, so the stain, detection and cascade code can be checked
against values that are known by construction.
"""
from __future__ import annotations

import numpy as np

from .stain import REFERENCE_STAIN_MODEL, od_to_rgb
from .tiling import PointAnnotation


def render(conc: np.ndarray, stain_vectors: np.ndarray) -> np.ndarray:
    """8-bit image whose OD is ``conc @ stain_vectors`` before quantization."""
    return od_to_rgb(np.asarray(conc, dtype=np.float64) @ np.asarray(stain_vectors))


def random_stain_matrix(rng: np.random.Generator, min_angle_deg=15.0, min_order_gap=0.05):
    """Two random non-negative unit vectors at least ``min_angle_deg`` apart.

    Rows are ordered by descending red OD component, and the red components
    differ by at least ``min_order_gap`` so the ordering is unambiguous.
    """
    while True:
        v = rng.uniform(0.05, 1.0, size=(2, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        angle = np.degrees(np.arccos(np.clip(v[0] @ v[1], -1, 1)))
        if angle >= min_angle_deg and abs(v[0, 0] - v[1, 0]) >= min_order_gap:
            return v[np.argsort(-v[:, 0])]


def random_concentrations(rng: np.random.Generator, height, width, max_conc=0.6):
    """Tissue-like concentration field: pure-H, pure-E and mixed pixels.

    The default ceiling keeps every channel above ~16 intensity levels;
    darker pixels make 8-bit quantization noise in OD large enough that a
    two-stain projection no longer round-trips to within one level.
    """
    n = height * width
    kind = rng.choice(3, size=n, p=[0.3, 0.3, 0.4])
    conc = rng.uniform(0.2, max_conc, size=(n, 2))
    conc[kind == 0, 1] = 0.0
    conc[kind == 1, 0] = 0.0
    return conc.reshape(height, width, 2)


def planted_blob_image(
    height=384,
    width=512,
    n_dark=4,
    n_light=4,
    radius=9,
    dark_conc=1.6,
    light_conc=0.55,
    eosin_conc=0.25,
    seed=0,
    stain_vectors=None,
    image_id="planted",
    patch_size=None,
    edge_margin=64,
):
    """White-background tissue with planted hematoxylin disks.

    Dark disks are the mitoses (returned as annotations); light disks are
    decoys that a concentration-threshold detector also fires on. A faint
    eosin wash covers the tissue so stain estimation sees both stains.
    Disk centres stay ``edge_margin`` pixels from the border (half the
    default crop) and, with ``patch_size=(h, w)``, off patch boundaries.

    Returns ``(image, truths, decoy_centres)``.
    """
    vecs = REFERENCE_STAIN_MODEL.stain_vectors if stain_vectors is None else stain_vectors
    rng = np.random.default_rng(seed)
    conc = np.zeros((height, width, 2))
    tissue = np.zeros((height, width), dtype=bool)
    tissue[radius : height - radius, radius : width - radius] = True
    conc[tissue, 1] = eosin_conc * rng.uniform(0.8, 1.2, size=tissue.sum())

    yy, xx = np.mgrid[0:height, 0:width]
    centres = []
    while len(centres) < n_dark + n_light:
        cy = int(rng.integers(edge_margin, height - edge_margin))
        cx = int(rng.integers(edge_margin, width - edge_margin))
        if patch_size is not None:
            ph, pw = patch_size
            if min(cy % ph, ph - cy % ph) <= 2 * radius or min(cx % pw, pw - cx % pw) <= 2 * radius:
                continue
        if all((cx - x) ** 2 + (cy - y) ** 2 > (6 * radius) ** 2 for x, y in centres):
            centres.append((cx, cy))

    truths = []
    for i, (cx, cy) in enumerate(centres):
        disk = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
        conc[disk, 0] = dark_conc if i < n_dark else light_conc
        conc[disk, 1] = 0.0
        if i < n_dark:
            truths.append(PointAnnotation(image_id, cx, cy, "mitosis"))
    return render(conc, vecs), truths, centres[n_dark:]
