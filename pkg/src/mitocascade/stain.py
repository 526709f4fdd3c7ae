"""Stain estimation, deconvolution and stochastic stain augmentation for H&E.

Images are plain numpy arrays: an RGB image is ``(height, width, 3)`` uint8,
an optical-density (OD) image is the float64 array of the same shape, and a
concentration map is ``(height, width, 2)`` float64 holding the hematoxylin
and eosin concentrations of every pixel.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateStains, InsufficientTissue

MIN_STAIN_ANGLE = 1e-3  # radians


def as_rgb(img) -> np.ndarray:
    """Validate and return ``img`` as a ``(h, w, 3)`` uint8 array."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected an (h, w, 3) RGB image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255):
            raise ValueError("RGB values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def rgb_to_od(img) -> np.ndarray:
    """Beer-Lambert transform ``-log10(max(I, 1) / 255)`` per channel."""
    rgb = as_rgb(img).astype(np.float64)
    return -np.log10(np.maximum(rgb, 1.0) / 255.0)


def od_to_rgb(od) -> np.ndarray:
    """Inverse of :func:`rgb_to_od`, rounding half up and clamping to 8 bits."""
    od = np.asarray(od, dtype=np.float64)
    intensity = np.floor(255.0 * np.power(10.0, -od) + 0.5)
    return np.clip(intensity, 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class MacenkoConfig:
    od_threshold: float = 0.15
    angle_percentile: float = 1.0
    conc_percentile: float = 99.0
    min_tissue_pixels: int = 100
    # channel whose OD component decides which direction is hematoxylin
    order_channel: int = 0


@dataclass(frozen=True)
class StainModel:
    """Two unit stain directions in OD space plus their robust maxima.

    ``stain_vectors`` is ``(2, 3)``: row 0 hematoxylin, row 1 eosin.
    """

    stain_vectors: np.ndarray
    max_concentrations: np.ndarray = field(default_factory=lambda: np.ones(2))

    def __post_init__(self):
        vecs = np.array(self.stain_vectors, dtype=np.float64).reshape(2, 3)
        maxc = np.array(self.max_concentrations, dtype=np.float64).reshape(2)
        vecs.setflags(write=False)
        maxc.setflags(write=False)
        object.__setattr__(self, "stain_vectors", vecs)
        object.__setattr__(self, "max_concentrations", maxc)

    @property
    def hematoxylin(self) -> np.ndarray:
        return self.stain_vectors[0]

    @property
    def eosin(self) -> np.ndarray:
        return self.stain_vectors[1]

    def angle(self) -> float:
        """Angle in radians between the two stain directions."""
        a, b = self.stain_vectors
        cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
        return float(np.arccos(np.clip(cos, -1.0, 1.0)))

    def check(self):
        """Raise :class:`DegenerateStains` unless the basis is usable."""
        norms = np.linalg.norm(self.stain_vectors, axis=1)
        if not np.all(np.isfinite(self.stain_vectors)) or np.any(norms == 0):
            raise DegenerateStains("stain vectors must be finite and non-zero")
        if self.angle() <= MIN_STAIN_ANGLE:
            raise DegenerateStains(
                f"stain vectors are {self.angle():.2e} rad apart (need > {MIN_STAIN_ANGLE})"
            )

    def to_text(self) -> str:
        names = ("h", "e")
        lines = []
        for name, vec in zip(names, self.stain_vectors):
            for ch, value in zip("rgb", vec):
                lines.append(f"{name}_{ch}={float(value)!r}")
        for name, value in zip(names, self.max_concentrations):
            lines.append(f"{name}_max={float(value)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "StainModel":
        values = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = float(value)
        try:
            vecs = [[values[f"{s}_{c}"] for c in "rgb"] for s in "he"]
            maxc = [values["h_max"], values["e_max"]]
        except KeyError as exc:
            raise ValueError(f"stain model file is missing key {exc}") from None
        return cls(np.array(vecs), np.array(maxc))

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "StainModel":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _unit(v):
    return v / np.linalg.norm(v)


# Ruifrok & Johnston H&E directions; used when an image cannot support an
# estimate of its own (e.g. a patch with a single stain).
REFERENCE_STAIN_MODEL = StainModel(
    np.array([_unit(np.array([0.65, 0.70, 0.29])), _unit(np.array([0.07, 0.99, 0.11]))]),
    np.array([1.0, 1.0]),
)


def tissue_mask(od: np.ndarray, od_threshold: float) -> np.ndarray:
    """Pixels whose summed OD exceeds ``od_threshold``."""
    return od.sum(axis=-1) > od_threshold


def estimate_stain_model(img, cfg: MacenkoConfig = MacenkoConfig()) -> StainModel:
    """Estimate H&E stain directions with the Macenko SVD/angle method.

    Tissue pixels are projected onto the plane of the two leading right
    singular vectors of their OD matrix; the ``angle_percentile`` and
    ``100 - angle_percentile`` percentile angles give the stain directions.

    Raises:
        InsufficientTissue: fewer than ``cfg.min_tissue_pixels`` tissue pixels.
        DegenerateStains: the extreme directions are nearly collinear.
    """
    od = rgb_to_od(img).reshape(-1, 3)
    tissue = od[tissue_mask(od, cfg.od_threshold)]
    if len(tissue) < cfg.min_tissue_pixels:
        raise InsufficientTissue(
            f"{len(tissue)} tissue pixels above OD {cfg.od_threshold}, "
            f"need {cfg.min_tissue_pixels}"
        )

    _, _, vt = np.linalg.svd(tissue, full_matrices=False)
    plane = vt[:2].T.copy()  # (3, 2)
    # orient both basis vectors into the positive OD octant
    for j in range(2):
        if plane[:, j].sum() < 0:
            plane[:, j] *= -1

    proj = tissue @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo = np.percentile(phi, cfg.angle_percentile)
    hi = np.percentile(phi, 100 - cfg.angle_percentile)
    if hi - lo < MIN_STAIN_ANGLE:
        raise DegenerateStains(f"tissue OD directions span only {hi - lo:.2e} rad")

    candidates = []
    for angle in (lo, hi):
        v = plane @ np.array([np.cos(angle), np.sin(angle)])
        if v.sum() < 0:
            v = -v
        v = np.clip(v, 0.0, None)
        norm = np.linalg.norm(v)
        if norm == 0:
            raise DegenerateStains("a stain direction has no positive OD component")
        candidates.append(v / norm)

    a, b = candidates
    vecs = np.array([a, b] if a[cfg.order_channel] >= b[cfg.order_channel] else [b, a])
    model = StainModel(vecs)
    model.check()

    conc = solve_concentrations(tissue, model.stain_vectors)
    maxc = np.percentile(conc, cfg.conc_percentile, axis=0)
    return StainModel(vecs, maxc)


def solve_concentrations(od: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Least-squares ``od ~ conc @ vecs`` per pixel with negatives clamped to 0."""
    pinv = np.linalg.pinv(vecs)  # (3, 2)
    return np.clip(od @ pinv, 0.0, None)


def deconvolve(img, model: StainModel) -> np.ndarray:
    """Per-pixel H&E concentrations, shape ``(h, w, 2)``, all non-negative."""
    model.check()
    od = rgb_to_od(img)
    return solve_concentrations(od, model.stain_vectors)


def compose(conc: np.ndarray, model: StainModel) -> np.ndarray:
    """OD image from concentrations: ``conc @ stain_vectors``."""
    return np.asarray(conc, dtype=np.float64) @ model.stain_vectors


def reconstruct(conc: np.ndarray, model: StainModel) -> np.ndarray:
    """Render a concentration map back to 8-bit RGB."""
    return od_to_rgb(compose(conc, model))


@dataclass(frozen=True)
class AugmentParams:
    sigma_alpha: float = 0.2
    sigma_beta: float = 0.2
    variants_per_image: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.sigma_alpha < 1:
            raise ValueError("sigma_alpha must lie in [0, 1)")
        if self.sigma_beta < 0:
            raise ValueError("sigma_beta must be non-negative")
        if self.variants_per_image < 1:
            raise ValueError("variants_per_image must be at least 1")


def draw_perturbation(params: AugmentParams, variant_index: int):
    """Per-stain ``(alpha, beta)`` for one variant, from a stream keyed by
    ``(seed, variant_index)``."""
    rng = np.random.Generator(np.random.PCG64([params.seed & (2**64 - 1), variant_index]))
    alpha = rng.uniform(1 - params.sigma_alpha, 1 + params.sigma_alpha, size=2)
    beta = rng.uniform(-params.sigma_beta, params.sigma_beta, size=2)
    return alpha, beta


def perturb_od(img, model: StainModel, alpha, beta, od_threshold: float = 0.15) -> np.ndarray:
    """Apply a fixed stain perturbation and return the (unquantized) OD image.

    Tissue concentrations become ``max(conc * alpha + beta, 0)``. The part of
    each pixel's OD that the two stains do not explain is carried over
    unchanged, so a unit perturbation reproduces the input exactly.
    Background pixels (summed OD below ``od_threshold``) are left untouched.
    """
    od = rgb_to_od(img)
    conc = deconvolve(img, model)
    new_conc = np.clip(conc * np.asarray(alpha) + np.asarray(beta), 0.0, None)
    delta = compose(new_conc - conc, model)
    out = np.clip(od + delta, 0.0, None)
    background = ~tissue_mask(od, od_threshold)
    out[background] = od[background]
    return out


def augment(
    img,
    model: StainModel,
    params: AugmentParams,
    variant_index: int,
    od_threshold: float = 0.15,
) -> np.ndarray:
    """One stain-shifted variant of ``img``; deterministic in
    ``(params.seed, variant_index)``."""
    rgb = as_rgb(img)
    alpha, beta = draw_perturbation(params, variant_index)
    out = od_to_rgb(perturb_od(rgb, model, alpha, beta, od_threshold))
    background = ~tissue_mask(rgb_to_od(rgb), od_threshold)
    out[background] = rgb[background]
    return out


def generate_variants(
    img,
    params: AugmentParams = AugmentParams(),
    cfg: MacenkoConfig = MacenkoConfig(),
) -> list[np.ndarray]:
    """``params.variants_per_image`` augmented copies of ``img``.

    The stain model is estimated once and shared by every variant.
    """
    model = estimate_stain_model(img, cfg)
    return [
        augment(img, model, params, i, od_threshold=cfg.od_threshold)
        for i in range(params.variants_per_image)
    ]
