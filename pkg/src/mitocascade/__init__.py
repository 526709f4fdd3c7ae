"""Scaffolding for two-step, stain-robust mitosis detection.

Stain estimation and augmentation, patch tiling, k-fold splits, weighted
boxes fusion, a two-stage detection cascade with pluggable adapters,
point-based evaluation and training-control schedules.
"""

__version__ = "0.1.0"

from .ensemble import DetectionBox, DetectionSet, WbfParams, iou, wbf_fuse
from .errors import (AdapterFailure, BadFoldIndex, CountMismatch, DegenerateStains, DimensionMismatch,
                     DuplicateId, ImageIdMismatch, ImageSmallerThanCrop, InsufficientTissue,
                     MitoCascadeError, ObserveAfterStop, TooFewImages)
from .stain import (AugmentParams, MacenkoConfig, StainModel, augment, deconvolve, estimate_stain_model,
                    generate_variants, od_to_rgb, rgb_to_od)
from .tiling import PatchGrid, PatchRef, PointAnnotation, extract_patch, plan_grid, to_global, to_local
