"""Fixed-size patch grids with white padding and coordinate mapping.

Patch sizes are given as ``(patch_height, patch_width)``; the default
1536 x 2048 means 1536 rows by 2048 columns.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ensemble import DetectionBox
from .errors import DimensionMismatch
from .stain import as_rgb

PATCH_HEIGHT = 1536
PATCH_WIDTH = 2048
PAD_VALUE = 255
LABELS = ("mitosis", "hard_negative")


@dataclass(frozen=True)
class PatchRef:
    patch_id: int
    origin_x: int
    origin_y: int
    valid_width: int
    valid_height: int

    def contains(self, x, y) -> bool:
        return (
            self.origin_x <= x < self.origin_x + self.valid_width
            and self.origin_y <= y < self.origin_y + self.valid_height
        )


@dataclass(frozen=True)
class PatchGrid:
    image_width: int
    image_height: int
    patch_height: int
    patch_width: int
    patches: tuple[PatchRef, ...]

    @property
    def rows(self):
        return math.ceil(self.image_height / self.patch_height)

    @property
    def cols(self):
        return math.ceil(self.image_width / self.patch_width)

    def to_manifest(self) -> str:
        lines = [
            f"# image {self.image_width}x{self.image_height} patch {self.patch_height}x{self.patch_width}",
            "patch_id,origin_x,origin_y,valid_width,valid_height",
        ]
        lines += [
            f"{p.patch_id},{p.origin_x},{p.origin_y},{p.valid_width},{p.valid_height}"
            for p in self.patches
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "PatchGrid":
        lines = text.splitlines()
        head = lines[0].lstrip("# ").split()
        iw, ih = (int(v) for v in head[1].split("x"))
        ph, pw = (int(v) for v in head[3].split("x"))
        patches = tuple(
            PatchRef(*(int(v) for v in row.split(",")))
            for row in lines[2:]
            if row.strip()
        )
        return cls(iw, ih, ph, pw, patches)


@dataclass(frozen=True)
class PointAnnotation:
    image_id: str
    x: float
    y: float
    label: str = "mitosis"

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown annotation label {self.label!r}")


def plan_grid(image_width, image_height, patch_height=PATCH_HEIGHT, patch_width=PATCH_WIDTH) -> PatchGrid:
    """Row-major ceil-division grid; edge patches carry a reduced valid extent."""
    if min(image_width, image_height, patch_height, patch_width) < 1:
        raise ValueError("all dimensions must be >= 1")
    patches = []
    for oy in range(0, image_height, patch_height):
        for ox in range(0, image_width, patch_width):
            patches.append(
                PatchRef(
                    len(patches), ox, oy,
                    min(patch_width, image_width - ox),
                    min(patch_height, image_height - oy),
                )
            )
    return PatchGrid(image_width, image_height, patch_height, patch_width, tuple(patches))


def extract_patch(img, ref: PatchRef, grid: PatchGrid) -> np.ndarray:
    """Crop one patch, padding beyond the valid extent with white."""
    img = as_rgb(img)
    if img.shape[:2] != (grid.image_height, grid.image_width):
        raise DimensionMismatch(
            f"image is {img.shape[1]}x{img.shape[0]}, grid expects "
            f"{grid.image_width}x{grid.image_height}"
        )
    out = np.full((grid.patch_height, grid.patch_width, 3), PAD_VALUE, dtype=np.uint8)
    out[: ref.valid_height, : ref.valid_width] = img[
        ref.origin_y : ref.origin_y + ref.valid_height,
        ref.origin_x : ref.origin_x + ref.valid_width,
    ]
    return out


def stitch(patches, grid: PatchGrid) -> np.ndarray:
    """Reassemble an image from its patches (in ``grid.patches`` order)."""
    out = np.empty((grid.image_height, grid.image_width, 3), dtype=np.uint8)
    for ref, patch in zip(grid.patches, patches, strict=True):
        out[
            ref.origin_y : ref.origin_y + ref.valid_height,
            ref.origin_x : ref.origin_x + ref.valid_width,
        ] = patch[: ref.valid_height, : ref.valid_width]
    return out


def to_local(p: PointAnnotation, ref: PatchRef):
    """Patch-local ``(x, y)`` of ``p``, or ``None`` outside the valid region."""
    if not ref.contains(p.x, p.y):
        return None
    return p.x - ref.origin_x, p.y - ref.origin_y


def to_global(box: DetectionBox, ref: PatchRef) -> DetectionBox:
    return box.shifted(ref.origin_x, ref.origin_y)


def point_to_global(local_xy, ref: PatchRef, image_id, label="mitosis") -> PointAnnotation:
    x, y = local_xy
    return PointAnnotation(image_id, x + ref.origin_x, y + ref.origin_y, label)


def read_annotations(path) -> list[PointAnnotation]:
    """Read ``image_id,x,y,label`` CSV rows."""
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["image_id", "x", "y", "label"]:
            raise ValueError(f"{path}: expected header image_id,x,y,label, got {reader.fieldnames}")
        return [
            PointAnnotation(row["image_id"], float(row["x"]), float(row["y"]), row["label"])
            for row in reader
        ]


def write_annotations(path, points):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "x", "y", "label"])
        for p in points:
            writer.writerow([p.image_id, _num(p.x), _num(p.y), p.label])


def _num(v):
    return int(v) if float(v).is_integer() else v
