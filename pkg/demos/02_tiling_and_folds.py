"""
Tiling and cross-validation folds
=================================

Cut an image into fixed-size patches, map a point between coordinate
frames, stitch the patches back, and split image ids into folds.
"""

import numpy as np

from mitocascade.folds import split, train_val
from mitocascade.tiling import PointAnnotation, extract_patch, plan_grid, stitch, to_local

rng = np.random.default_rng(1)
img = rng.integers(0, 256, size=(700, 900, 3), dtype=np.uint8)

# patches are 256 x 384 here; edge patches are padded with white
grid = plan_grid(img.shape[1], img.shape[0], patch_height=256, patch_width=384)
print(f"{grid.rows} x {grid.cols} patches")
for ref in grid.patches[-3:]:
    print("  ", ref)

# a point in image coordinates belongs to exactly one patch
point = PointAnnotation("demo", 820.0, 610.0)
for ref in grid.patches:
    local = to_local(point, ref)
    if local is not None:
        print(f"point lands in patch {ref.patch_id} at local {local}")

patches = [extract_patch(img, ref, grid) for ref in grid.patches]
print("stitch is exact:", np.array_equal(stitch(patches, grid), img))

# the grid travels as a small text manifest
print(grid.to_manifest().splitlines()[0])

# four folds over 150 images
folds = split([f"img{i:03d}" for i in range(150)], k=4, seed=0)
print("fold sizes:", folds.sizes())
train, val = train_val(folds, 0)
print(f"fold 0: {len(train)} train / {len(val)} validation")
