import numpy as np
import pytest

from conftest import square_image
from mitocascade.refdetect import BlobParams, detect_candidates
from mitocascade.stain import REFERENCE_STAIN_MODEL
from mitocascade.synthetic import render


def boxes(ds):
    return [(b.x1, b.y1, b.x2, b.y2) for b in ds]


def test_blank_image():
    assert len(detect_candidates(np.full((50, 50, 3), 255, np.uint8), REFERENCE_STAIN_MODEL)) == 0


def test_single_square():
    ds = detect_candidates(square_image(x0=60, y0=40, size=20), REFERENCE_STAIN_MODEL)
    assert boxes(ds) == [(60, 40, 80, 60)]
    # mean concentration ~1.5, scaled by 0.5
    assert ds.boxes[0].score == pytest.approx(0.75, abs=0.01)


def test_small_square_filtered():
    c = np.zeros((100, 100, 2))
    c[10:30, 10:30, 0] = 1.5
    c[60:65, 60:65, 0] = 1.5  # area 25 < 40
    ds = detect_candidates(render(c, REFERENCE_STAIN_MODEL.stain_vectors), REFERENCE_STAIN_MODEL)
    assert boxes(ds) == [(10, 10, 30, 30)]


def test_diagonal_pixels_are_separate():
    c = np.zeros((40, 40, 2))
    c[5:15, 5:15, 0] = 1.5
    c[15:25, 15:25, 0] = 1.5  # touches the first only at a corner
    ds = detect_candidates(render(c, REFERENCE_STAIN_MODEL.stain_vectors), REFERENCE_STAIN_MODEL,
                           BlobParams(min_area=50))
    assert sorted(boxes(ds)) == [(5, 5, 15, 15), (15, 15, 25, 25)]


def test_max_area():
    ds = detect_candidates(square_image(size=80), REFERENCE_STAIN_MODEL, BlobParams(max_area=79 * 79))
    assert len(ds) == 0


@pytest.mark.parametrize("dx,dy", [(0, 0), (7, 3), (50, 90), (113, 17)])
def test_translation_equivariance(dx, dy):
    base = detect_candidates(square_image(x0=20, y0=30), REFERENCE_STAIN_MODEL)
    moved = detect_candidates(square_image(x0=20 + dx, y0=30 + dy), REFERENCE_STAIN_MODEL)
    assert boxes(moved) == [(x1 + dx, y1 + dy, x2 + dx, y2 + dy) for x1, y1, x2, y2 in boxes(base)]
    assert [b.score for b in moved] == pytest.approx([b.score for b in base])


def test_boxes_in_bounds_and_scores(planted):
    img, _, _ = planted
    ds = detect_candidates(img, REFERENCE_STAIN_MODEL)
    h, w = img.shape[:2]
    assert len(ds) == 8
    for b in ds:
        assert 0 <= b.x1 < b.x2 <= w and 0 <= b.y1 < b.y2 <= h
        assert 0 < b.score <= 1


def test_param_validation():
    with pytest.raises(ValueError):
        BlobParams(conc_threshold=0)
    with pytest.raises(ValueError):
        BlobParams(min_area=10, max_area=5)
