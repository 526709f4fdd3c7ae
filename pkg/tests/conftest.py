import sys
from pathlib import Path

import numpy as np
import pytest

from mitocascade.stain import REFERENCE_STAIN_MODEL
from mitocascade.synthetic import planted_blob_image, render

FIXTURES = Path(__file__).parent / "fixtures"


def script_command(name, *extra):
    """``external:`` adapter spec running a fixture script with this interpreter."""
    import shlex

    return "external:" + shlex.join([sys.executable, str(FIXTURES / name), *extra])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def planted():
    return planted_blob_image(seed=3)


def square_image(height=200, width=300, x0=60, y0=40, size=20, conc=1.5):
    """White image with one solid hematoxylin square, rendered with the
    reference stain vectors."""
    c = np.zeros((height, width, 2))
    c[y0 : y0 + size, x0 : x0 + size, 0] = conc
    return render(c, REFERENCE_STAIN_MODEL.stain_vectors)


def planted_workspace(root: Path, classifier="passthrough", n_images=2, patch=(256, 256), detectors=1):
    """Directory with planted-blob PNGs, a truth CSV and a pipeline config."""
    from mitocascade.imageio import write_png
    from mitocascade.tiling import write_annotations

    root.mkdir(parents=True, exist_ok=True)
    truths = []
    for i in range(n_images):
        image_id = f"slide{i}"
        img, truth, _ = planted_blob_image(seed=10 + i, image_id=image_id, patch_size=patch)
        write_png(root / "images" / f"{image_id}.png", img)
        truths += truth
    write_annotations(root / "truth.csv", truths)
    dets = ", ".join(['"builtin:blob"'] * detectors)
    classifier = classifier.replace("\\", "\\\\").replace('"', '\\"')
    (root / "pipeline.toml").write_text(
        f"""seed = 5
images = "images"
truth = "truth.csv"
out = "run"

[stage1]
detectors = [{dets}]
patch_height = {patch[0]}
patch_width = {patch[1]}

[stage2]
classifier = "{classifier}"
final_threshold = 0.5
""",
        encoding="utf-8",
    )
    return root / "pipeline.toml"
