"""8-bit RGB PNG reading and writing."""
from pathlib import Path

import numpy as np
from PIL import Image

from .stain import as_rgb


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path, img):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(as_rgb(img), mode="RGB").save(path, format="PNG")
