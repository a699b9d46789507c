import numpy as np
import pytest
from PIL import Image

from boxchain.layout import BBox, LayoutBox, LayoutSet


def make_noise_image(width: int, height: int, seed: int) -> Image.Image:
    """Non-constant everywhere, so blur measurably reduces patch variance."""
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    return Image.fromarray(arr, "RGB")


def make_layout(image_id: str, width: int, height: int, rects) -> LayoutSet:
    boxes = [LayoutBox(id=i + 1, bbox=BBox(*r)) for i, r in enumerate(rects)]
    return LayoutSet.build(image_id, width, height, boxes)


@pytest.fixture()
def mini_corpus(tmp_path_factory):
    from boxchain.minicorpus import build_mini_corpus

    root = tmp_path_factory.mktemp("minicorpus")
    build_mini_corpus(root)
    return root
