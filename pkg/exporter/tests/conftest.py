import numpy as np
import pytest
import torch

from fsad_export import VisionTransformer

from tinyvit import TINY, write_png


@pytest.fixture(scope="session")
def tiny_model():
    torch.manual_seed(7)
    vit = VisionTransformer(TINY, img_size=56)
    vit.eval()
    return vit


@pytest.fixture()
def dataset(tmp_path):
    """One-category tree: 2 train images, 2 test images, 1 mask to skip."""
    rng = np.random.default_rng(42)
    root = tmp_path / "data"
    for name in ("a", "b"):
        write_png(root / "cat" / "train" / "good" / f"{name}.png", rng)
    write_png(root / "cat" / "test" / "good" / "c.png", rng)
    write_png(root / "cat" / "test" / "defect" / "d.png", rng)
    write_png(root / "cat" / "ground_truth" / "defect" / "d_mask.png", rng)
    return root
