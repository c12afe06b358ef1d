"""Shared test helpers: a milliseconds-scale transformer and image fixtures."""
import numpy as np
from PIL import Image

from fsad_export import ExportSpec, VitVariant

# Small enough to forward in milliseconds, deep enough to pick interior layers.
TINY = VitVariant(dim=32, depth=4, heads=2)


def tiny_spec(**overrides) -> ExportSpec:
    kwargs = dict(backbone="vit-s/14", layer_indices=(2, 3), resolution=56)
    kwargs.update(overrides)
    return ExportSpec(**kwargs)


def write_png(path, rng, size=64):
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    Image.fromarray(arr, "RGB").save(path)
