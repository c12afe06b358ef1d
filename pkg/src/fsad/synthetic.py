"""Synthetic feature-world generator for benchmarks and end-to-end tests.

Builds a category/train/test/ground_truth tree whose images are placeholder
PNGs and whose precomputed feature sidecars encode a fully controlled world:
each category has a random per-position prototype field, normal images are
noisy copies of it, and defects rotate the prototypes inside a rectangular
cell region so every defective patch is exactly orthogonal to its clean
counterpart.  Feature files for transformed variants are derived from the
base grid the way an equivariant backbone would produce them, which makes
the tree usable with the precomputed-features backend.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import AugmentationPlan, SupportAug, ViewKind, ViewTransform
from .errors import ConfigError
from .features import FeatureStack, LayerFeatures, variant_path, write_feature_file


@dataclass(frozen=True)
class SyntheticSpec:
    categories: tuple[str, ...] = ("braid", "foam", "tile")
    grid: int = 16
    dim: int = 32
    layer_indices: tuple[int, ...] = tuple(range(3, 11))
    n_train: int = 4
    n_test_good: int = 2
    n_test_defect: int = 2
    image_size: int = 256
    noise: float = 0.05
    seed: int = 1234
    backbone_id: str = "synthetic-vit"

    def __post_init__(self):
        if self.dim % 2 != 0:
            raise ConfigError("synthetic feature dim must be even")
        if self.image_size % self.grid != 0:
            raise ConfigError("image_size must be a multiple of the grid")
        if len(self.categories) == 0:
            raise ConfigError("at least one category is required")


def _unit_rows(rng, *shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _rotate_pairs(values: np.ndarray) -> np.ndarray:
    """Rotate every (2i, 2i+1) coordinate pair by 90 degrees.

    The result is orthogonal to the input vector at every position, so a
    rotated prototype is maximally far from the clean one under cosine.
    """
    out = np.empty_like(values)
    out[..., 0::2] = -values[..., 1::2]
    out[..., 1::2] = values[..., 0::2]
    return out


_AUG_GRID = {
    "": lambda g: g,
    SupportAug.ROT90.value: lambda g: np.rot90(g, 1, axes=(0, 1)),
    SupportAug.ROT180.value: lambda g: np.rot90(g, 2, axes=(0, 1)),
    SupportAug.ROT270.value: lambda g: np.rot90(g, 3, axes=(0, 1)),
    SupportAug.FLIPX.value: lambda g: g[:, ::-1],
    SupportAug.FLIPY.value: lambda g: g[::-1, :],
}


def _view_grid(grid: np.ndarray, view: ViewTransform) -> np.ndarray:
    if view.kind is ViewKind.XFLIP:
        return grid[:, ::-1]
    if view.kind is ViewKind.YFLIP:
        return grid[::-1, :]
    # photometric views share the base features in this world
    return grid


def _stack_from_grids(grids, cls_token, layer_indices, backbone_id) -> FeatureStack:
    layers = tuple(
        LayerFeatures(li, np.ascontiguousarray(g, dtype=np.float32))
        for li, g in zip(layer_indices, grids)
    )
    return FeatureStack(layers, np.asarray(cls_token, np.float32), backbone_id)


def _write_chains(path, base_grids, cls_token, spec, chains):
    for tags in chains:
        grids = base_grids
        for tag in tags:
            if tag in _AUG_GRID:
                grids = [_AUG_GRID[tag](g) for g in grids]
            else:
                view = _view_from_tag(tag)
                grids = [_view_grid(g, view) for g in grids]
        stack = _stack_from_grids(grids, cls_token, spec.layer_indices, spec.backbone_id)
        write_feature_file(variant_path(path, tags), stack)


def _view_from_tag(tag: str) -> ViewTransform:
    kind, _, tau = tag.partition("-")
    if tau:
        return ViewTransform(ViewKind(kind), tau=float(tau))
    return ViewTransform(ViewKind(kind))


def support_chains(plan: AugmentationPlan) -> list[tuple[str, ...]]:
    """Transform-tag chains a support image needs on disk for this plan."""
    aug_tags = [""] + [a.value for a in plan.ordered_augs]
    chains = []
    for aug in aug_tags:
        for view in plan.views:
            tags = tuple(t for t in (aug,) if t)
            if view.kind is not ViewKind.IDENTITY:
                tags = tags + (view.tag(),)
            chains.append(tags)
    return chains


def query_chains(plan: AugmentationPlan) -> list[tuple[str, ...]]:
    """Transform-tag chains a query image needs on disk for this plan."""
    chains = []
    for view in plan.views:
        chains.append(() if view.kind is ViewKind.IDENTITY else (view.tag(),))
    return chains


def _random_region(rng, grid):
    # rectangle of 3 to 6 cells, placed away from no particular edge
    while True:
        h = int(rng.integers(1, 4))
        w = int(rng.integers(1, 4))
        if 3 <= h * w <= 6:
            break
    r0 = int(rng.integers(0, grid - h + 1))
    c0 = int(rng.integers(0, grid - w + 1))
    return r0, r0 + h, c0, c0 + w


def _placeholder_png(path: Path, size: int, shade: int):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("L", (size, size), shade).save(path)


def _mask_png(path: Path, size: int, cell: int, region):
    r0, r1, c0, c1 = region
    arr = np.zeros((size, size), np.uint8)
    arr[r0 * cell : r1 * cell, c0 * cell : c1 * cell] = 255
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


@dataclass(frozen=True)
class GeneratedDataset:
    root: Path
    spec: SyntheticSpec
    regions: dict = field(default_factory=dict)  # defect path -> cell region


def generate_dataset(
    root: str | Path,
    spec: SyntheticSpec | None = None,
    plan: AugmentationPlan | None = None,
) -> GeneratedDataset:
    """Write the full tree: PNGs, masks, and feature sidecars for every chain."""
    spec = spec or SyntheticSpec()
    plan = plan or AugmentationPlan()
    root = Path(root)
    rng = np.random.default_rng(spec.seed)
    n_layers = len(spec.layer_indices)

    # near-orthonormal class tokens, one per category
    raw = rng.standard_normal((max(len(spec.categories), spec.dim), spec.dim))
    q, _ = np.linalg.qr(raw.T)
    cls_tokens = q.T[: len(spec.categories)]

    sup_chains = support_chains(plan)
    qry_chains = query_chains(plan)
    regions: dict = {}

    for ci, cat in enumerate(spec.categories):
        protos = _unit_rows(rng, n_layers, spec.grid, spec.grid, spec.dim)
        cls_base = cls_tokens[ci]

        def sample_grids(defect_region=None):
            grids = []
            for li in range(n_layers):
                g = protos[li] + spec.noise * rng.standard_normal(protos[li].shape)
                if defect_region is not None:
                    r0, r1, c0, c1 = defect_region
                    g[r0:r1, c0:c1] = _rotate_pairs(protos[li][r0:r1, c0:c1])
                g = g / np.linalg.norm(g, axis=-1, keepdims=True)
                grids.append(g)
            return grids

        def cls_noisy():
            v = cls_base + 0.01 * rng.standard_normal(spec.dim)
            return v / np.linalg.norm(v)

        for i in range(spec.n_train):
            p = root / cat / "train" / "good" / f"{i:03d}.png"
            _placeholder_png(p, spec.grid, 110)
            _write_chains(p, sample_grids(), cls_noisy(), spec, sup_chains)

        for i in range(spec.n_test_good):
            p = root / cat / "test" / "good" / f"{i:03d}.png"
            _placeholder_png(p, spec.grid, 110)
            _write_chains(p, sample_grids(), cls_noisy(), spec, qry_chains)

        cell = spec.image_size // spec.grid
        for i in range(spec.n_test_defect):
            p = root / cat / "test" / "rotation" / f"{i:03d}.png"
            region = _random_region(rng, spec.grid)
            regions[str(p)] = region
            _placeholder_png(p, spec.grid, 110)
            _write_chains(p, sample_grids(region), cls_noisy(), spec, qry_chains)
            _mask_png(
                root / cat / "ground_truth" / "rotation" / f"{i:03d}_mask.png",
                spec.image_size,
                cell,
                region,
            )

    return GeneratedDataset(root=root, spec=spec, regions=regions)
