"""End-to-end query scoring: per-view pixel maps, view fusion, image score.

For one query image the pipeline is per view: fuse the query's patch
features, take 1 - max similarity against the matching memory cell per
group, average the group maps, and undo any spatial transform. The per-view
grid maps are summed elementwise, upsampled bilinearly once to evaluation
resolution (resize is linear, so summing first changes nothing), and the
image-level score is the mean of the top 1% of pixels.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import ViewKind, apply_view, invert_anomaly_map
from .bank import BankManifest, GlobalBank, PatchBank, retrieve_category
from .errors import BankError, FsadError, ShapeError
from .features import (
    FeatureBackend,
    ImageSource,
    extract_features,
    load_image,
    preprocess_image,
)
from .fusion import FusedPatches, fuse_groups, nn_distance_map
from .numerics import bilinear_resize, topk_mean_fraction

TOP_PIXEL_FRACTION = 0.01


@dataclass(frozen=True)
class DetectionResult:
    image: str
    category: str | None
    image_score: float
    map: np.ndarray  # (eval_h, eval_w) float32, >= 0
    per_view_maps: dict[str, np.ndarray] | None = None


@dataclass(frozen=True)
class FailedImage:
    image: str
    error: str


def group_anomaly_map(query: FusedPatches, memory: np.ndarray) -> np.ndarray:
    """Per-patch 1 - max dot product against one memory cell, on the grid."""
    m = np.asarray(memory, dtype=np.float32)
    if m.ndim != 2 or m.shape[0] < 1:
        raise BankError(f"memory must be a non-empty matrix, got shape {m.shape}")
    if m.shape[1] != query.matrix.shape[1]:
        raise ShapeError(
            f"fused query width {query.matrix.shape[1]} does not match memory "
            f"width {m.shape[1]} (bank built under a different fusion or backbone?)"
        )
    return nn_distance_map(query.matrix, m, query.grid_h, query.grid_w)


def score_image(amap: np.ndarray) -> float:
    """Mean of the top 1% highest pixels (at least one pixel)."""
    return topk_mean_fraction(np.asarray(amap, dtype=np.float32).ravel(), TOP_PIXEL_FRACTION)


def _memory_for(
    patch_bank: PatchBank, view_idx: int, category: str | None, group: int
) -> np.ndarray:
    if category is not None:
        return patch_bank.cell(view_idx, category, group)
    # Routing disabled: search the union of every category's rows.
    cats = patch_bank.categories
    parts = [patch_bank.cell(view_idx, c, group) for c in cats]
    return np.concatenate(parts, axis=0) if len(parts) > 1 else parts[0]


def score_pixels(
    image_path: str | Path,
    *,
    patch_bank: PatchBank,
    global_bank: GlobalBank,
    manifest: BankManifest,
    backend: FeatureBackend,
    eval_h: int = 256,
    eval_w: int = 256,
    use_category_routing: bool = True,
    keep_view_maps: bool = False,
) -> tuple[str | None, np.ndarray, dict[str, np.ndarray] | None]:
    """Category retrieval plus the fused multi-view anomaly map for one image."""
    path = Path(image_path)
    plan = manifest.plan
    fusion = manifest.fusion
    layer_indices = fusion.all_layers

    base = (
        preprocess_image(load_image(path), manifest.preprocess)
        if backend.needs_pixels
        else None
    )
    identity_stack = extract_features(
        backend, ImageSource(path=path, tags=(), pixels=base), layer_indices
    )
    category = (
        retrieve_category(identity_stack.cls_token, global_bank)
        if use_category_routing
        else None
    )

    total = None
    view_maps: dict[str, np.ndarray] = {}
    for view_idx, view in enumerate(plan.views):
        if view.kind is ViewKind.IDENTITY:
            stack = identity_stack
        else:
            src = ImageSource(
                path=path,
                tags=(view.tag(),),
                pixels=apply_view(base, view) if base is not None else None,
            )
            stack = extract_features(backend, src, layer_indices)
        fused_groups = fuse_groups(stack, fusion)
        acc = np.zeros((stack.grid_h, stack.grid_w), dtype=np.float64)
        for fused in fused_groups:
            memory = _memory_for(patch_bank, view_idx, category, fused.group_index)
            acc += group_anomaly_map(fused, memory).astype(np.float64)
        view_map = (acc / len(fused_groups)).astype(np.float32)
        view_map = invert_anomaly_map(view_map, view)
        view_maps[view.tag()] = view_map
        total = view_map.astype(np.float64) if total is None else total + view_map
    grid_map = total.astype(np.float32)
    final = bilinear_resize(grid_map, eval_h, eval_w)
    return category, final, (view_maps if keep_view_maps else None)


def detect_one(
    image_path: str | Path,
    *,
    patch_bank: PatchBank,
    global_bank: GlobalBank,
    manifest: BankManifest,
    backend: FeatureBackend,
    eval_h: int = 256,
    eval_w: int = 256,
    use_category_routing: bool = True,
    keep_view_maps: bool = False,
) -> DetectionResult:
    category, amap, views = score_pixels(
        image_path,
        patch_bank=patch_bank,
        global_bank=global_bank,
        manifest=manifest,
        backend=backend,
        eval_h=eval_h,
        eval_w=eval_w,
        use_category_routing=use_category_routing,
        keep_view_maps=keep_view_maps,
    )
    return DetectionResult(
        image=str(image_path),
        category=category,
        image_score=score_image(amap),
        map=amap,
        per_view_maps=views,
    )


def detect_batch(
    image_paths: Sequence[str | Path],
    *,
    patch_bank: PatchBank,
    global_bank: GlobalBank,
    manifest: BankManifest,
    backend: FeatureBackend,
    eval_h: int = 256,
    eval_w: int = 256,
    use_category_routing: bool = True,
    threads: int = 1,
) -> tuple[list[DetectionResult], list[FailedImage]]:
    """Score many images; a failure records an error and the batch continues.

    Successes keep input order and are bitwise identical to sequential
    single-image calls for any thread count.
    """

    def run(path) -> DetectionResult | FailedImage:
        try:
            return detect_one(
                path,
                patch_bank=patch_bank,
                global_bank=global_bank,
                manifest=manifest,
                backend=backend,
                eval_h=eval_h,
                eval_w=eval_w,
                use_category_routing=use_category_routing,
            )
        except FsadError as e:
            return FailedImage(image=str(path), error=str(e))

    if threads > 1 and len(image_paths) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run, image_paths))
    else:
        outcomes = [run(p) for p in image_paths]
    results = [o for o in outcomes if isinstance(o, DetectionResult)]
    failures = [o for o in outcomes if isinstance(o, FailedImage)]
    return results, failures


def render_heatmap(amap: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Min-max scale a map to 8-bit grayscale; constant maps render black."""
    m = np.asarray(amap, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    scaled = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
    return np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8), lo, hi


def heatmap_payload(result: DetectionResult, lo: float, hi: float) -> dict:
    return {
        "image": result.image,
        "category": result.category,
        "image_score": result.image_score,
        "map_min": lo,
        "map_max": hi,
    }


def export_heatmap(result: DetectionResult, out_dir: str | Path) -> tuple[Path, Path]:
    """8-bit grayscale PNG (min-max normalized per image) plus a JSON sidecar."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(result.image).stem
    png8, lo, hi = render_heatmap(result.map)
    png_path = out / f"{stem}_heatmap.png"
    Image.fromarray(png8, mode="L").save(png_path)
    json_path = out / f"{stem}_score.json"
    json_path.write_text(
        json.dumps(heatmap_payload(result, lo, hi), indent=2, sort_keys=True) + "\n"
    )
    return png_path, json_path
