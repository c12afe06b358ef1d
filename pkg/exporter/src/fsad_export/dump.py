"""Dump precomputed feature files for a dataset tree.

Writes one .vadf sidecar per image (plus, optionally, per transform chain of
an augmentation plan) so the engine's files backend can run without a model.
Features are produced exactly as the engine's preprocessing contract demands:
shorter-side resize, center crop, per-channel normalization.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from fsad import (
    AugmentationPlan,
    FeatureStack,
    LayerFeatures,
    PreprocessSpec,
    apply_support_aug,
    apply_view,
    load_image,
    normalize_chw,
    preprocess_image,
    read_feature_file,
    variant_path,
    write_feature_file,
)
from fsad.augment import SUPPORT_AUG_ORDER, ViewKind

from .errors import ExportError
from .export import ExportSpec, build_extractor

log = logging.getLogger("fsad_export")

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass(frozen=True)
class DumpReport:
    written: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (path, message)


def preprocess_for(spec: ExportSpec) -> PreprocessSpec:
    # engine default keeps an 8:7 resize-to-crop ratio (448 -> 392)
    resize = max(spec.resolution, round(spec.resolution * 8 / 7))
    return PreprocessSpec(resize_to=resize, crop_to=spec.resolution)


def extract_stack(
    extractor,
    pixels_hwc: np.ndarray,
    backbone_id: str,
    preprocess: PreprocessSpec | None = None,
) -> FeatureStack:
    chw = normalize_chw(pixels_hwc, preprocess or PreprocessSpec())
    with torch.no_grad():
        outs = extractor(torch.from_numpy(chw[None]))
    *layer_outs, cls = [t.numpy() for t in outs]
    layers = []
    for idx, arr in zip(extractor.layer_indices, layer_outs):
        tokens = arr.shape[1]
        side = math.isqrt(tokens)
        if side * side != tokens:
            raise ExportError(f"layer {idx}: token count {tokens} is not square")
        layers.append(
            LayerFeatures(idx, arr.reshape(side, side, arr.shape[2]).astype(np.float32))
        )
    return FeatureStack(tuple(layers), cls[0].astype(np.float32), backbone_id)


def _chains(plan: AugmentationPlan, is_support: bool):
    aug_tags = [""] + ([a.value for a in plan.ordered_augs] if is_support else [])
    out = []
    for aug in aug_tags:
        for view in plan.views:
            if not is_support and aug:
                continue
            tags = (aug,) if aug else ()
            if view.kind is not ViewKind.IDENTITY:
                tags = tags + (view.tag(),)
            out.append(tags)
    return out


def _apply_chain(pixels: np.ndarray, tags, plan: AugmentationPlan) -> np.ndarray:
    by_tag = {a.value: a for a in SUPPORT_AUG_ORDER}
    views = {v.tag(): v for v in plan.views}
    out = pixels
    for tag in tags:
        if tag in by_tag:
            out = apply_support_aug(out, by_tag[tag])
        elif tag in views:
            out = apply_view(out, views[tag])
        else:
            raise ExportError(f"unknown transform tag {tag!r}")
    return out


def dump_features(
    dataset_root,
    spec: ExportSpec,
    *,
    model=None,
    out_root=None,
    plan: AugmentationPlan | None = None,
    support_dir: str = "train",
    backbone_id: str | None = None,
) -> DumpReport:
    """Walk the tree; write feature sidecars; log failures and keep going.

    With a plan, images under a `support_dir` component get the full
    augmentation-chain set and all others get the view chains; without one,
    every image gets its base features only.
    """
    root = Path(dataset_root)
    if not root.is_dir():
        raise ExportError(f"dataset root {root} is not a directory")
    extractor = build_extractor(spec, model=model)
    prep = preprocess_for(spec)
    bid = backbone_id or f"{spec.backbone}@{spec.resolution}"

    images = sorted(
        p for p in root.rglob("*")
        if p.suffix.lower() in IMAGE_EXTENSIONS and "ground_truth" not in p.parts
    )
    report = DumpReport()
    for img in images:
        try:
            base = preprocess_image(load_image(img), prep)
            is_support = plan is not None and support_dir in img.parts
            chains = _chains(plan, is_support) if plan is not None else [()]
            for tags in chains:
                pixels = _apply_chain(base, tags, plan or AugmentationPlan())
                stack = extract_stack(extractor, pixels, bid, preprocess=prep)
                target = variant_path(img, tags)
                if out_root is not None:
                    target = Path(out_root) / target.relative_to(root)
                    target.parent.mkdir(parents=True, exist_ok=True)
                write_feature_file(target, stack)
                read_feature_file(target)  # engine-side byte validation
                report.written.append(target)
        except Exception as e:
            log.warning("skipping %s: %s", img, e)
            report.failures.append((img, str(e)))
    return report
