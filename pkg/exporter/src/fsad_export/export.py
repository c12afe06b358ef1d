"""ONNX export of the layer-extraction wrapper."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import ExportError
from .vit import VARIANTS, LayerExtractor, build_backbone, token_count


@dataclass(frozen=True)
class ExportSpec:
    backbone: str = "vit-b/14"
    layer_indices: tuple[int, ...] = tuple(range(3, 11))
    resolution: int = 392
    out_path: Path | None = None
    weights_path: Path | None = None
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in VARIANTS:
            raise ExportError(
                f"unsupported backbone {self.backbone!r}; known: {sorted(VARIANTS)}"
            )
        variant = VARIANTS[self.backbone]
        if self.resolution < variant.patch_size or self.resolution % variant.patch_size:
            raise ExportError(
                f"resolution {self.resolution} is not divisible by patch size "
                f"{variant.patch_size}"
            )
        idx = tuple(int(i) for i in self.layer_indices)
        if not idx or list(idx) != sorted(set(idx)):
            raise ExportError("layer indices must be non-empty, strictly increasing")
        bad = [i for i in idx if not 1 <= i <= variant.depth]
        if bad:
            raise ExportError(
                f"layer indices {bad} out of range for a {variant.depth}-block model"
            )
        object.__setattr__(self, "layer_indices", idx)

    @property
    def variant(self):
        return VARIANTS[self.backbone]


def build_extractor(spec: ExportSpec, model=None) -> LayerExtractor:
    vit = model if model is not None else build_backbone(
        spec.backbone, spec.resolution, weights_path=spec.weights_path, seed=spec.seed
    )
    vit.eval()
    return LayerExtractor(vit, spec.layer_indices)


def check_contract(extractor: LayerExtractor, spec: ExportSpec) -> None:
    """One dry-run forward; fails before export if shapes are off-contract."""
    tokens = token_count(spec.resolution, spec.variant.patch_size)
    with torch.no_grad():
        outs = extractor(torch.zeros(1, 3, spec.resolution, spec.resolution))
    *layers, cls = outs
    for i, t in zip(spec.layer_indices, layers):
        if tuple(t.shape) != (1, tokens, spec.variant.dim):
            raise ExportError(
                f"layer_{i:02d} produced {tuple(t.shape)}, "
                f"contract wants (1, {tokens}, {spec.variant.dim})"
            )
    if tuple(cls.shape) != (1, spec.variant.dim):
        raise ExportError(
            f"cls produced {tuple(cls.shape)}, contract wants (1, {spec.variant.dim})"
        )


def export_onnx(spec: ExportSpec, model=None) -> Path:
    """Write an inference-only graph satisfying the engine's model contract."""
    if spec.out_path is None:
        raise ExportError("ExportSpec.out_path is required for export")
    extractor = build_extractor(spec, model=model)
    check_contract(extractor, spec)
    out = Path(spec.out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    dummy = torch.zeros(1, 3, spec.resolution, spec.resolution)
    try:
        torch.onnx.export(
            extractor,
            (dummy,),
            str(out),
            input_names=["pixels"],
            output_names=extractor.output_names,
            do_constant_folding=True,
            dynamo=False,
        )
    except Exception as e:
        raise ExportError(
            "serializing to ONNX needs the 'onnx' package "
            f"(pip install fsad-exporter[onnx]): {e}"
        ) from e
    return out
