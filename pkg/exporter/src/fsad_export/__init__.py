"""Produce the engine's inputs: ONNX backbones and precomputed feature files."""

from .dump import DumpReport, dump_features, extract_stack, preprocess_for
from .errors import ExportError
from .export import ExportSpec, build_extractor, check_contract, export_onnx
from .vit import (
    VARIANTS,
    LayerExtractor,
    VisionTransformer,
    VitVariant,
    build_backbone,
)

__version__ = "0.1.0"

__all__ = [
    "DumpReport",
    "ExportError",
    "ExportSpec",
    "LayerExtractor",
    "VARIANTS",
    "VisionTransformer",
    "VitVariant",
    "build_backbone",
    "build_extractor",
    "check_contract",
    "dump_features",
    "export_onnx",
    "extract_stack",
    "preprocess_for",
]
