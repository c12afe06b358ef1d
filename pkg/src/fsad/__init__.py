"""Training-free few-shot anomaly detection via nearest-neighbor patch search.

Build a memory bank from a handful of normal support images, then score query
images by searching each patch's fused multi-layer features against the bank.
"""

from .augment import (
    AugmentationPlan,
    IDENTITY_VIEW,
    SupportAug,
    ViewKind,
    ViewTransform,
    apply_support_aug,
    apply_view,
    default_support_augs,
    default_views,
)
from .bank import (
    BankManifest,
    GlobalBank,
    PatchBank,
    build_banks,
    load_bank,
    retrieve_category,
    save_bank,
)
from .config import AblationToggles, EngineConfig, config_from_dict, load_config
from .detect import (
    TOP_PIXEL_FRACTION,
    DetectionResult,
    FailedImage,
    detect_batch,
    detect_one,
    export_heatmap,
    score_image,
    score_pixels,
)
from .errors import (
    BadMagicError,
    BankError,
    ConfigError,
    DatasetError,
    ExtractorError,
    FeatureFileError,
    FsadError,
    ManifestMismatchError,
    ShapeError,
    TruncatedFileError,
    VersionError,
)
from .evaluation import (
    EvalConfig,
    EvalReport,
    EvalRow,
    auroc,
    average_precision,
    ingest_dataset,
    pixel_auroc,
    pro_score,
    run_evaluation,
    sample_supports,
    write_report_csv,
)
from .features import (
    FeatureStack,
    FileFeatureBackend,
    ImageSource,
    InMemoryBackend,
    LayerFeatures,
    OnnxFeatureBackend,
    PreprocessSpec,
    load_image,
    normalize_chw,
    preprocess_image,
    read_feature_file,
    variant_path,
    write_feature_file,
)
from .fusion import (
    FusionScheme,
    FusionSpec,
    default_fusion_groups,
    default_layer_selection,
    fuse_groups,
)
from .synthetic import SyntheticSpec, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "AblationToggles",
    "AugmentationPlan",
    "BadMagicError",
    "BankError",
    "BankManifest",
    "ConfigError",
    "DatasetError",
    "DetectionResult",
    "EngineConfig",
    "EvalConfig",
    "EvalReport",
    "EvalRow",
    "ExtractorError",
    "FailedImage",
    "FeatureFileError",
    "FeatureStack",
    "FileFeatureBackend",
    "FsadError",
    "FusionScheme",
    "FusionSpec",
    "GlobalBank",
    "IDENTITY_VIEW",
    "ImageSource",
    "InMemoryBackend",
    "LayerFeatures",
    "ManifestMismatchError",
    "OnnxFeatureBackend",
    "PatchBank",
    "PreprocessSpec",
    "ShapeError",
    "SupportAug",
    "SyntheticSpec",
    "TOP_PIXEL_FRACTION",
    "TruncatedFileError",
    "VersionError",
    "ViewKind",
    "ViewTransform",
    "apply_support_aug",
    "apply_view",
    "auroc",
    "average_precision",
    "build_banks",
    "config_from_dict",
    "default_fusion_groups",
    "default_layer_selection",
    "default_support_augs",
    "default_views",
    "detect_batch",
    "detect_one",
    "export_heatmap",
    "fuse_groups",
    "generate_dataset",
    "ingest_dataset",
    "load_bank",
    "load_config",
    "load_image",
    "normalize_chw",
    "preprocess_image",
    "pixel_auroc",
    "pro_score",
    "read_feature_file",
    "retrieve_category",
    "run_evaluation",
    "sample_supports",
    "save_bank",
    "score_image",
    "score_pixels",
    "variant_path",
    "write_feature_file",
    "write_report_csv",
]
