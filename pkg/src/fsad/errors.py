"""Exception taxonomy shared across the engine."""
from __future__ import annotations


class FsadError(Exception):
    """Base class for all engine errors."""


class ShapeError(FsadError):
    """Operands have incompatible or invalid shapes."""


class FeatureFileError(FsadError):
    """Base for feature/bank file format problems."""


class BadMagicError(FeatureFileError):
    pass


class VersionError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class ExtractorError(FsadError):
    """Feature extraction failed (missing layer, bad backend output, unreadable image)."""


class BankError(FsadError):
    """Memory bank construction or lookup failed."""


class ManifestMismatchError(BankError):
    """Detection-time config disagrees with the bank's stored manifest."""


class ConfigError(FsadError):
    """Invalid or unparseable engine configuration."""


class DatasetError(FsadError):
    """Dataset layout problems (missing masks, empty pools, bad roots)."""
