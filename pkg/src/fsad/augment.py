"""Support-set augmentation and pseudo multi-view transforms.

Support augmentations enlarge the handful of normal reference images with
lossless right-angle rotations and flips (square crops only). View transforms
are applied identically to the query and to every support image so the pair
stays comparable; the spatial ones (XFlip/YFlip) need their anomaly maps
flipped back afterwards, the photometric ones do not.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


class SupportAug(str, enum.Enum):
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"
    FLIPX = "flipx"
    FLIPY = "flipy"


# Fixed expansion order, independent of how the caller's set iterates.
SUPPORT_AUG_ORDER = (
    SupportAug.ROT90,
    SupportAug.ROT180,
    SupportAug.ROT270,
    SupportAug.FLIPX,
    SupportAug.FLIPY,
)


class ViewKind(str, enum.Enum):
    IDENTITY = "identity"
    POSCLAMP = "posclamp"
    NEGCLAMP = "negclamp"
    XFLIP = "xflip"
    YFLIP = "yflip"
    RBSWAP = "rbswap"


_PARAMETRIC = {ViewKind.POSCLAMP, ViewKind.NEGCLAMP}
_SPATIAL = {ViewKind.XFLIP, ViewKind.YFLIP}


@dataclass(frozen=True)
class ViewTransform:
    kind: ViewKind
    tau: float | None = None

    def __post_init__(self):
        if self.kind in _PARAMETRIC:
            if self.tau is None or not (0.0 < self.tau < 1.0):
                raise ConfigError(
                    f"view '{self.kind.value}' needs tau strictly inside (0, 1), got {self.tau}"
                )
        elif self.tau is not None:
            raise ConfigError(f"view '{self.kind.value}' takes no tau")

    @property
    def is_spatial(self) -> bool:
        return self.kind in _SPATIAL

    def tag(self) -> str:
        """Short stable name, used to key cached feature files per view."""
        if self.kind in _PARAMETRIC:
            return f"{self.kind.value}-{self.tau:g}"
        return self.kind.value


IDENTITY_VIEW = ViewTransform(ViewKind.IDENTITY)


def default_support_augs() -> frozenset[SupportAug]:
    return frozenset({SupportAug.ROT90, SupportAug.ROT180, SupportAug.ROT270})


def default_views() -> tuple[ViewTransform, ...]:
    return (
        IDENTITY_VIEW,
        ViewTransform(ViewKind.POSCLAMP, 0.5),
        ViewTransform(ViewKind.YFLIP),
    )


@dataclass(frozen=True)
class AugmentationPlan:
    support_augs: frozenset[SupportAug] = field(default_factory=default_support_augs)
    views: tuple[ViewTransform, ...] = field(default_factory=default_views)

    def __post_init__(self):
        if len(self.views) == 0:
            raise ConfigError("views must be non-empty")
        if self.views[0].kind is not ViewKind.IDENTITY:
            raise ConfigError("the first view must be identity")
        if sum(1 for v in self.views if v.kind is ViewKind.IDENTITY) != 1:
            raise ConfigError("identity must appear exactly once among views")

    @property
    def ordered_augs(self) -> tuple[SupportAug, ...]:
        return tuple(a for a in SUPPORT_AUG_ORDER if a in self.support_augs)


def _check_image(image: np.ndarray) -> np.ndarray:
    a = np.asarray(image, dtype=np.float32)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got shape {a.shape}")
    return a


def apply_support_aug(image: np.ndarray, aug: SupportAug) -> np.ndarray:
    a = _check_image(image)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(
            f"support augmentation needs a square image, got {a.shape[0]}x{a.shape[1]}"
        )
    if aug is SupportAug.ROT90:
        return np.ascontiguousarray(np.rot90(a, 1, axes=(0, 1)))
    if aug is SupportAug.ROT180:
        return np.ascontiguousarray(np.rot90(a, 2, axes=(0, 1)))
    if aug is SupportAug.ROT270:
        return np.ascontiguousarray(np.rot90(a, 3, axes=(0, 1)))
    if aug is SupportAug.FLIPX:
        return np.ascontiguousarray(a[:, ::-1, :])
    if aug is SupportAug.FLIPY:
        return np.ascontiguousarray(a[::-1, :, :])
    raise ConfigError(f"unknown support augmentation: {aug!r}")


def expand_support_set(
    image: np.ndarray, augs: frozenset[SupportAug] | set[SupportAug]
) -> list[tuple[str, np.ndarray]]:
    """Original first, then each requested augmentation in canonical order.

    Returns (tag, image) pairs; the original carries the empty tag.
    """
    a = _check_image(image)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(
            f"support expansion needs a square image, got {a.shape[0]}x{a.shape[1]}"
        )
    out = [("", a.copy())]
    for aug in SUPPORT_AUG_ORDER:
        if aug in augs:
            out.append((aug.value, apply_support_aug(a, aug)))
    return out


def apply_view(image: np.ndarray, view: ViewTransform) -> np.ndarray:
    a = _check_image(image)
    k = view.kind
    if k is ViewKind.IDENTITY:
        return a.copy()
    if k is ViewKind.POSCLAMP:
        return (np.minimum(a, view.tau) / view.tau).astype(np.float32)
    if k is ViewKind.NEGCLAMP:
        return ((np.maximum(a, view.tau) - view.tau) / (1.0 - view.tau)).astype(np.float32)
    if k is ViewKind.XFLIP:
        return np.ascontiguousarray(a[:, ::-1, :])
    if k is ViewKind.YFLIP:
        return np.ascontiguousarray(a[::-1, :, :])
    if k is ViewKind.RBSWAP:
        return np.ascontiguousarray(a[:, :, ::-1])
    raise ConfigError(f"unknown view transform: {k!r}")


def invert_anomaly_map(amap: np.ndarray, view: ViewTransform) -> np.ndarray:
    """Undo the spatial part of a view on its anomaly map; photometric views pass through."""
    m = np.asarray(amap, dtype=np.float32)
    if m.ndim != 2:
        raise ShapeError(f"anomaly map must be 2-D, got shape {m.shape}")
    if view.kind is ViewKind.XFLIP:
        return np.ascontiguousarray(m[:, ::-1])
    if view.kind is ViewKind.YFLIP:
        return np.ascontiguousarray(m[::-1, :])
    return m.copy()
