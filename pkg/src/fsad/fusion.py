"""Layer selection and group-to-group feature fusion.

A fused patch vector is the concatenation of that patch's L2-normalized
per-layer vectors, scaled by 1/sqrt(group size). Under that construction the
dot product of two fused vectors is exactly the mean of the per-layer cosine
similarities, so group similarity search generalizes single-layer comparison
without leaving the cosine scale.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .features import FeatureStack
from .numerics import l2_normalize_rows, rowwise_max, similarity_matmul


class FusionScheme(str, enum.Enum):
    GROUPED = "grouped"
    LAYER_TO_LAYER = "layer_to_layer"


def default_layer_selection(depth: int) -> list[int]:
    """Central contiguous band, dropping floor(depth/6) layers at each end.

    Indices are 1-based: a 12-layer backbone yields [3..10].
    """
    if depth < 2:
        raise ConfigError(f"backbone depth must be at least 2, got {depth}")
    drop = depth // 6
    return list(range(drop + 1, depth - drop + 1))


def default_fusion_groups(depth: int = 12) -> tuple[tuple[int, ...], ...]:
    return (tuple(default_layer_selection(depth)),)


@dataclass(frozen=True)
class FusionSpec:
    groups: tuple[tuple[int, ...], ...] = field(default_factory=default_fusion_groups)
    scheme: FusionScheme = FusionScheme.GROUPED

    def __post_init__(self):
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        if len(groups) == 0:
            raise ConfigError("fusion needs at least one group")
        seen: set[int] = set()
        for g in groups:
            if len(g) == 0:
                raise ConfigError("fusion groups must be non-empty")
            for i in g:
                if i in seen:
                    raise ConfigError(f"layer {i} appears in more than one fusion group")
                seen.add(i)
        object.__setattr__(self, "groups", groups)

    @property
    def all_layers(self) -> tuple[int, ...]:
        return tuple(sorted({i for g in self.groups for i in g}))

    @property
    def effective_groups(self) -> tuple[tuple[int, ...], ...]:
        """Groups actually fused: layer-to-layer explodes every layer into a singleton."""
        if self.scheme is FusionScheme.LAYER_TO_LAYER:
            return tuple((i,) for g in self.groups for i in g)
        return self.groups


@dataclass(frozen=True)
class FusedPatches:
    group_index: int
    layer_indices: tuple[int, ...]
    matrix: np.ndarray  # (grid_h * grid_w, dim * n_layers) float32
    grid_h: int
    grid_w: int

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float32)
        if m.ndim != 2 or m.shape[0] != self.grid_h * self.grid_w:
            raise ShapeError(
                f"fused matrix shape {m.shape} does not cover a "
                f"{self.grid_h}x{self.grid_w} grid"
            )
        object.__setattr__(self, "matrix", m)


def _normalized_layer_rows(stack: FeatureStack, index: int) -> np.ndarray:
    for lf in stack.layers:
        if lf.layer_index == index:
            flat = lf.values.reshape(-1, lf.dim)
            return l2_normalize_rows(flat)
    raise ShapeError(
        f"fusion asked for layer {index}, stack has {list(stack.layer_indices)}"
    )


def fuse_groups(stack: FeatureStack, spec: FusionSpec) -> list[FusedPatches]:
    """One fused, row-normalized patch matrix per effective group.

    A row can only fall short of unit norm when some member layers are zero
    at that position; a position that is zero in every member layer stays an
    all-zero row.
    """
    out = []
    for gi, group in enumerate(spec.effective_groups):
        blocks = [_normalized_layer_rows(stack, i) for i in group]
        fused = np.concatenate(blocks, axis=1) / np.float32(np.sqrt(len(group)))
        out.append(
            FusedPatches(
                group_index=gi,
                layer_indices=tuple(group),
                matrix=fused.astype(np.float32),
                grid_h=stack.grid_h,
                grid_w=stack.grid_w,
            )
        )
    return out


def nn_distance_map(
    query_rows: np.ndarray, bank_rows: np.ndarray, grid_h: int, grid_w: int
) -> np.ndarray:
    """Per-patch score 1 - max dot against the bank, laid out on the grid."""
    sims = similarity_matmul(query_rows, bank_rows)
    best = rowwise_max(sims)
    return (1.0 - best).astype(np.float32).reshape(grid_h, grid_w)


def layer_to_layer_maps(
    stack: FeatureStack, banks: dict[int, np.ndarray]
) -> dict[int, np.ndarray]:
    """Ablation path: one nearest-neighbor score map per layer, no fusion.

    banks maps layer index to a row-normalized memory matrix; the caller
    averages the returned maps.
    """
    want = set(stack.layer_indices)
    have = set(banks)
    if want != have:
        raise ShapeError(
            f"layer sets differ: stack has {sorted(want)}, banks have {sorted(have)}"
        )
    out = {}
    for lf in stack.layers:
        q = l2_normalize_rows(lf.values.reshape(-1, lf.dim))
        out[lf.layer_index] = nn_distance_map(q, banks[lf.layer_index], lf.grid_h, lf.grid_w)
    return out
