"""Dense float32 kernels: row normalization, similarity search, top-k, resize.

Conventions: a "matrix" is a 2-D float32 ndarray (rows = items), a "map" is a
2-D float32 ndarray (H, W). Every public op is a pure function, returns
finite values, and is deterministic for fixed inputs regardless of how many
engine worker threads call it concurrently (accumulations that would depend
on a reduction order run in float64 through a fixed-order BLAS path).
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError


def as_f32(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float32)


def require_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise ShapeError(f"{what} contains non-finite values")
    return a


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    """Scale each row to unit Euclidean norm; all-zero rows pass through unchanged."""
    m = as_f32(np.atleast_2d(m))
    wide = m.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", wide, wide))
    # divide in float64: a float32 norm is too coarse for subnormal rows
    safe = np.where(norms == 0.0, 1.0, norms)
    return as_f32(wide / safe[:, None])


def similarity_matmul(q: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Dot products of every query row against every memory row: out[i, j] = q[i] . m[j].

    Accumulates in float64 so the result does not depend on float32 partial-sum
    order, then rounds once to float32.
    """
    q = as_f32(np.atleast_2d(q))
    m = as_f32(np.atleast_2d(m))
    if q.shape[1] != m.shape[1]:
        raise ShapeError(
            f"similarity_matmul dimension mismatch: query {q.shape} vs memory {m.shape}"
        )
    if m.shape[0] < 1:
        raise ShapeError("similarity_matmul needs at least one memory row")
    out = q.astype(np.float64) @ m.astype(np.float64).T
    return as_f32(out)


def rowwise_max(s: np.ndarray) -> np.ndarray:
    """Maximum of each row. Exact: max is order-independent."""
    s = np.atleast_2d(s)
    if s.size == 0:
        raise ShapeError("rowwise_max on an empty matrix")
    return as_f32(np.max(s, axis=1))


def topk_mean_fraction(values: np.ndarray, fraction: float) -> float:
    """Mean of the k = max(1, floor(n * fraction)) largest values.

    The selected values are averaged in descending order in float64, so the
    result is bit-identical to a full-sort reference. Ties may be broken
    either way; the mean is unaffected.
    """
    v = np.asarray(values, dtype=np.float32).ravel()
    n = v.size
    if n == 0:
        raise ShapeError("topk_mean_fraction on an empty vector")
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    k = max(1, int(np.floor(n * fraction)))
    if k >= n:
        top = v
    else:
        top = np.partition(v, n - k)[n - k:]
    top = np.sort(top)[::-1]
    return float(np.mean(top.astype(np.float64)))


def nearest_resize(grid: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbor resize with half-pixel centers; preserves dtype.

    Used for ground-truth masks, where interpolation would break binariness.
    """
    a = np.asarray(grid)
    if a.ndim != 2:
        raise ShapeError(f"nearest_resize expects a 2-D map, got shape {a.shape}")
    h, w = a.shape
    if h < 1 or w < 1 or target_h < 1 or target_w < 1:
        raise ShapeError("nearest_resize sizes must be >= 1")
    if (h, w) == (target_h, target_w):
        return a.copy()
    ys = np.minimum(((np.arange(target_h) + 0.5) * (h / target_h)).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(target_w) + 0.5) * (w / target_w)).astype(np.int64), w - 1)
    return np.ascontiguousarray(a[ys][:, xs])


def bilinear_resize(grid: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear interpolation with half-pixel centers, borders clamped.

    Source coordinate of output pixel d along an axis of scale s = src/dst:
    src = (d + 0.5) * s - 0.5, clamped to [0, size-1] (align-corners off).
    Constant inputs stay constant and outputs never leave the input range.
    """
    a = as_f32(grid)
    if a.ndim != 2:
        raise ShapeError(f"bilinear_resize expects a 2-D map, got shape {a.shape}")
    h, w = a.shape
    if h < 1 or w < 1 or target_h < 1 or target_w < 1:
        raise ShapeError("bilinear_resize sizes must be >= 1")
    if (h, w) == (target_h, target_w):
        return a.copy()

    def axis_coords(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
        pos = np.clip(pos, 0.0, src - 1.0)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_coords(h, target_h)
    x0, x1, fx = axis_coords(w, target_w)
    a64 = a.astype(np.float64)
    top = a64[y0][:, x0] * (1 - fx) + a64[y0][:, x1] * fx
    bot = a64[y1][:, x0] * (1 - fx) + a64[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return as_f32(out)
