"""Per-instance aggregation of dense per-pixel predictions.

Fields are numpy arrays of shape ``(h, w)`` or ``(h, w, c)``; masks are
``(h, w)`` bool. Pixel ``(row i, col j)`` has image coordinate
``(x, y) = (j, i)`` (integer pixel positions, matching the keypoint and
projection convention). All reductions run in row-major pixel order.

Offset convention: stored 2D offsets and relative depths point *at* the
object centre (``centre - pixel`` and ``d_c - d``), so the centre is
recovered by adding the attention-weighted offsets to the pixel values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMaskError, PointBehindCameraError, ZeroAttentionError
from .geometry import MIN_DEPTH, Intrinsics

DEPTH_MIN = 1.0
DEPTH_MAX = 100.0


def _weights(mask: np.ndarray, attention: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMaskError("instance mask has no set pixels")
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim == 3:
        a = a[..., 0]
    w = np.where(m, a, 0.0)
    if np.any(w < 0):
        raise ValueError("attention must be non-negative")
    total = w[m].sum()
    if not total > 0:
        raise ZeroAttentionError("attention has no mass inside the mask")
    return w / total


def _pool(values: np.ndarray, weights: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # flattened row-major selection keeps the summation order fixed
    sel = np.asarray(mask, dtype=bool).reshape(-1)
    w = weights.reshape(-1)[sel]
    v = values.reshape(sel.size, -1)[sel]
    out = np.zeros(v.shape[1])
    for k in range(v.shape[1]):
        out[k] = math.fsum(w * v[:, k])
    return out


def mask_pool(logits: np.ndarray, mask: np.ndarray, attention: np.ndarray) -> np.ndarray:
    """Attention-weighted sum of a ``(h, w, b)`` field over one instance mask.

    Attention is renormalised to unit mass inside the mask.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 2:
        logits = logits[..., None]
    return _pool(logits, _weights(mask, attention), mask)


def pixel_grid(height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


def amodal_center(K: Intrinsics, center3d) -> tuple[np.ndarray, float]:
    cx, cy, cz = (float(v) for v in center3d)
    if cz <= MIN_DEPTH:
        raise PointBehindCameraError(f"centre depth {cz} is behind the camera")
    return np.array([K.fx * cx / cz + K.ux, K.fy * cy / cz + K.uy]), cz


def make_offset_field(K: Intrinsics, mask: np.ndarray, depth: np.ndarray,
                      center3d) -> tuple[np.ndarray, np.ndarray]:
    """Centre-pointing 2D offsets ``(h, w, 2)`` and relative depths ``(h, w)``.

    Outside the mask both fields are zero.
    """
    mask = np.asarray(mask, dtype=bool)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 3:
        depth = depth[..., 0]
    if np.any(depth[mask] <= 0):
        raise ValueError("depth must be positive inside the mask")
    ca, dc = amodal_center(K, center3d)
    grid = pixel_grid(*mask.shape)
    offset = np.where(mask[..., None], ca - grid, 0.0)
    reldepth = np.where(mask, dc - depth, 0.0)
    return offset, reldepth


def recover_center(offset2d: np.ndarray, reldepth: np.ndarray, depth: np.ndarray,
                   mask: np.ndarray, attention: np.ndarray) -> tuple[np.ndarray, float]:
    """Amodal centre ``(x, y)`` in pixels and centre depth in metres."""
    mask = np.asarray(mask, dtype=bool)
    w = _weights(mask, attention)
    grid = pixel_grid(*mask.shape)
    votes = grid + np.asarray(offset2d, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64).reshape(mask.shape)
    dvotes = depth + np.asarray(reldepth, dtype=np.float64).reshape(mask.shape)
    ca = _pool(votes, w, mask)
    dc = _pool(dvotes[..., None], w, mask)[0]
    return ca, float(dc)


@dataclass(frozen=True)
class DepthBins:
    """Log-uniform ("space-increasing") depth discretisation."""

    count: int
    d_min: float = DEPTH_MIN
    d_max: float = DEPTH_MAX

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("need at least 2 depth bins")
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")

    @property
    def edges(self) -> np.ndarray:
        lo, hi = math.log(self.d_min), math.log(self.d_max)
        e = np.exp(lo + np.arange(self.count + 1) / self.count * (hi - lo))
        e[0], e[-1] = self.d_min, self.d_max
        return e

    def encode(self, d: float) -> tuple[int, bool]:
        """Bin index of ``d`` and whether it had to be clamped into range."""
        clamped = not (self.d_min <= d <= self.d_max)
        d = min(max(d, self.d_min), self.d_max)
        lo, hi = math.log(self.d_min), math.log(self.d_max)
        idx = int(math.floor((math.log(d) - lo) / (hi - lo) * self.count))
        return min(max(idx, 0), self.count - 1), clamped

    def decode(self, index: int) -> float:
        if not 0 <= index < self.count:
            raise IndexError(f"bin {index} outside [0, {self.count})")
        e = self.edges
        return math.sqrt(e[index] * e[index + 1])


def depth_bins_encode(d: float, b: int) -> tuple[int, bool]:
    return DepthBins(b).encode(d)


def depth_bins_decode(index: int, b: int) -> float:
    return DepthBins(b).decode(index)
