"""Silhouette-based shape similarity between car models.

Models are rendered orthographically from a ring of yaw angles onto a
square image with a fixed metric scale (``FRAME_METERS`` across 90% of the
frame), so absolute size differences lower the score. The similarity of
two models is the mean silhouette IoU over the ring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyMeshError, EmptySilhouetteError, UnknownShapeError
from .geometry import CarModel
from .raster import fill_triangles

DEFAULT_RESOLUTION = 1280
DEFAULT_VIEWS = 100
FRAME_METERS = 7.0
FRAME_FILL = 0.9
PROJECTION = "orthographic"


def pixels_per_meter(resolution: int = DEFAULT_RESOLUTION) -> float:
    return FRAME_FILL * resolution / FRAME_METERS


def _canonical_yaw(yaw: float) -> float:
    # yaw and yaw + 2k*pi must give the same trig values bit for bit
    return round(yaw % (2.0 * math.pi), 12)


def render_silhouette(model: CarModel, yaw: float, resolution: int = DEFAULT_RESOLUTION) -> np.ndarray:
    """Orthographic side-orbit silhouette as a ``(resolution, resolution)`` bool image.

    The model is turned by ``yaw`` about its vertical axis and viewed along
    -z with y up; the model origin lands on the image centre.
    """
    if len(model.vertices) == 0 or len(model.triangles) == 0:
        raise EmptyMeshError(f"model {model.id} has no geometry")
    a = _canonical_yaw(yaw)
    c, s = math.cos(a), math.sin(a)
    v = model.vertices
    x = c * v[:, 0] + s * v[:, 2]
    scale = pixels_per_meter(resolution)
    half = resolution / 2.0
    # model y points down, which is also image-row direction
    xy = np.stack([half + scale * x, half + scale * v[:, 1]], axis=1)
    return fill_triangles(xy, model.triangles, resolution, resolution).astype(bool)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def view_yaws(views: int = DEFAULT_VIEWS) -> np.ndarray:
    return 2.0 * math.pi * np.arange(views) / views


def hull_similarity(model_a: CarModel, model_b: CarModel, views: int = DEFAULT_VIEWS,
                    resolution: int = DEFAULT_RESOLUTION) -> float:
    total = 0.0
    for yaw in view_yaws(views):
        total += iou(render_silhouette(model_a, yaw, resolution),
                     render_silhouette(model_b, yaw, resolution))
    return total / views


@dataclass(frozen=True, eq=False)
class SimilarityTable:
    """Symmetric model-pair similarity lookup, indexed by model id."""

    ids: tuple[int, ...]
    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "_pos", {m: i for i, m in enumerate(self.ids)})

    def __call__(self, a: int, b: int) -> float:
        try:
            return float(self.matrix[self._pos[a], self._pos[b]])
        except KeyError as exc:
            raise UnknownShapeError(f"unknown shape id {exc.args[0]}") from None

    def __contains__(self, model_id: int) -> bool:
        return model_id in self._pos

    @classmethod
    def identity(cls, ids: Sequence[int]) -> "SimilarityTable":
        return cls(tuple(ids), np.eye(len(ids)))


def similarity_table(library: Sequence[CarModel], views: int = DEFAULT_VIEWS,
                     resolution: int = DEFAULT_RESOLUTION,
                     other: Sequence[CarModel] | None = None) -> np.ndarray | SimilarityTable:
    """Pairwise hull similarity.

    With ``other=None`` returns a :class:`SimilarityTable` over ``library``;
    otherwise the ``len(library) x len(other)`` matrix. Views are the outer
    loop so only one silhouette per model is held in memory at a time, and
    the per-view sums are accumulated in fixed view order.
    """
    cols = library if other is None else other
    acc = np.zeros((len(library), len(cols)))
    for yaw in view_yaws(views):
        rows_img = [render_silhouette(m, yaw, resolution) for m in library]
        col_img = rows_img if other is None else [render_silhouette(m, yaw, resolution) for m in cols]
        for i, a in enumerate(rows_img):
            for j, b in enumerate(col_img):
                if other is None and j < i:
                    continue
                acc[i, j] += iou(a, b)
    acc /= views
    if other is not None:
        return acc
    acc = np.triu(acc) + np.triu(acc, 1).T
    return SimilarityTable(tuple(m.id for m in library), acc)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Set pixels with at least one unset 4-neighbour (image border counts as unset)."""
    m = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1),
                                      border_value=0)
    return m & ~interior


def directed_chamfer(src: np.ndarray, dst: np.ndarray) -> float:
    """Mean distance from each boundary pixel of ``src`` to the nearest of ``dst``."""
    bs, bd = boundary(src), boundary(dst)
    dist = ndimage.distance_transform_edt(~bd)
    return float(dist[bs].mean())


def boundary_offset(sil_a: np.ndarray, sil_b: np.ndarray) -> float:
    """Symmetric mean nearest-contour distance between two silhouettes, in pixels."""
    a = np.asarray(sil_a, dtype=bool)
    b = np.asarray(sil_b, dtype=bool)
    if not a.any() or not b.any():
        raise EmptySilhouetteError("boundary offset needs two non-empty silhouettes")
    # crop to the union's bounding box plus a one-pixel margin: every boundary
    # pixel and every nearest-boundary target lies inside, so the result is exact
    rows = np.flatnonzero((a | b).any(axis=1))
    cols = np.flatnonzero((a | b).any(axis=0))
    r0, r1 = max(rows[0] - 1, 0), min(rows[-1] + 2, a.shape[0])
    c0, c1 = max(cols[0] - 1, 0), min(cols[-1] + 2, a.shape[1])
    a, b = a[r0:r1, c0:c1], b[r0:r1, c0:c1]
    return 0.5 * (directed_chamfer(a, b) + directed_chamfer(b, a))
