"""Triangle rasterisation front end over the selected kernel backend."""

from __future__ import annotations

import numpy as np

from . import kernels
from .geometry import CarModel, Intrinsics, Pose

NEAR_PLANE = 0.05


def fill_triangles(xy: np.ndarray, tris: np.ndarray, height: int, width: int,
                   out: np.ndarray | None = None) -> np.ndarray:
    """Binary coverage of the given 2D triangles, pixel centres at ``j + 0.5``."""
    if out is None:
        out = np.zeros((height, width), dtype=np.uint8)
    kernels.active().fill_triangles(
        np.ascontiguousarray(xy, dtype=np.float64),
        np.ascontiguousarray(tris, dtype=np.int32),
        out,
    )
    return out


def zbuffer_triangles(xy, inv_depth, tris, instance_id, depth, ids) -> None:
    kernels.active().zbuffer_triangles(
        np.ascontiguousarray(xy, dtype=np.float64),
        np.ascontiguousarray(inv_depth, dtype=np.float64),
        np.ascontiguousarray(tris, dtype=np.int32),
        int(instance_id),
        depth,
        ids,
    )


def _project_mesh(K: Intrinsics, model: CarModel, pose: Pose):
    cam = pose.apply(model.vertices)
    z = cam[:, 2]
    front = z > NEAR_PLANE
    safe = np.where(front, z, 1.0)
    xy = np.stack([K.fx * cam[:, 0] / safe + K.ux, K.fy * cam[:, 1] / safe + K.uy], axis=1)
    tris = model.triangles
    keep = front[tris].all(axis=1)
    return xy, 1.0 / safe, tris[keep]


def render_silhouette(K: Intrinsics, model: CarModel, pose: Pose) -> np.ndarray:
    """Perspective silhouette of one model as a bool image.

    Triangles with any vertex closer than ``NEAR_PLANE`` are dropped.
    """
    xy, _, tris = _project_mesh(K, model, pose)
    return fill_triangles(xy, tris, K.height, K.width).astype(bool)


def render_ids(K: Intrinsics, items) -> tuple[np.ndarray, np.ndarray]:
    """Instance-id and depth buffers for ``items`` = iterable of (id, model, pose).

    Background pixels have id -1 and depth +inf.
    """
    depth = np.full((K.height, K.width), np.inf)
    ids = np.full((K.height, K.width), -1, dtype=np.int32)
    for inst, model, pose in items:
        xy, inv_z, tris = _project_mesh(K, model, pose)
        zbuffer_triangles(xy, inv_z, tris, inst, depth, ids)
    return ids, depth
