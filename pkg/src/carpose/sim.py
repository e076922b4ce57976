"""Synthetic multi-car scenes with known poses, keypoints and instance masks.

Cars stand on a flat ground plane ``CAMERA_HEIGHT`` metres below the
camera (camera y points down, so the plane is ``y = CAMERA_HEIGHT``) with
zero roll and pitch. Yaw follows a two-mode mixture (driving away / towards
the camera). Keypoint visibility combines two tests:

* a ray cast from the camera centre to the keypoint against every triangle
  in the scene (the car's own mesh included, which handles self-occlusion);
* an instance-id buffer check: the car's own id must appear within
  ``VISIBILITY_TOLERANCE_PX`` of the keypoint pixel.

The ray cast is exact for points on the mesh surface; the id check ties
the visible set to the rendered masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptySilhouetteError, PlacementError
from .geometry import NUM_KEYPOINTS, CarModel, Intrinsics, KeypointObservation, Pose, pose_from_euler
from .raster import render_ids, render_silhouette

CAMERA_HEIGHT = 1.5
DEPTH_RANGE = (5.0, 150.0)
LATERAL_RANGE = 20.0
YAW_SIGMA = 0.35
VISIBILITY_TOLERANCE_PX = 2
# the visibility ray stops this far short of the keypoint so the keypoint's
# own face never counts as an occluder
RAY_SHORTENING_M = 0.01


def default_intrinsics() -> Intrinsics:
    return Intrinsics(fx=1000.0, fy=1000.0, ux=640.0, uy=480.0, width=1280, height=960)


@dataclass(frozen=True)
class SceneSpec:
    """Sampling parameters for one synthetic scene."""

    seed: int
    n_cars: int
    intrinsics: Intrinsics = field(default_factory=default_intrinsics)
    camera_height: float = CAMERA_HEIGHT
    yaw_sigma: float = YAW_SIGMA
    depth_range: tuple[float, float] = DEPTH_RANGE
    lateral_range: float = LATERAL_RANGE
    noise_sigma: float = 0.0
    drop_rate: float = 0.0

    def __post_init__(self):
        if self.n_cars < 1:
            raise ValueError("n_cars must be at least 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop_rate must lie in [0, 1)")
        lo, hi = self.depth_range
        if not 0 < lo <= hi:
            raise ValueError("depth_range must satisfy 0 < lo <= hi")


@dataclass(frozen=True, eq=False)
class SimCar:
    model_id: int
    pose: Pose
    observation: KeypointObservation
    visible: np.ndarray  # visibility before noise and drops


@dataclass(frozen=True, eq=False)
class SceneTruth:
    """Generated scene. Car ``i`` is drawn with instance id ``i``."""

    cars: tuple[SimCar, ...]
    camera: Intrinsics
    seed: int
    id_buffer: np.ndarray
    library: tuple[CarModel, ...]

    def mask(self, index: int) -> np.ndarray:
        return self.id_buffer == index

    def model(self, index: int) -> CarModel:
        mid = self.cars[index].model_id
        return next(m for m in self.library if m.id == mid)


def _sample_yaw(rng: np.random.Generator, sigma: float) -> float:
    mode = 0.0 if rng.random() < 0.5 else math.pi
    yaw = mode + sigma * rng.standard_normal()
    return math.remainder(yaw, 2.0 * math.pi)


def _aabb(model: CarModel, pose: Pose) -> np.ndarray:
    v = pose.apply(model.vertices)
    return np.stack([v.min(axis=0), v.max(axis=0)])


def _overlaps(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(np.all(a[0] < b[1]) and np.all(b[0] < a[1]))


def _place_cars(spec: SceneSpec, library: Sequence[CarModel], rng: np.random.Generator):
    K = spec.intrinsics
    half_fov = min(K.ux, K.width - K.ux) / K.fx
    placed: list[tuple[CarModel, Pose, np.ndarray]] = []
    rejections = 0
    while len(placed) < spec.n_cars:
        model = library[int(rng.integers(len(library)))]
        yaw = _sample_yaw(rng, spec.yaw_sigma)
        z = rng.uniform(*spec.depth_range)
        x_max = min(spec.lateral_range, z * half_fov)
        x = rng.uniform(-x_max, x_max)
        y = spec.camera_height - model.height / 2.0
        pose = pose_from_euler(0.0, 0.0, yaw, (x, y, z))
        box = _aabb(model, pose)
        if any(_overlaps(box, other) for _, _, other in placed):
            rejections += 1
            if rejections >= 10 * spec.n_cars:
                raise PlacementError(
                    f"could not place {spec.n_cars} cars after {rejections} rejected samples"
                )
            continue
        placed.append((model, pose, box))
    return placed


def _segment_hits(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """For segments from the origin to each point, whether any triangle is hit.

    Moller-Trumbore with the segment parameter restricted to ``(0, 1)``.
    ``points`` is ``(n, 3)``; ``tri`` is ``(m, 3, 3)``.
    """
    if len(tri) == 0 or len(points) == 0:
        return np.zeros(len(points), dtype=bool)
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    d = points[:, None, :]  # origin is the camera centre
    p = np.cross(d, e2[None])
    det = np.einsum("nmk,mk->nm", p, e1)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = -v0[None]  # origin - v0
    u = np.einsum("nmk,nmk->nm", np.broadcast_to(s, p.shape), p) * inv
    q = np.cross(np.broadcast_to(s, p.shape), e1[None])
    v = np.einsum("nmk,nmk->nm", np.broadcast_to(d, q.shape), q) * inv
    t = np.einsum("nmk,mk->nm", q, e2) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0) & (t < 1)
    return hit.any(axis=1)


def _id_window_hit(ids: np.ndarray, xy: np.ndarray, inst: int, tol: int) -> np.ndarray:
    h, w = ids.shape
    out = np.zeros(len(xy), dtype=bool)
    for i, (x, y) in enumerate(xy):
        c, r = int(math.floor(x)), int(math.floor(y))
        win = ids[max(r - tol, 0):min(r + tol + 1, h), max(c - tol, 0):min(c + tol + 1, w)]
        out[i] = bool((win == inst).any())
    return out


def generate_scene(spec: SceneSpec, library: Sequence[CarModel]) -> SceneTruth:
    """Sample, render and observe one scene; deterministic for ``spec.seed``."""
    if len(library) == 0:
        raise ValueError("library must not be empty")
    K = spec.intrinsics
    rng = np.random.default_rng(spec.seed)
    placed = _place_cars(spec, library, rng)
    ids, _ = render_ids(K, [(i, m, p) for i, (m, p, _) in enumerate(placed)])
    world_tris = np.concatenate([p.apply(m.vertices)[m.triangles] for m, p, _ in placed])

    cars = []
    for i, (model, pose, _) in enumerate(placed):
        cam = pose.apply(model.keypoints3d)
        z = cam[:, 2]
        uv = np.stack([K.fx * cam[:, 0] / z + K.ux, K.fy * cam[:, 1] / z + K.uy], axis=1)
        in_frame = (uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
        norms = np.linalg.norm(cam, axis=1, keepdims=True)
        ends = cam * (1.0 - RAY_SHORTENING_M / norms)
        visible = in_frame.copy()
        cand = np.flatnonzero(visible)
        visible[cand] = ~_segment_hits(ends[cand], world_tris)
        cand = np.flatnonzero(visible)
        visible[cand] = _id_window_hit(ids, uv[cand], i, VISIBILITY_TOLERANCE_PX)

        noisy = uv + spec.noise_sigma * rng.standard_normal(uv.shape)
        keep = visible & (rng.random(NUM_KEYPOINTS) >= spec.drop_rate)
        keep &= (noisy[:, 0] >= 0) & (noisy[:, 0] < K.width) & (noisy[:, 1] >= 0) & (noisy[:, 1] < K.height)
        visible.setflags(write=False)
        cars.append(SimCar(model.id, pose, KeypointObservation(noisy, keep), visible))
    return SceneTruth(tuple(cars), K, spec.seed, ids, tuple(library))


def scene_seed(seed: int, index: int) -> int:
    """Seed of the ``index``-th scene in a batch derived from ``seed``."""
    return seed ^ index


def occlusion_ratio(index: int, truth: SceneTruth) -> float:
    """Fraction of a car's stand-alone silhouette hidden by other cars."""
    car = truth.cars[index]
    solo = render_silhouette(truth.camera, truth.model(index), car.pose)
    total = int(np.count_nonzero(solo))
    if total == 0:
        raise EmptySilhouetteError(f"car {index} has an empty silhouette")
    return 1.0 - np.count_nonzero(truth.mask(index)) / total
