"""Value types and projection math shared by the rest of the package.

Conventions:
    camera frame  +x right, +y down, +z forward.
    model frame   origin at the 3D bounding-box centre, +z forward,
                  +y down (vertical axis), so a car standing on flat ground
                  with zero roll/pitch has its model y aligned with camera y.
    Euler angles  vehicle-axis yaw-pitch-roll, ``R = Ry(yaw) @ Rx(pitch) @ Rz(roll)``:
                  yaw about the vertical (y), pitch about the lateral (x),
                  roll about the longitudinal (z) axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    GimbalLockError,
    NonPositiveDepthError,
    PointBehindCameraError,
    ZeroRayError,
)

NUM_KEYPOINTS = 66
MIN_DEPTH = 1e-9

KEYPOINT_NAMES: tuple[str, ...] = (
    "top left corner of left front car light",
    "bottom left corner of left front car light",
    "top right corner of left front car light",
    "bottom right corner of left front car light",
    "top right corner of left front fog light",
    "bottom right corner of left front fog light",
    "front section of left front wheel",
    "center of left front wheel",
    "top right corner of front glass",
    "top left corner of left front door",
    "bottom left corner of left front door",
    "top right corner of left front door",
    "middle corner of left front door",
    "front corner of car handle of left front door",
    "rear corner of car handle of left front door",
    "bottom right corner of left front door",
    "top right corner of left rear door",
    "front corner of car handle of left rear door",
    "rear corner of car handle of left rear door",
    "bottom right corner of left rear door",
    "center of left rear wheel",
    "rear section of left rear wheel",
    "top left corner of left rear car light",
    "bottom left corner of left rear car light",
    "top left corner of rear glass",
    "top right corner of left rear car light",
    "bottom right corner of left rear car light",
    "bottom left corner of trunk",
    "left corner of rear bumper",
    "right corner of rear bumper",
    "bottom right corner of trunk",
    "bottom left corner of right rear car light",
    "top left corner of right rear car light",
    "top right corner of rear glass",
    "bottom right corner of right rear car light",
    "top right corner of right rear car light",
    "rear section of right rear wheel",
    "center of right rear wheel",
    "bottom left corner of right rear car door",
    "rear corner of car handle of right rear car door",
    "front corner of car handle of right rear car door",
    "top left corner of right rear car door",
    "bottom left corner of right front car door",
    "rear corner of car handle of right front car door",
    "front corner of car handle of right front car door",
    "middle corner of right front car door",
    "top left corner of right front car door",
    "bottom right corner of right front car door",
    "top right corner of right front car door",
    "top left corner of front glass",
    "center of right front wheel",
    "front section of right front wheel",
    "bottom left corner of right fog light",
    "top left corner of right fog light",
    "bottom left corner of right front car light",
    "top left corner of right front car light",
    "bottom right corner of right front car light",
    "top right corner of right front car light",
    "top right corner of front license plate",
    "top left corner of front license plate",
    "bottom left corner of front license plate",
    "bottom right corner of front license plate",
    "top left corner of rear license plate",
    "top right corner of rear license plate",
    "bottom right corner of rear license plate",
    "bottom left corner of rear license plate",
)


@dataclass(frozen=True)
class SurfaceTable:
    """Keypoint index sets for the four visible car surfaces.

    Indices 22 and 23 belong to no surface.
    """

    front: frozenset[int]
    left: frozenset[int]
    rear: frozenset[int]
    right: frozenset[int]

    def items(self) -> tuple[tuple[str, frozenset[int]], ...]:
        return (
            ("front", self.front),
            ("left", self.left),
            ("rear", self.rear),
            ("right", self.right),
        )

    def surface_of(self, k: int) -> str | None:
        for name, members in self.items():
            if k in members:
                return name
        return None


SURFACES = SurfaceTable(
    front=frozenset({0, 1, 2, 3, 4, 5, 6, 8, 49, 51, 52, 53, 54, 55, 56, 57, 58, 59, 60, 61}),
    left=frozenset({7, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21}),
    rear=frozenset({24, 25, 26, 27, 28, 29, 30, 31, 32, 33, 34, 35, 62, 63, 64, 65}),
    right=frozenset({36, 37, 38, 39, 40, 41, 42, 43, 44, 45, 46, 47, 48, 50}),
)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    ux: float
    uy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.ux < self.width and 0 <= self.uy < self.height):
            raise ValueError(
                f"principal point ({self.ux}, {self.uy}) outside a "
                f"{self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.ux], [0.0, self.fy, self.uy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class UnitQuaternion:
    """Rotation quaternion ``(w, x, y, z)``, normalised with ``w >= 0``."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if n == 0.0 or not math.isfinite(n):
            raise ValueError("quaternion must have finite nonzero norm")
        s = -1.0 / n if self.w < 0 else 1.0 / n
        object.__setattr__(self, "w", float(self.w * s))
        object.__setattr__(self, "x", float(self.x * s))
        object.__setattr__(self, "y", float(self.y * s))
        object.__setattr__(self, "z", float(self.z * s))

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_axis_angle(cls, axis: Sequence[float], angle: float) -> "UnitQuaternion":
        a = np.asarray(axis, dtype=float)
        n = np.linalg.norm(a)
        if n == 0.0:
            return cls.identity()
        a = a / n
        s = math.sin(angle / 2.0)
        return cls(math.cos(angle / 2.0), a[0] * s, a[1] * s, a[2] * s)

    @classmethod
    def from_rotvec(cls, rotvec: Sequence[float]) -> "UnitQuaternion":
        v = np.asarray(rotvec, dtype=float)
        return cls.from_axis_angle(v, float(np.linalg.norm(v)))

    @classmethod
    def from_matrix(cls, R: np.ndarray) -> "UnitQuaternion":
        R = np.asarray(R, dtype=float)
        tr = R[0, 0] + R[1, 1] + R[2, 2]
        # Shepperd: branch on the largest diagonal term for stability.
        if tr > 0:
            s = 2.0 * math.sqrt(tr + 1.0)
            return cls(0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s)
        if R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
            s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
            return cls((R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s)
        if R[1, 1] > R[2, 2]:
            s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
            return cls((R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s)
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        return cls((R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def __mul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        w0, x0, y0, z0 = self.w, self.x, self.y, self.z
        w1, x1, y1, z1 = other.w, other.x, other.y, other.z
        return UnitQuaternion(
            w0 * w1 - x0 * x1 - y0 * y1 - z0 * z1,
            w0 * x1 + x0 * w1 + y0 * z1 - z0 * y1,
            w0 * y1 - x0 * z1 + y0 * w1 + z0 * x1,
            w0 * z1 + x0 * y1 - y0 * x1 + z0 * w1,
        )

    def inverse(self) -> "UnitQuaternion":
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def rotate(self, v: Sequence[float]) -> np.ndarray:
        return self.as_matrix() @ np.asarray(v, dtype=float)


@dataclass(frozen=True)
class Pose:
    """Rigid transform taking model coordinates into the camera frame."""

    rotation: UnitQuaternion
    translation: tuple[float, float, float]

    def __post_init__(self):
        t = tuple(float(v) for v in self.translation)
        if len(t) != 3:
            raise ValueError("translation must have 3 components")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(UnitQuaternion.identity(), (0.0, 0.0, 0.0))

    @classmethod
    def from_rt(cls, R: np.ndarray, t: Sequence[float]) -> "Pose":
        return cls(UnitQuaternion.from_matrix(R), tuple(t))

    @property
    def R(self) -> np.ndarray:
        return self.rotation.as_matrix()

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform ``(3,)`` or ``(n, 3)`` model points into the camera frame."""
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.t

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation * other.rotation, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        qi = self.rotation.inverse()
        return Pose(qi, -(qi.as_matrix() @ self.t))


@dataclass(frozen=True, eq=False)
class CarModel:
    """Watertight triangle mesh with 66 semantic keypoints, in metres."""

    id: int
    name: str
    vertices: np.ndarray
    triangles: np.ndarray
    keypoints3d: np.ndarray
    height: float

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        k = np.ascontiguousarray(self.keypoints3d, dtype=np.float64)
        if k.shape != (NUM_KEYPOINTS, 3):
            raise ValueError(f"model {self.id}: expected 66 keypoints, got shape {k.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError(f"model {self.id}: triangle index out of range")
        if len(v):
            extent = float(v[:, 1].max() - v[:, 1].min())
            if abs(extent - self.height) > 1e-6:
                raise ValueError(
                    f"model {self.id}: height {self.height} does not match mesh y-extent {extent}"
                )
        for arr in (v, f, k):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        object.__setattr__(self, "keypoints3d", k)
        object.__setattr__(self, "height", float(self.height))


@dataclass(frozen=True, eq=False)
class KeypointObservation:
    """66 image keypoint slots with a labelled flag each."""

    xy: np.ndarray
    labelled: np.ndarray
    out_of_frame: np.ndarray = field(default=None)

    def __post_init__(self):
        xy = np.array(self.xy, dtype=np.float64).reshape(NUM_KEYPOINTS, 2)
        lab = np.array(self.labelled, dtype=bool).reshape(NUM_KEYPOINTS)
        oof = (
            np.zeros(NUM_KEYPOINTS, dtype=bool)
            if self.out_of_frame is None
            else np.array(self.out_of_frame, dtype=bool).reshape(NUM_KEYPOINTS)
        )
        xy[~lab] = 0.0
        for arr in (xy, lab, oof):
            arr.setflags(write=False)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "labelled", lab)
        object.__setattr__(self, "out_of_frame", oof)

    @classmethod
    def empty(cls) -> "KeypointObservation":
        return cls(np.zeros((NUM_KEYPOINTS, 2)), np.zeros(NUM_KEYPOINTS, dtype=bool))

    @classmethod
    def from_points(cls, points: dict[int, Sequence[float]]) -> "KeypointObservation":
        xy = np.zeros((NUM_KEYPOINTS, 2))
        lab = np.zeros(NUM_KEYPOINTS, dtype=bool)
        for k, p in points.items():
            xy[k] = p
            lab[k] = True
        return cls(xy, lab)

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.labelled)

    @property
    def count(self) -> int:
        return int(self.labelled.sum())

    def mean_xy(self) -> np.ndarray:
        return self.xy[self.labelled].mean(axis=0)

    def subset(self, keep: Sequence[int]) -> "KeypointObservation":
        lab = np.zeros(NUM_KEYPOINTS, dtype=bool)
        lab[list(keep)] = True
        return KeypointObservation(self.xy, lab & self.labelled)

    def in_frame(self, K: Intrinsics) -> bool:
        p = self.xy[self.labelled & ~self.out_of_frame]
        return bool(
            np.all((p[:, 0] >= 0) & (p[:, 0] < K.width) & (p[:, 1] >= 0) & (p[:, 1] < K.height))
        )


def project(K: Intrinsics, p: Pose, x3: Sequence[float]) -> np.ndarray:
    X, Y, Z = p.apply(np.asarray(x3, dtype=float))
    if Z <= MIN_DEPTH:
        raise PointBehindCameraError(f"point at camera depth {Z} is behind the camera")
    return np.array([K.fx * X / Z + K.ux, K.fy * Y / Z + K.uy])


def project_points(K: Intrinsics, p: Pose, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection.

    Returns ``(uv, valid)`` where ``valid`` is False for points at or
    behind the camera; their ``uv`` entries are NaN.
    """
    cam = p.apply(np.asarray(pts, dtype=float).reshape(-1, 3))
    Z = cam[:, 2]
    valid = Z > MIN_DEPTH
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * cam[:, 0] / Z + K.ux, K.fy * cam[:, 1] / Z + K.uy], axis=1)
    uv[~valid] = np.nan
    return uv, valid


def backproject(K: Intrinsics, pixel: Sequence[float], d: float) -> np.ndarray:
    if not d > 0:
        raise NonPositiveDepthError(f"depth must be positive, got {d}")
    x, y = pixel
    return np.array([d * (x - K.ux) / K.fx, d * (y - K.uy) / K.fy, d])


def rotation_distance(q1: UnitQuaternion, q2: UnitQuaternion) -> float:
    """``arccos(|q1 . q2|)``; half the geodesic angle between the rotations."""
    dot = q1.w * q2.w + q1.x * q2.x + q1.y * q2.y + q1.z * q2.z
    return math.acos(min(1.0, max(-1.0, abs(dot))))


def geodesic_angle(q1: UnitQuaternion, q2: UnitQuaternion) -> float:
    """Full rotation angle of ``q1^-1 q2`` in radians."""
    return 2.0 * rotation_distance(q1, q2)


def _ray_rotation(center_ray: Sequence[float]) -> UnitQuaternion:
    r = np.asarray(center_ray, dtype=float)
    n = np.linalg.norm(r)
    if n == 0.0 or not np.isfinite(n):
        raise ZeroRayError("centre ray must be a finite nonzero vector")
    r = r / n
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, r)
    s = np.linalg.norm(axis)
    angle = math.atan2(s, float(r[2]))
    if s < 1e-15:
        # r is +z or -z; any perpendicular axis works for the half turn.
        return UnitQuaternion.identity() if r[2] > 0 else UnitQuaternion(0.0, 1.0, 0.0, 0.0)
    return UnitQuaternion.from_axis_angle(axis, angle)


def allocentric_to_egocentric(alloc: UnitQuaternion, center_ray: Sequence[float]) -> UnitQuaternion:
    """Compose an allocentric rotation with the rotation taking +z onto the centre ray."""
    return _ray_rotation(center_ray) * alloc


def egocentric_to_allocentric(ego: UnitQuaternion, center_ray: Sequence[float]) -> UnitQuaternion:
    return _ray_rotation(center_ray).inverse() * ego


def rotation_from_euler(roll: float, pitch: float, yaw: float) -> UnitQuaternion:
    qy = UnitQuaternion.from_axis_angle((0.0, 1.0, 0.0), yaw)
    qx = UnitQuaternion.from_axis_angle((1.0, 0.0, 0.0), pitch)
    qz = UnitQuaternion.from_axis_angle((0.0, 0.0, 1.0), roll)
    return qy * qx * qz


def euler_from_matrix(R: np.ndarray) -> tuple[float, float, float]:
    """``(roll, pitch, yaw)`` of a rotation matrix ``Ry(yaw) Rx(pitch) Rz(roll)``."""
    s = -R[1, 2]
    if abs(s) >= math.sin(math.pi / 2 - 1e-6):
        raise GimbalLockError(f"pitch too close to +-pi/2 (sin = {s:.12f})")
    pitch = math.asin(s)
    roll = math.atan2(R[1, 0], R[1, 1])
    yaw = math.atan2(R[0, 2], R[2, 2])
    return roll, pitch, yaw


def euler_from_rotation(q: UnitQuaternion) -> tuple[float, float, float]:
    return euler_from_matrix(q.as_matrix())


def euler_from_pose(p: Pose) -> tuple[float, float, float]:
    """``(roll, pitch, yaw)`` of the pose rotation, see module conventions."""
    return euler_from_rotation(p.rotation)


def pose_from_euler(roll: float, pitch: float, yaw: float, translation: Sequence[float]) -> Pose:
    return Pose(rotation_from_euler(roll, pitch, yaw), tuple(translation))
