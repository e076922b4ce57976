"""Built-in synthetic car models.

Each car is a side profile polygon extruded across the car width, giving a
closed, consistently wound mesh. The 66 keypoints are placed on the mesh
surface (side planes, front/rear faces, roof edges) following their
semantic names. Coordinates use the model frame from ``geometry``; heights
above ground ``e`` map to ``y = height / 2 - e``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import NUM_KEYPOINTS, CarModel

DEFAULT_HEIGHT = 1.45
WHEEL_RADIUS = 0.33


@dataclass(frozen=True)
class CarShape:
    length: float
    width: float
    height: float = DEFAULT_HEIGHT
    hood_length: float = 1.0
    windshield_length: float = 0.8
    trunk_length: float = 0.7
    rear_window_length: float = 0.6
    hood_front: float = 0.78
    belt: float = 0.95
    rear_top: float = 0.95
    overhang_front: float = 0.9
    overhang_rear: float = 0.9


SHAPES: dict[str, CarShape] = {
    "compact": CarShape(length=3.95, width=1.70, hood_length=0.8, windshield_length=0.75,
                        trunk_length=0.25, rear_window_length=0.45, overhang_front=0.75,
                        overhang_rear=0.6, rear_top=1.0),
    "sedan": CarShape(length=4.70, width=1.80),
    "wagon": CarShape(length=4.80, width=1.82, hood_length=0.95, trunk_length=0.2,
                      rear_window_length=0.3, overhang_rear=1.0, rear_top=1.05),
    "coupe": CarShape(length=4.40, width=1.85, hood_length=1.2, windshield_length=1.0,
                      trunk_length=0.55, rear_window_length=0.9, hood_front=0.72),
    "limo": CarShape(length=5.20, width=1.92, hood_length=1.15, trunk_length=0.9,
                     rear_window_length=0.55, overhang_front=1.0, overhang_rear=1.05),
}


def _profile(s: CarShape) -> np.ndarray:
    """Side polygon as (z, e) pairs, counter-clockwise when seen from +x."""
    L, H = s.length, s.height
    z_ws = L / 2 - s.hood_length
    z_rf = z_ws - s.windshield_length
    z_tr = -L / 2 + s.trunk_length
    z_rr = z_tr + s.rear_window_length
    if not z_rr < z_rf:
        raise ValueError("car shape leaves no roof")
    return np.array(
        [
            (L / 2, 0.0),
            (L / 2, s.hood_front),
            (z_ws, s.belt),
            (z_rf, H),
            (z_rr, H),
            (z_tr, s.rear_top),
            (-L / 2, s.rear_top),
            (-L / 2, 0.0),
        ]
    )


def _top_at(profile: np.ndarray, z: float) -> float:
    """Upper profile height at longitudinal position ``z``."""
    upper = profile[1:7][::-1]  # increasing z
    return float(np.interp(z, upper[:, 0], upper[:, 1]))


def _extrude(profile: np.ndarray, width: float, height: float):
    n = len(profile)
    hub = np.array([profile[:, 0].mean(), 0.25 * min(profile[1, 1], profile[6, 1])])
    # fan triangulation from ``hub`` is valid only if every fan triangle keeps
    # the polygon's orientation
    for i in range(n):
        a, b = profile[i] - hub, profile[(i + 1) % n] - hub
        if a[0] * b[1] - a[1] * b[0] <= 0:
            raise ValueError("profile is not star-shaped about its fan hub")

    def y(e):
        return height / 2 - e

    verts = []
    for side in (-1.0, 1.0):
        x = side * width / 2
        verts.append((x, y(hub[1]), hub[0]))
        verts.extend((x, y(e), z) for z, e in profile)
    verts = np.array(verts)
    left_hub, right_hub = 0, n + 1
    tris = []
    for i in range(n):
        j = (i + 1) % n
        li, lj = 1 + i, 1 + j
        ri, rj = n + 2 + i, n + 2 + j
        tris.append((left_hub, lj, li))
        tris.append((right_hub, ri, rj))
        tris.append((li, lj, rj))
        tris.append((li, rj, ri))
    return verts, np.array(tris, dtype=np.int32)


def _keypoints(s: CarShape, profile: np.ndarray) -> np.ndarray:
    L, W, H, r = s.length, s.width, s.height, WHEEL_RADIUS
    xl, xr = -W / 2, W / 2
    zf, zb = L / 2, -L / 2
    z_wf = L / 2 - s.overhang_front
    z_wr = -L / 2 + s.overhang_rear
    z_rf = profile[3, 0]
    z_rr = profile[4, 0]
    z_d0 = z_wf - r - 0.05
    z_d2 = z_wr + r + 0.05

    def top(z):
        return min(s.belt + 0.35, _top_at(profile, z) - 0.05)

    lt, lb = 0.70, 0.55  # front light top/bottom
    rt, rb = s.rear_top - 0.05, s.rear_top - 0.25  # rear light
    g = 0.15  # glass corner inset
    kp = {
        0: (xl + 0.10, lt, zf), 1: (xl + 0.10, lb, zf),
        2: (xl + 0.45, lt, zf), 3: (xl + 0.45, lb, zf),
        4: (xl + 0.30, 0.35, zf), 5: (xl + 0.30, 0.25, zf),
        6: (xl, r, z_wf + r), 7: (xl, r, z_wf),
        8: (xl + g, H, z_rf),
        9: (xl, top(z_d0), z_d0), 10: (xl, 0.30, z_d0), 11: (xl, top(0.0), 0.0),
        12: (xl, 0.90, z_d0), 13: (xl, 0.90, 0.35), 14: (xl, 0.90, 0.20),
        15: (xl, 0.30, 0.0), 16: (xl, top(z_d2), z_d2),
        17: (xl, 0.90, z_d2 + 0.35), 18: (xl, 0.90, z_d2 + 0.20), 19: (xl, 0.30, z_d2),
        20: (xl, r, z_wr), 21: (xl, r, z_wr - r),
        22: (xl + 0.10, rt, zb), 23: (xl + 0.10, rb, zb),
        24: (xl + g, H, z_rr),
        25: (xl + 0.40, rt, zb), 26: (xl + 0.40, rb, zb),
        27: (-0.55, 0.55, zb), 28: (xl + 0.05, 0.35, zb), 29: (xr - 0.05, 0.35, zb),
        30: (0.55, 0.55, zb),
        31: (xr - 0.40, rb, zb), 32: (xr - 0.40, rt, zb), 33: (xr - g, H, z_rr),
        34: (xr - 0.10, rb, zb), 35: (xr - 0.10, rt, zb),
        36: (xr, r, z_wr - r), 37: (xr, r, z_wr),
        38: (xr, 0.30, z_d2), 39: (xr, 0.90, z_d2 + 0.20), 40: (xr, 0.90, z_d2 + 0.35),
        41: (xr, top(z_d2), z_d2),
        42: (xr, 0.30, 0.0), 43: (xr, 0.90, 0.20), 44: (xr, 0.90, 0.35),
        45: (xr, 0.90, z_d0), 46: (xr, top(0.0), 0.0), 47: (xr, 0.30, z_d0),
        48: (xr, top(z_d0), z_d0),
        49: (xr - g, H, z_rf), 50: (xr, r, z_wf), 51: (xr, r, z_wf + r),
        52: (xr - 0.30, 0.25, zf), 53: (xr - 0.30, 0.35, zf),
        54: (xr - 0.45, lb, zf), 55: (xr - 0.45, lt, zf),
        56: (xr - 0.10, lb, zf), 57: (xr - 0.10, lt, zf),
        58: (0.25, 0.45, zf), 59: (-0.25, 0.45, zf), 60: (-0.25, 0.30, zf), 61: (0.25, 0.30, zf),
        62: (-0.25, 0.52, zb), 63: (0.25, 0.52, zb), 64: (0.25, 0.40, zb), 65: (-0.25, 0.40, zb),
    }
    out = np.zeros((NUM_KEYPOINTS, 3))
    for k, (x, e, z) in kp.items():
        out[k] = (x, H / 2 - e, z)
    return out


def make_car_model(model_id: int, name: str, shape: CarShape) -> CarModel:
    profile = _profile(shape)
    verts, tris = _extrude(profile, shape.width, shape.height)
    return CarModel(
        id=model_id,
        name=name,
        vertices=verts,
        triangles=tris,
        keypoints3d=_keypoints(shape, profile),
        height=shape.height,
    )


def default_library() -> list[CarModel]:
    return [make_car_model(i, name, shape) for i, (name, shape) in enumerate(SHAPES.items())]


def box_model(model_id: int = 0, size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0),
              name: str = "box") -> CarModel:
    """Axis-aligned box mesh; keypoints are box corners cycled over 66 slots.

    Used as an analytic test object, not as a car.
    """
    sx, sy, sz = (v / 2 for v in size)
    c = np.asarray(center, dtype=float)
    corners = np.array(
        [(x, y, z) for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)]
    ) + c
    # corner index bits: x=4, y=2, z=1; faces wound outward
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # -x, +x
        (0, 4, 5, 1), (2, 3, 7, 6),  # -y, +y
        (0, 2, 6, 4), (1, 5, 7, 3),  # -z, +z
    ]
    tris = []
    for a, b, cc, d in quads:
        tris.append((a, b, cc))
        tris.append((a, cc, d))
    kps = corners[np.arange(NUM_KEYPOINTS) % 8]
    return CarModel(model_id, name, corners, np.array(tris, dtype=np.int32), kps, float(size[1]))
