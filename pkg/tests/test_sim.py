import math

import numpy as np
import pytest

from carpose.errors import PlacementError
from carpose.geometry import euler_from_pose, project_points
from carpose.sim import (
    CAMERA_HEIGHT,
    SceneSpec,
    _segment_hits,
    generate_scene,
    occlusion_ratio,
    scene_seed,
)


@pytest.fixture(scope="module")
def truth():
    from carpose.library import default_library
    return generate_scene(SceneSpec(seed=11, n_cars=10), default_library())


def test_cars_stand_on_ground(truth):
    for i, car in enumerate(truth.cars):
        roll, pitch, _ = euler_from_pose(car.pose)
        assert abs(roll) < 1e-12 and abs(pitch) < 1e-12
        assert math.isclose(car.pose.translation[1] + truth.model(i).height / 2, CAMERA_HEIGHT)
        assert 5.0 <= car.pose.translation[2] <= 150.0


def test_noiseless_keypoints_are_exact_projections(truth):
    for i, car in enumerate(truth.cars):
        uv, _ = project_points(truth.camera, car.pose, truth.model(i).keypoints3d)
        idx = car.observation.indices
        np.testing.assert_allclose(car.observation.xy[idx], uv[idx], atol=1e-9)
        assert np.array_equal(car.observation.labelled, car.visible)


def test_visible_keypoints_lie_on_own_mask(truth):
    for i, car in enumerate(truth.cars):
        m = truth.mask(i)
        for x, y in car.observation.xy[car.observation.labelled]:
            r, c = int(y), int(x)
            assert m[max(r - 2, 0):r + 3, max(c - 2, 0):c + 3].any()


def test_same_seed_same_scene(library):
    a = generate_scene(SceneSpec(seed=5, n_cars=6, noise_sigma=2.0, drop_rate=0.2), library)
    b = generate_scene(SceneSpec(seed=5, n_cars=6, noise_sigma=2.0, drop_rate=0.2), library)
    np.testing.assert_array_equal(a.id_buffer, b.id_buffer)
    for x, y in zip(a.cars, b.cars):
        assert x.pose == y.pose
        np.testing.assert_array_equal(x.observation.xy, y.observation.xy)


def test_drop_rate_only_removes(library):
    full = generate_scene(SceneSpec(seed=8, n_cars=5), library)
    dropped = generate_scene(SceneSpec(seed=8, n_cars=5, drop_rate=0.5), library)
    for a, b in zip(full.cars, dropped.cars):
        assert not (b.observation.labelled & ~a.observation.labelled).any()


def test_segment_hits_oracle():
    tri = np.array([[[-1.0, -1.0, 5.0], [1.0, -1.0, 5.0], [0.0, 1.0, 5.0]]])
    pts = np.array([[0.0, 0.0, 10.0], [0.0, 0.0, 4.0], [3.0, 0.0, 10.0]])
    assert _segment_hits(pts, tri).tolist() == [True, False, False]


def test_occlusion_ratio_range(truth):
    for i in range(len(truth.cars)):
        if truth.mask(i).any():
            assert 0.0 <= occlusion_ratio(i, truth) <= 1.0


def test_spec_validation_and_placement_failure(library):
    with pytest.raises(ValueError):
        SceneSpec(seed=0, n_cars=0)
    with pytest.raises(ValueError):
        SceneSpec(seed=0, n_cars=1, drop_rate=1.0)
    with pytest.raises(PlacementError):
        generate_scene(SceneSpec(seed=0, n_cars=40, depth_range=(10.0, 11.0), lateral_range=2.0), library)


def test_scene_seed():
    assert scene_seed(6, 3) == 5 and scene_seed(0, 4) == 4
