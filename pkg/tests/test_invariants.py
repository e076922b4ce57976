"""Cross-module invariants: equivariance, symmetry, order independence and exact identities."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carpose.aggregate import DepthBins
from carpose.context import SceneProblem, coplanar_energy, energy_terms, scene_energy, solve_scene
from carpose.geometry import (
    KeypointObservation,
    Pose,
    backproject,
    pose_from_euler,
    project,
    project_points,
)
from carpose.library import box_model
from carpose.pnp import ACCEPT_BOUNDARY_PX, ACCEPT_REPROJECTION_PX, CorrespondenceSet, epnp, fit_model, ransac_pnp, reprojection_energy
from carpose.raster import render_ids
from carpose.shapesim import boundary_offset, hull_similarity, iou, render_silhouette
from carpose.sim import SceneSpec, SceneTruth, SimCar, generate_scene, occlusion_ratio


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.5, 200))
def test_project_backproject_identity(x, y, z):
    from carpose.sim import default_intrinsics
    K = default_intrinsics()
    X = np.array([x, y, z])
    back = backproject(K, project(K, Pose.identity(), X), z)
    np.testing.assert_allclose(back, X, rtol=0, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_epnp_equivariance(K, seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-2, 2, size=(9, 3))
    pose = pose_from_euler(0.0, 0.1, rng.uniform(-3, 3), (0.5, 0.8, rng.uniform(8, 30)))
    uv, _ = project_points(K, pose, pts)
    T = pose_from_euler(*rng.uniform(-1, 1, 3), rng.uniform(-3, 3, 3))
    moved = T.apply(pts)
    a = epnp(CorrespondenceSet(np.arange(9), uv, pts), K).pose
    b = epnp(CorrespondenceSet(np.arange(9), uv, moved), K).pose
    expected = a.compose(T.inverse())
    assert np.linalg.norm(b.t - expected.t) < 1e-6
    np.testing.assert_allclose(b.R, expected.R, atol=1e-6)


def test_ransac_zero_outliers_keeps_everything(K, library):
    m = library[0]
    pose = pose_from_euler(0, 0, 0.4, (1.0, 0.775, 15.0))
    idx = np.arange(0, 66, 2)
    uv, _ = project_points(K, pose, m.keypoints3d[idx])
    sol = ransac_pnp(CorrespondenceSet(idx, uv, m.keypoints3d[idx]), K)
    assert sol.inlier_indices == frozenset(idx.tolist())


def test_reprojection_energy_order_invariant(K, library):
    m = library[1]
    pose = pose_from_euler(0, 0, 1.0, (0.0, 0.775, 12.0))
    rng = np.random.default_rng(0)
    uv, _ = project_points(K, pose, m.keypoints3d)
    uv = uv + rng.normal(0, 2.0, uv.shape)
    obs = KeypointObservation(uv, rng.random(66) < 0.5)
    perm = rng.permutation(obs.indices)
    a = reprojection_energy(pose, m, obs, K)[0]
    b = math.fsum(np.linalg.norm(project_points(K, pose, m.keypoints3d[perm])[0] - uv[perm], axis=1))
    assert math.isclose(a, b, rel_tol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_fit_model_respects_gates(K, library, seed):
    truth = generate_scene(SceneSpec(seed=seed, n_cars=3, noise_sigma=2.0, depth_range=(8, 40)), library)
    for i, car in enumerate(truth.cars):
        if car.observation.count < 5:
            continue
        try:
            fit = fit_model(car.observation, library, K, mask=truth.mask(i))
        except Exception:
            continue
        assert fit.mean_reprojection_error < ACCEPT_REPROJECTION_PX
        assert fit.boundary_offset < ACCEPT_BOUNDARY_PX


def test_coplanar_energy_symmetric_and_zero_iff_match(library):
    a, b = library[0], library[4]
    p = pose_from_euler(0.01, 0.02, 0.3, (0, 0.70, 10))
    q = pose_from_euler(-0.02, 0.0, 2.0, (3, 0.75, 15))
    assert coplanar_energy(p, a, q, b) == coplanar_energy(q, b, p, a)
    r = pose_from_euler(0.01, 0.02, -1.0, (5, 0.70 - a.height + b.height, 30))
    assert coplanar_energy(p, a, r, b) < 1e-20


def test_scene_energy_without_context_is_pnp_sum(K, library):
    truth = generate_scene(SceneSpec(seed=2, n_cars=4, noise_sigma=1.0), library)
    obs = [c.observation for c in truth.cars]
    scene = SceneProblem.from_observations(obs, library, K, lambda_n=0.0)
    poses = [c.pose for c in truth.cars]
    shapes = [c.model_id for c in truth.cars]
    labelled = [c for c in range(len(obs)) if obs[c].count]
    if len(labelled) == len(obs):
        total = scene_energy(scene, poses, shapes)
        assert total == sum(t.pnp for t in energy_terms(scene, poses, shapes))


def test_generated_scenes_are_coplanar(library):
    truth = generate_scene(SceneSpec(seed=9, n_cars=6), library)
    for i, a in enumerate(truth.cars):
        for j, b in enumerate(truth.cars):
            assert coplanar_energy(a.pose, truth.model(i), b.pose, truth.model(j)) < 1e-24


def test_stage_one_matches_independent_fit(K, library):
    truth = generate_scene(SceneSpec(seed=1, n_cars=4, noise_sigma=1.0, depth_range=(8, 40)), library)
    obs = [c.observation for c in truth.cars]
    masks = [truth.mask(i) for i in range(len(obs))]
    scene = SceneProblem.from_observations(obs, library, K, masks=masks)
    sols = solve_scene(scene, seed=4)
    for c, sol in enumerate(sols):
        if sol.status == "stage1":
            direct = fit_model(obs[c], library, K, masks[c], seed=4)
            assert direct.pose == sol.fit.pose and direct.model_id == sol.fit.model_id


def test_lonely_sparse_car_has_no_context(K, library):
    m = library[0]
    pose = pose_from_euler(0, 0, 0.2, (0.0, 0.775, 15.0))
    uv, _ = project_points(K, pose, m.keypoints3d)
    lab = np.zeros(66, bool)
    lab[[24, 25, 26, 27, 28, 62]] = True
    scene = SceneProblem.from_observations([KeypointObservation(uv, lab)], library, K)
    (sol,) = solve_scene(scene, context=True)
    assert sol.status == "stage2" and sol.neighbors == () and sol.neighbor_energy == 0.0


def test_hull_similarity_exactly_symmetric(library):
    for a in library[:3]:
        for b in library[:3]:
            assert hull_similarity(a, b, 6, 200) == hull_similarity(b, a, 6, 200)


def test_iou_counting_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.random((20, 30)) < 0.4, rng.random((20, 30)) < 0.4
    inter = sum(1 for i in range(20) for j in range(30) if a[i, j] and b[i, j])
    union = sum(1 for i in range(20) for j in range(30) if a[i, j] or b[i, j])
    assert iou(a, b) == inter / union


def test_render_determinism(library):
    assert np.array_equal(render_silhouette(library[2], 0.7, 300), render_silhouette(library[2], 0.7, 300))


def test_nested_squares_boundary_offset():
    a = np.zeros((200, 200), bool)
    b = np.zeros((200, 200), bool)
    a[50:150, 50:150] = True
    b[55:145, 55:145] = True
    assert abs(boundary_offset(a, b) - 5.0) <= 0.1


@given(st.integers(2, 64), st.floats(0.1, 5.0), st.floats(6.0, 500.0))
def test_depth_bin_edges_increase(n, lo, hi):
    assert np.all(np.diff(DepthBins(n, lo, hi).edges) > 0)


def _box_truth(K, boxes):
    items = [(i, m, p) for i, (m, p) in enumerate(boxes)]
    ids, _ = render_ids(K, items)
    cars = tuple(SimCar(m.id, p, KeypointObservation.empty(), np.zeros(66, bool)) for m, p in boxes)
    return SceneTruth(cars, K, 0, ids, tuple(m for m, _ in boxes))


def test_occlusion_full_and_half(K):
    near = box_model(0, (2.0, 2.0, 0.5))
    far = box_model(1, (1.0, 1.0, 0.5))
    truth = _box_truth(K, [(near, pose_from_euler(0, 0, 0, (0, 0, 10))),
                           (far, pose_from_euler(0, 0, 0, (0, 0, 15)))])
    assert occlusion_ratio(1, truth) == 1.0
    assert occlusion_ratio(0, truth) == 0.0
    # the near box covers exactly the left half of the far one in the image
    wall = box_model(0, (2.0, 2.0, 0.5))
    target = box_model(1, (2.0, 2.0, 0.5))
    truth = _box_truth(K, [(wall, pose_from_euler(0, 0, 0, (-1.0, 0, 10))),
                           (target, pose_from_euler(0, 0, 0, (0.0, 0, 20)))])
    assert abs(occlusion_ratio(1, truth) - 0.5) <= 0.02


def test_masks_partition(library):
    truth = generate_scene(SceneSpec(seed=3, n_cars=8), library)
    owners = sum(truth.mask(i).astype(int) for i in range(len(truth.cars)))
    assert owners.max() <= 1
