import math

import numpy as np
import pytest

from a3dp_reference import random_scene, random_similarity, reference_ap
from carpose.a3dp import (
    ABS_GRID,
    DELTA_R,
    DELTA_S,
    DELTA_T_ABS,
    DELTA_T_REL,
    IGNORED,
    REL_GRID,
    CriteriaSet,
    GroundTruthInstance,
    Prediction,
    a3dp,
    average_precision,
    evaluate_criteria,
    is_true_positive,
    match,
    translation_error,
    visiting_order,
)
from carpose.errors import MixedImageIdsError, UnknownShapeError
from carpose.geometry import Pose, UnitQuaternion, pose_from_euler
from carpose.shapesim import SimilarityTable

SAME = SimilarityTable.identity(range(4))


def _gt(img, x, z, shape=0, yaw=0.0):
    return GroundTruthInstance(img, shape, pose_from_euler(0, 0, yaw, (x, 0.8, z)))


def _pred(img, x, z, score, shape=0, yaw=0.0):
    return Prediction(img, shape, pose_from_euler(0, 0, yaw, (x, 0.8, z)), score)


def test_grid_constants():
    assert DELTA_S == tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
    assert DELTA_T_ABS == tuple(round(2.8 - 0.3 * i, 1) for i in range(10))
    assert DELTA_T_REL == tuple(round(0.10 - 0.01 * i, 2) for i in range(10))
    for i, r in enumerate(DELTA_R):
        assert abs(r - (math.pi / 6 - i * math.pi / 60)) < 1e-15
    assert len(ABS_GRID) == len(REL_GRID) == 10


def test_hand_example():
    # 3 GT, 4 predictions: TP (0.9), FP (0.8), TP (0.7), FP (0.6)
    gts = [_gt("a", 0, 10), _gt("a", 5, 20), _gt("a", -5, 30)]
    preds = [_pred("a", 0.1, 10, 0.9), _pred("a", 10, 50, 0.8), _pred("a", 5, 20.2, 0.7),
             _pred("a", -20, 60, 0.6)]
    crit = CriteriaSet(0.5, 1.0, math.pi / 6)
    # precision envelope: 1.0 up to recall 1/3, 2/3 up to recall 2/3, then 0
    expected = (34 * 1.0 + 33 * (2 / 3)) / 101 * 100
    assert math.isclose(evaluate_criteria(preds, gts, crit, "abs", SAME), expected, rel_tol=1e-12)


def test_average_precision_cases():
    assert math.isnan(average_precision([True], 0))
    assert average_precision([], 3) == 0.0
    assert average_precision([True, True], 2) == 100.0
    assert math.isclose(average_precision([False, True], 1), 50.0)


def test_rotation_criterion_literal():
    q = UnitQuaternion.from_axis_angle((0, 0, 1), math.radians(30))
    g = GroundTruthInstance("a", 0, pose_from_euler(0, 0, 0, (0, 0, 10)))
    p = Prediction("a", 0, Pose(q, (0, 0, 10)), 1.0)
    assert is_true_positive(p, g, CriteriaSet(0.5, 1.0, math.pi / 6), "abs", SAME)
    assert not is_true_positive(p, g, CriteriaSet(0.5, 1.0, math.pi / 60), "abs", SAME)


def test_relative_translation():
    g = _gt("a", 0, 50)
    p = _pred("a", 0, 52, 1.0)
    assert math.isclose(translation_error(p.pose, g.pose, "rel"), 2 / math.hypot(0.8, 50))
    assert is_true_positive(p, g, REL_GRID[0], "rel", SAME)
    assert not is_true_positive(p, g, REL_GRID[9], "rel", SAME)


def test_shape_criterion_and_unknown_shape():
    g = _gt("a", 0, 10, shape=0)
    p = _pred("a", 0, 10, 1.0, shape=1)
    assert not is_true_positive(p, g, ABS_GRID[0], "abs", SAME)
    with pytest.raises(UnknownShapeError):
        is_true_positive(_pred("a", 0, 10, 1.0, shape=9), g, ABS_GRID[0], "abs", SAME)


def test_match_duplicates_are_false_positives():
    gts = [_gt("a", 0, 10)]
    preds = [_pred("a", 0, 10, 0.5), _pred("a", 0.2, 10, 0.5)]
    res = match(preds, gts, ABS_GRID[0], "abs", SAME)
    assert res.tp == 1 and res.fp == 1 and res.fn == 0
    assert res.matches == ((0, 0),)


def test_visiting_order_tie_breaks():
    gts = [_gt("a", 0, 10)]
    preds = [_pred("a", 1.0, 10, 0.5), _pred("a", 0.5, 10, 0.5), _pred("a", 0.5, 10, 0.5)]
    assert visiting_order(preds, gts) == [1, 2, 0]


def test_far_ground_truth_is_ignored():
    gts = [_gt("a", 0, 120), _gt("a", 0, 10)]
    preds = [_pred("a", 0, 120, 0.9), _pred("a", 0, 10, 0.8)]
    res = match(preds, gts, ABS_GRID[0], "abs", SAME)
    assert res.num_gt == 1 and res.labels == (IGNORED, "tp")
    assert evaluate_criteria(preds, gts, ABS_GRID[0], "abs", SAME) == 100.0


def test_mixed_images_rejected():
    with pytest.raises(MixedImageIdsError):
        match([_pred("a", 0, 10, 1.0)], [_gt("b", 0, 10)], ABS_GRID[0], "abs", SAME)


def test_identity_and_empty():
    gts = [_gt("a", 0, 10, yaw=0.3), _gt("a", 4, 30, shape=2), _gt("b", -3, 60, shape=1)]
    preds = [Prediction(g.image_id, g.shape_id, g.pose, 1.0) for g in gts]
    for mode in ("abs", "rel"):
        r = a3dp(preds, gts, SAME, mode)
        assert r.aps == (100.0,) * 10 and r.mean == r.c_l == r.c_s == 100.0
        e = a3dp([], gts, SAME, mode)
        assert e.aps == (0.0,) * 10 and e.mean == e.c_l == e.c_s == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_matches_reference(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_scene(rng)
    sim = random_similarity(rng)
    for mode in ("abs", "rel"):
        r = a3dp(preds, gts, sim, mode)
        grid = ABS_GRID if mode == "abs" else REL_GRID
        for ap, c in zip(r.aps, grid.criteria):
            ref = reference_ap(preds, gts, (c.delta_s, c.delta_t, c.delta_r), mode, sim)
            assert abs(ap - ref) <= 1e-9


def test_criteria_validation():
    with pytest.raises(ValueError):
        CriteriaSet(0.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        CriteriaSet(0.5, 0.0, 0.1)
    with pytest.raises(ValueError):
        Prediction("a", 0, pose_from_euler(0, 0, 0, (0, 0, 1)), math.nan)
    with pytest.raises(ValueError):
        GroundTruthInstance("a", 0, pose_from_euler(0, 0, 0, (0, 0, -1)))


def test_ignored_ground_truth_absorbs_prediction():
    gts = [_gt("a", 0, 10), GroundTruthInstance("a", 0, pose_from_euler(0, 0, 0, (5, 0.8, 20)), ignore=True)]
    preds = [_pred("a", 0, 10, 0.9), _pred("a", 5, 20, 0.95)]
    crit = CriteriaSet(0.5, 1.0, math.pi / 6)
    res = match(preds, gts, crit, "abs", SAME)
    assert res.num_gt == 1 and res.fp == 0 and res.tp == 1
    assert evaluate_criteria(preds, gts, crit, "abs", SAME) == 100.0
