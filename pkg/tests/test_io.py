import json
import math
import warnings

import numpy as np
import pytest

from carpose import io
from carpose.a3dp import A3DPResult, CriteriaSet, Prediction
from carpose.errors import ParseError, SchemaError, UnknownVersionError
from carpose.geometry import KeypointObservation, UnitQuaternion, pose_from_euler
from carpose.library import box_model
from carpose.sim import SceneSpec, generate_scene


@pytest.fixture(scope="module")
def scene_file(library):
    truths = [generate_scene(SceneSpec(seed=s, n_cars=3, noise_sigma=1.0), library) for s in range(2)]
    return io.scene_from_truths(truths)


def test_scene_round_trip(tmp_path, scene_file):
    path = tmp_path / "scene.json"
    io.save_scene(scene_file, path)
    back = io.load_scene(path)
    assert back.camera == scene_file.camera
    assert [i.image_id for i in back.images] == ["0", "1"]
    for a, b in zip(scene_file.images, back.images):
        for ca, cb in zip(a.cars, b.cars):
            np.testing.assert_array_equal(ca.observation.xy, cb.observation.xy)
            np.testing.assert_array_equal(ca.observation.labelled, cb.observation.labelled)
            assert ca.model_id == cb.model_id and ca.pose == cb.pose
    io.save_scene(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def _doc(scene_file):
    return io.scene_to_json(scene_file)


def test_schema_errors_name_the_field(scene_file):
    doc = _doc(scene_file)
    doc["images"][0]["cars"][1]["keypoints"].pop()
    with pytest.raises(SchemaError, match=r"images\[0\]\.cars\[1\]\.keypoints: expected 66 keypoints, got 65"):
        io.scene_from_json(doc)
    doc = _doc(scene_file)
    doc["images"][1]["image_id"] = doc["images"][0]["image_id"]
    with pytest.raises(SchemaError, match="duplicate"):
        io.scene_from_json(doc)
    doc = _doc(scene_file)
    doc["version"] = 7
    with pytest.raises(UnknownVersionError):
        io.scene_from_json(doc)
    doc = _doc(scene_file)
    doc["images"][0]["cars"][0]["model_id"] = 42
    with pytest.raises(SchemaError, match="unknown model 42"):
        io.scene_from_json(doc, known_models=range(5))
    doc = _doc(scene_file)
    doc["images"][0]["cars"][0]["keypoints"][3][2] = 2
    with pytest.raises(SchemaError, match=r"keypoints\[3\]\[2\]"):
        io.scene_from_json(doc)


def test_legacy_single_image_layout(scene_file):
    doc = _doc(scene_file)
    legacy = {"version": 1, "camera": doc["camera"], "cars": doc["images"][0]["cars"]}
    s = io.scene_from_json(legacy)
    assert len(s.images) == 1 and s.images[0].image_id == "0"


def test_parse_error_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"version": 1,\n  "camera": }')
    with pytest.raises(ParseError, match="line 2"):
        io.load_scene(p)


def test_quaternion_renormalised_with_warning():
    with pytest.warns(UserWarning):
        p = io.pose_from_json({"q": [2.0, 0.0, 0.0, 0.0], "t": [0, 0, 5]}, "pose")
    assert p.rotation == UnitQuaternion.identity()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        io.pose_from_json({"q": [1.0, 0.0, 0.0, 0.0], "t": [0, 0, 5]}, "pose")


def test_predictions_round_trip_and_checks(tmp_path):
    preds = [Prediction("a", 1, pose_from_euler(0, 0, 0.3, (1, 2, 3)), 0.25),
             Prediction("b", 0, pose_from_euler(0, 0.1, 0, (0, 1, 9)), 1.0)]
    path = tmp_path / "p.json"
    io.save_predictions(preds, path)
    assert io.load_predictions(path) == preds
    doc = json.loads(path.read_text())
    doc["images"][0]["predictions"][0]["score"] = 1.5
    with pytest.raises(SchemaError, match="score"):
        io.predictions_from_json(doc)
    with pytest.raises(SchemaError, match="unknown model"):
        io.load_predictions(path, known_models=[0])


def test_library_round_trip(tmp_path, library):
    io.save_library(library, tmp_path / "lib")
    back = io.load_library(tmp_path / "lib")
    assert [m.id for m in back] == [m.id for m in library]
    for a, b in zip(library, back):
        assert a.name == b.name and a.height == b.height
        np.testing.assert_array_equal(a.vertices, b.vertices)
        np.testing.assert_array_equal(a.triangles, b.triangles)
        np.testing.assert_array_equal(a.keypoints3d, b.keypoints3d)


def test_obj_rejects_non_triangles():
    with pytest.raises(SchemaError):
        io.read_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n")
    v, f = io.read_obj(io.write_obj(box_model().vertices, box_model().triangles))
    np.testing.assert_array_equal(f, box_model().triangles)


def test_metric_csv_layout():
    r = A3DPResult("abs", tuple(float(i) for i in range(10)), 4.5, 0.0, 7.25, CriteriaSet(0.75, 1.4, math.pi / 12))
    text = io.metric_csv(r)
    lines = text.splitlines()
    assert lines[0] == "index,delta_s,delta_t,delta_r,AP"
    assert lines[1].startswith("0,0.5,2.8,") and lines[-3].startswith("mean")
    assert lines[-1] == f"c-s,0.75,1.4,{math.pi / 12!r},7.25"


def test_pfld_round_trip(tmp_path):
    a = np.random.default_rng(0).normal(size=(4, 5, 2))
    io.write_pfld(a, tmp_path / "f.pfld")
    np.testing.assert_array_equal(io.read_pfld(tmp_path / "f.pfld"), a)
    with pytest.raises(SchemaError):
        io.pfld_from_bytes(b"JUNK" + bytes(20))


def test_id_png_round_trip(tmp_path):
    ids = np.full((6, 7), -1, dtype=np.int32)
    ids[1:3, 2:5] = 0
    ids[4, 4] = 300
    io.write_id_png(ids, tmp_path / "ids.png")
    np.testing.assert_array_equal(io.read_id_png(tmp_path / "ids.png"), ids)


def test_atomic_write_leaves_no_temp(tmp_path):
    io.atomic_write(tmp_path / "x.txt", "hello")
    assert [p.name for p in tmp_path.iterdir()] == ["x.txt"]


def test_camera_round_trip(tmp_path, K):
    io.save_camera(K, tmp_path / "cam.json")
    assert io.load_camera(tmp_path / "cam.json") == K
