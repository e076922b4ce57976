"""On-disk formats: scene and prediction JSON, model libraries, metric and
diagnostic CSV, and the ``PFLD`` binary container for pixel fields.

Every writer goes through :func:`atomic_write` (temporary file in the target
directory, then ``os.replace``); ``"-"`` means standard output. JSON floats
are written in Python's shortest round-trip form, so loading what was saved
reproduces every value exactly.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import struct
import sys
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import ParseError, SchemaError, UnknownVersionError
from .geometry import NUM_KEYPOINTS, CarModel, Intrinsics, KeypointObservation, Pose, UnitQuaternion

VERSION = 1
QUATERNION_TOL = 1e-6
PFLD_MAGIC = b"PFLD"


# -- writing ------------------------------------------------------------------


def atomic_write(path: str | os.PathLike, data: str | bytes) -> None:
    """Write ``data`` to ``path`` via a temporary file and rename; ``"-"`` is stdout."""
    if str(path) == "-":
        if isinstance(data, bytes):
            sys.stdout.buffer.write(data)
            sys.stdout.buffer.flush()
        else:
            sys.stdout.write(data)
            sys.stdout.flush()
        return
    path = Path(path)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _read_bytes(path: str | os.PathLike) -> bytes:
    if str(path) == "-":
        return sys.stdin.buffer.read()
    return Path(path).read_bytes()


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=1, allow_nan=False) + "\n"


def _load_json(path: str | os.PathLike) -> Any:
    raw = _read_bytes(path)
    try:
        return json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not UTF-8 text ({exc})") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


# -- field validation helpers -------------------------------------------------


def _require(obj: Any, key: str, where: str) -> Any:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    if key not in obj:
        raise SchemaError(f"{where}.{key}: missing field")
    return obj[key]


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{where}: expected a number, got {type(value).__name__}")
    v = float(value)
    if not math.isfinite(v):
        raise SchemaError(f"{where}: must be finite")
    return v


def _integer(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"{where}: expected an integer")
    return value


def _vector(value: Any, n: int, where: str) -> list[float]:
    if not isinstance(value, list) or len(value) != n:
        raise SchemaError(f"{where}: expected a list of {n} numbers")
    return [_number(v, f"{where}[{i}]") for i, v in enumerate(value)]


def _check_version(doc: Any, where: str) -> None:
    version = _require(doc, "version", where)
    if version != VERSION:
        raise UnknownVersionError(f"{where}.version: unsupported version {version!r} (expected {VERSION})")


def _image_id(value: Any, where: str) -> str:
    if isinstance(value, bool) or not isinstance(value, (str, int)):
        raise SchemaError(f"{where}: image_id must be a string or integer")
    return str(value)


# -- poses and cameras --------------------------------------------------------


def pose_to_json(p: Pose) -> dict:
    return {"q": [float(v) for v in p.rotation.as_array()], "t": [float(v) for v in p.translation]}


def pose_from_json(obj: Any, where: str) -> Pose:
    q = _vector(_require(obj, "q", where), 4, f"{where}.q")
    t = _vector(_require(obj, "t", where), 3, f"{where}.t")
    norm = math.sqrt(sum(v * v for v in q))
    if norm == 0.0:
        raise SchemaError(f"{where}.q: zero quaternion")
    if abs(norm - 1.0) > QUATERNION_TOL:
        warnings.warn(f"{where}.q: norm {norm:.9g} renormalised", stacklevel=2)
    return Pose(UnitQuaternion(*q), tuple(t))


def camera_to_json(K: Intrinsics) -> dict:
    return {"fx": K.fx, "fy": K.fy, "ux": K.ux, "uy": K.uy, "width": K.width, "height": K.height}


def camera_from_json(obj: Any, where: str = "camera") -> Intrinsics:
    vals = {k: _number(_require(obj, k, where), f"{where}.{k}") for k in ("fx", "fy", "ux", "uy")}
    size = {k: _integer(_require(obj, k, where), f"{where}.{k}") for k in ("width", "height")}
    try:
        return Intrinsics(**vals, **size)
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from None


def load_camera(path: str | os.PathLike) -> Intrinsics:
    return camera_from_json(_load_json(path), "camera")


def save_camera(K: Intrinsics, path: str | os.PathLike) -> None:
    atomic_write(path, _dump_json(camera_to_json(K)))


# -- scene files --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SceneCar:
    observation: KeypointObservation
    model_id: int | None = None
    pose: Pose | None = None


@dataclass(frozen=True, eq=False)
class SceneImage:
    image_id: str
    cars: tuple[SceneCar, ...]


@dataclass(frozen=True, eq=False)
class SceneFile:
    camera: Intrinsics
    images: tuple[SceneImage, ...]
    version: int = VERSION


def keypoints_to_json(obs: KeypointObservation) -> list:
    return [[float(x), float(y), int(lab)] for (x, y), lab in zip(obs.xy, obs.labelled)]


def keypoints_from_json(value: Any, where: str) -> KeypointObservation:
    if not isinstance(value, list):
        raise SchemaError(f"{where}: expected a list of {NUM_KEYPOINTS} keypoints")
    if len(value) != NUM_KEYPOINTS:
        raise SchemaError(f"{where}: expected {NUM_KEYPOINTS} keypoints, got {len(value)}")
    xy = np.zeros((NUM_KEYPOINTS, 2))
    lab = np.zeros(NUM_KEYPOINTS, dtype=bool)
    for k, slot in enumerate(value):
        if not isinstance(slot, list) or len(slot) != 3:
            raise SchemaError(f"{where}[{k}]: expected [x, y, labelled]")
        xy[k, 0] = _number(slot[0], f"{where}[{k}][0]")
        xy[k, 1] = _number(slot[1], f"{where}[{k}][1]")
        if slot[2] not in (0, 1) or isinstance(slot[2], float):
            raise SchemaError(f"{where}[{k}][2]: labelled flag must be 0 or 1")
        lab[k] = bool(slot[2])
    return KeypointObservation(xy, lab)


def _car_to_json(car: SceneCar) -> dict:
    out: dict[str, Any] = {}
    if car.model_id is not None:
        out["model_id"] = int(car.model_id)
    if car.pose is not None:
        out["pose"] = pose_to_json(car.pose)
    out["keypoints"] = keypoints_to_json(car.observation)
    return out


def _car_from_json(obj: Any, where: str) -> SceneCar:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    model_id = obj.get("model_id")
    if model_id is not None:
        model_id = _integer(model_id, f"{where}.model_id")
    pose = obj.get("pose")
    if pose is not None:
        pose = pose_from_json(pose, f"{where}.pose")
    obs = keypoints_from_json(_require(obj, "keypoints", where), f"{where}.keypoints")
    return SceneCar(obs, model_id, pose)


def scene_to_json(scene: SceneFile) -> dict:
    return {
        "version": scene.version,
        "camera": camera_to_json(scene.camera),
        "images": [
            {"image_id": img.image_id, "cars": [_car_to_json(c) for c in img.cars]} for img in scene.images
        ],
    }


def scene_from_json(doc: Any, known_models: Iterable[int] | None = None) -> SceneFile:
    _check_version(doc, "scene")
    camera = camera_from_json(_require(doc, "camera", "scene"), "camera")
    if "images" in doc:
        raw_images = doc["images"]
        if not isinstance(raw_images, list):
            raise SchemaError("images: expected a list")
    elif "cars" in doc:
        raw_images = [{"image_id": "0", "cars": doc["cars"]}]
    else:
        raise SchemaError("scene.images: missing field")
    known = set(known_models) if known_models is not None else None
    images, seen = [], set()
    for i, img in enumerate(raw_images):
        where = f"images[{i}]"
        image_id = _image_id(_require(img, "image_id", where), f"{where}.image_id")
        if image_id in seen:
            raise SchemaError(f"{where}.image_id: duplicate id {image_id!r}")
        seen.add(image_id)
        cars_raw = _require(img, "cars", where)
        if not isinstance(cars_raw, list):
            raise SchemaError(f"{where}.cars: expected a list")
        cars = []
        for c, car in enumerate(cars_raw):
            sc = _car_from_json(car, f"{where}.cars[{c}]")
            if known is not None and sc.model_id is not None and sc.model_id not in known:
                raise SchemaError(f"{where}.cars[{c}].model_id: unknown model {sc.model_id}")
            cars.append(sc)
        images.append(SceneImage(image_id, tuple(cars)))
    return SceneFile(camera, tuple(images))


def load_scene(path: str | os.PathLike, known_models: Iterable[int] | None = None) -> SceneFile:
    return scene_from_json(_load_json(path), known_models)


def save_scene(scene: SceneFile, path: str | os.PathLike) -> None:
    atomic_write(path, _dump_json(scene_to_json(scene)))


def scene_from_truths(truths: Sequence, image_ids: Sequence[str] | None = None) -> SceneFile:
    """Scene file from simulated scenes sharing one camera."""
    if not truths:
        raise ValueError("need at least one scene")
    ids = image_ids if image_ids is not None else [str(i) for i in range(len(truths))]
    images = tuple(
        SceneImage(str(iid), tuple(SceneCar(c.observation, c.model_id, c.pose) for c in tr.cars))
        for iid, tr in zip(ids, truths)
    )
    return SceneFile(truths[0].camera, images)


# -- prediction files ---------------------------------------------------------


def predictions_to_json(preds: Sequence) -> dict:
    images: dict[str, list] = {}
    for p in preds:
        images.setdefault(p.image_id, []).append(
            {"model_id": int(p.shape_id), "pose": pose_to_json(p.pose), "score": float(p.score)}
        )
    return {"version": VERSION, "images": [{"image_id": k, "predictions": v} for k, v in images.items()]}


def predictions_from_json(doc: Any, known_models: Iterable[int] | None = None) -> list:
    from .a3dp import Prediction

    _check_version(doc, "predictions")
    raw = _require(doc, "images", "predictions")
    if not isinstance(raw, list):
        raise SchemaError("images: expected a list")
    known = set(known_models) if known_models is not None else None
    out = []
    for i, img in enumerate(raw):
        where = f"images[{i}]"
        image_id = _image_id(_require(img, "image_id", where), f"{where}.image_id")
        plist = _require(img, "predictions", where)
        if not isinstance(plist, list):
            raise SchemaError(f"{where}.predictions: expected a list")
        for j, p in enumerate(plist):
            pw = f"{where}.predictions[{j}]"
            mid = _integer(_require(p, "model_id", pw), f"{pw}.model_id")
            if known is not None and mid not in known:
                raise SchemaError(f"{pw}.model_id: unknown model {mid}")
            score = _number(_require(p, "score", pw), f"{pw}.score")
            if not 0.0 <= score <= 1.0:
                raise SchemaError(f"{pw}.score: must lie in [0, 1], got {score}")
            pose = pose_from_json(_require(p, "pose", pw), f"{pw}.pose")
            out.append(Prediction(image_id, mid, pose, score))
    return out


def load_predictions(path: str | os.PathLike, known_models: Iterable[int] | None = None) -> list:
    return predictions_from_json(_load_json(path), known_models)


def save_predictions(preds: Sequence, path: str | os.PathLike) -> None:
    atomic_write(path, _dump_json(predictions_to_json(preds)))


# -- model library ------------------------------------------------------------


def write_obj(vertices: np.ndarray, triangles: np.ndarray) -> str:
    lines = [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in triangles]
    return "\n".join(lines) + "\n"


def read_obj(text: str, where: str = "mesh.obj") -> tuple[np.ndarray, np.ndarray]:
    verts, tris = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            if len(parts) != 4:
                raise SchemaError(f"{where}:{lineno}: vertex needs 3 coordinates")
            try:
                verts.append([float(v) for v in parts[1:]])
            except ValueError:
                raise SchemaError(f"{where}:{lineno}: bad vertex coordinate") from None
        elif tag == "f":
            if len(parts) != 4:
                raise SchemaError(f"{where}:{lineno}: only triangular faces are supported")
            try:
                tris.append([int(v.split("/")[0]) - 1 for v in parts[1:]])
            except ValueError:
                raise SchemaError(f"{where}:{lineno}: bad face index") from None
        else:
            raise SchemaError(f"{where}:{lineno}: unsupported OBJ statement {tag!r}")
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3)


def save_model(model: CarModel, directory: str | os.PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    atomic_write(d / "mesh.obj", write_obj(model.vertices, model.triangles))
    meta = {
        "id": int(model.id),
        "name": model.name,
        "height": float(model.height),
        "keypoints": [[float(v) for v in k] for k in model.keypoints3d],
    }
    atomic_write(d / "keypoints.json", _dump_json(meta))


def load_model(directory: str | os.PathLike) -> CarModel:
    d = Path(directory)
    where = str(d / "keypoints.json")
    meta = _load_json(d / "keypoints.json")
    kps = _require(meta, "keypoints", where)
    if not isinstance(kps, list) or len(kps) != NUM_KEYPOINTS:
        raise SchemaError(f"{where}.keypoints: expected {NUM_KEYPOINTS} points")
    kp = np.array([_vector(k, 3, f"{where}.keypoints[{i}]") for i, k in enumerate(kps)])
    verts, tris = read_obj((d / "mesh.obj").read_text(), str(d / "mesh.obj"))
    name = _require(meta, "name", where)
    if not isinstance(name, str):
        raise SchemaError(f"{where}.name: expected a string")
    try:
        return CarModel(
            id=_integer(_require(meta, "id", where), f"{where}.id"),
            name=name,
            vertices=verts,
            triangles=tris,
            keypoints3d=kp,
            height=_number(_require(meta, "height", where), f"{where}.height"),
        )
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from None


def save_library(library: Sequence[CarModel], directory: str | os.PathLike) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for m in library:
        save_model(m, root / f"{m.id:03d}_{m.name}")


def load_library(directory: str | os.PathLike) -> list[CarModel]:
    """All models under ``directory`` (one sub-directory each), sorted by id."""
    root = Path(directory)
    if not root.is_dir():
        raise SchemaError(f"{root}: model library directory not found")
    models = [load_model(sub) for sub in sorted(root.iterdir()) if (sub / "keypoints.json").exists()]
    if not models:
        raise SchemaError(f"{root}: no models found")
    ids = [m.id for m in models]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{root}: duplicate model ids")
    return sorted(models, key=lambda m: m.id)


# -- CSV ----------------------------------------------------------------------


def _fmt(v: float) -> str:
    return "nan" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def metric_csv(result) -> str:
    """Metric table: one row per grid index, then mean, c-l and c-s rows."""
    from .a3dp import ThresholdGrid

    grid = ThresholdGrid.for_mode(result.mode)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "delta_s", "delta_t", "delta_r", "AP"])
    for i, (c, ap) in enumerate(zip(grid.criteria, result.aps)):
        w.writerow([i, _fmt(c.delta_s), _fmt(c.delta_t), _fmt(c.delta_r), _fmt(ap)])
    w.writerow(["mean", "", "", "", _fmt(result.mean)])
    loose = grid[0]
    w.writerow(["c-l", _fmt(loose.delta_s), _fmt(loose.delta_t), _fmt(loose.delta_r), _fmt(result.c_l)])
    s = result.strict_criteria
    w.writerow(["c-s", _fmt(s.delta_s), _fmt(s.delta_t), _fmt(s.delta_r), _fmt(result.c_s)])
    return buf.getvalue()


def read_metric_csv(path: str | os.PathLike) -> dict[str, float]:
    rows = list(csv.DictReader(_io.StringIO(_read_bytes(path).decode("utf-8"))))
    return {r["index"]: float(r["AP"]) for r in rows}


DIAGNOSTIC_COLUMNS = (
    "image_id", "car", "status", "rich", "labelled", "model_id", "mean_reprojection_px",
    "pnp_energy", "neighbor_energy", "neighbors", "translation_error_m", "rotation_error_rad", "reason",
)


def diagnostics_csv(rows: Iterable[dict]) -> str:
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=DIAGNOSTIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in DIAGNOSTIC_COLUMNS})
    return buf.getvalue()


# -- PFLD pixel-field container -----------------------------------------------


def pfld_bytes(array: np.ndarray) -> bytes:
    a = np.ascontiguousarray(array, dtype="<f8")
    head = PFLD_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def pfld_from_bytes(data: bytes, where: str = "field") -> np.ndarray:
    if len(data) < 8 or data[:4] != PFLD_MAGIC:
        raise ParseError(f"{where}: missing PFLD magic")
    (ndim,) = struct.unpack_from("<I", data, 4)
    if ndim < 1 or ndim > 8 or len(data) < 8 + 4 * ndim:
        raise ParseError(f"{where}: bad dimension count {ndim}")
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    offset = 8 + 4 * ndim
    expected = int(np.prod(shape, dtype=np.int64)) * 8
    if len(data) - offset != expected:
        raise ParseError(f"{where}: payload has {len(data) - offset} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)


def write_pfld(array: np.ndarray, path: str | os.PathLike) -> None:
    atomic_write(path, pfld_bytes(array))


def read_pfld(path: str | os.PathLike) -> np.ndarray:
    return pfld_from_bytes(_read_bytes(path), str(path))


# -- PNG id maps --------------------------------------------------------------


def write_id_png(ids: np.ndarray, path: str | os.PathLike) -> None:
    """Instance-id buffer as a 16-bit PNG; background (-1) is stored as 0, car i as i + 1."""
    from PIL import Image

    img = (np.asarray(ids, dtype=np.int64) + 1).astype(np.uint16)
    buf = _io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def write_mask_png(mask: np.ndarray, path: str | os.PathLike) -> None:
    """Binary mask as an 8-bit grayscale PNG with values 0 and 255."""
    from PIL import Image

    img = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    buf = _io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def read_id_png(path: str | os.PathLike) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int64).astype(np.int32) - 1

