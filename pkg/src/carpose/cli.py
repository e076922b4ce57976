"""Command-line interface: ``simulate``, ``solve``, ``eval``, ``hull-iou`` and ``aggregate``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
schema error. ``-`` as a path means standard input or output. Outputs depend
only on inputs and ``--seed``; ``--threads`` changes speed, never bytes.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .a3dp import GroundTruthInstance, Prediction, a3dp
from .aggregate import mask_pool, recover_center
from .context import LAMBDA_N, SceneProblem, solve_scene
from .errors import CarposeError, SchemaError
from .geometry import rotation_distance
from .library import default_library
from .shapesim import (
    DEFAULT_RESOLUTION,
    DEFAULT_VIEWS,
    FRAME_METERS,
    PROJECTION,
    render_silhouette,
    similarity_table,
    view_yaws,
)
from .sim import DEPTH_RANGE, SceneSpec, default_intrinsics, generate_scene, scene_seed


def _threads(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("--threads must be at least 1")
    return n


def _car_range(value: str) -> tuple[int, int]:
    try:
        if ":" in value:
            lo, hi = (int(v) for v in value.split(":", 1))
        else:
            lo = hi = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("--cars takes N or LO:HI") from None
    if not 1 <= lo <= hi:
        raise argparse.ArgumentTypeError("--cars needs 1 <= LO <= HI")
    return lo, hi


def _library(path: str | None):
    return io.load_library(path) if path else default_library()


def _map(threads: int, fn, items):
    if threads <= 1:
        return list(map(fn, items))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- simulate -----------------------------------------------------------------


def cmd_simulate(args) -> int:
    library = _library(args.models)
    camera = io.load_camera(args.camera) if args.camera else default_intrinsics()
    lo, hi = args.cars

    def one(i: int):
        s = scene_seed(args.seed, i)
        n = lo + int(np.random.default_rng([s, 0x5EED]).integers(hi - lo + 1))
        spec = SceneSpec(
            seed=s, n_cars=n, intrinsics=camera, noise_sigma=args.noise, drop_rate=args.drop,
            depth_range=(args.depth_min, args.depth_max),
        )
        return generate_scene(spec, library)

    truths = _map(args.threads, one, range(args.scenes))
    io.save_scene(io.scene_from_truths(truths), args.out)
    if args.id_png_dir:
        d = Path(args.id_png_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, tr in enumerate(truths):
            io.write_id_png(tr.id_buffer, d / f"{i}.png")
    return 0


# -- solve --------------------------------------------------------------------


def _diag_row(image_id, c, sol, car, problem) -> dict:
    row = {
        "image_id": image_id, "car": c, "status": sol.status, "rich": int(sol.rich),
        "labelled": car.observation.count, "neighbors": " ".join(str(n) for n in sol.neighbors),
        "reason": sol.reason,
    }
    if sol.fit is not None:
        row.update(
            model_id=sol.fit.model_id,
            mean_reprojection_px=repr(float(sol.fit.mean_reprojection_error)),
            pnp_energy=repr(float(sol.pnp_energy)),
            neighbor_energy=repr(float(sol.neighbor_energy)),
        )
        if car.pose is not None:
            row["translation_error_m"] = repr(float(np.linalg.norm(sol.fit.pose.t - car.pose.t)))
            row["rotation_error_rad"] = repr(rotation_distance(sol.fit.pose.rotation, car.pose.rotation))
    return row


def cmd_solve(args) -> int:
    library = _library(args.models)
    scene = io.load_scene(args.scene)

    def one(img):
        problem = SceneProblem.from_observations(
            [c.observation for c in img.cars], library, scene.camera,
            kappa=args.kappa, lambda_n=args.lambda_n, ground_term=args.ground_term, borrow=args.borrow,
        )
        return problem, solve_scene(problem, seed=args.seed, context=args.context, threads=1)

    results = _map(args.threads, one, scene.images)
    preds, rows = [], []
    for img, (problem, sols) in zip(scene.images, results):
        for c, sol in enumerate(sols):
            rows.append(_diag_row(img.image_id, c, sol, img.cars[c], problem))
            if sol.fit is not None:
                score = 1.0 / (1.0 + sol.fit.mean_reprojection_error)
                preds.append(Prediction(img.image_id, sol.fit.model_id, sol.fit.pose, score))
    io.save_predictions(preds, args.out)
    if args.diagnostics:
        io.atomic_write(args.diagnostics, io.diagnostics_csv(rows))
    return 0


# -- eval ---------------------------------------------------------------------


def ground_truth_from_scene(scene: io.SceneFile, labelled_only: bool = True) -> list[GroundTruthInstance]:
    """Ground-truth instances of a scene file.

    With ``labelled_only`` a car without any labelled keypoint is marked
    ignored, the way an annotated dataset only scores cars someone could
    label: it adds nothing to recall and a prediction on it is no false
    positive.
    """
    gts = []
    for i, img in enumerate(scene.images):
        for c, car in enumerate(img.cars):
            where = f"images[{i}].cars[{c}]"
            if car.model_id is None:
                raise SchemaError(f"{where}.model_id: ground truth needs a model id")
            if car.pose is None:
                raise SchemaError(f"{where}.pose: ground truth needs a pose")
            if not car.pose.translation[2] > 0:
                raise SchemaError(f"{where}.pose.t: ground-truth depth must be positive")
            gts.append(GroundTruthInstance(img.image_id, car.model_id, car.pose,
                                           ignore=labelled_only and car.observation.count == 0))
    return gts


def cmd_eval(args) -> int:
    library = _library(args.models)
    ids = [m.id for m in library]
    scene = io.load_scene(args.gt, known_models=ids)
    gts = ground_truth_from_scene(scene, labelled_only=not args.all_cars)
    preds = io.load_predictions(args.pred, known_models=ids)
    image_ids = {img.image_id for img in scene.images}
    for p in preds:
        if p.image_id not in image_ids:
            raise SchemaError(f"predictions: image_id {p.image_id!r} is not in the ground-truth file")
    table = similarity_table(library, views=args.views, resolution=args.resolution)
    result = a3dp(preds, gts, table, mode=args.mode)
    io.atomic_write(args.out, io.metric_csv(result))
    _write_meta(args, {
        "command": "eval",
        "mode": result.mode,
        "a3dp": result.metadata,
        "ignored_unlabelled_cars": sum(g.ignore for g in gts),
        "shape_similarity": _similarity_meta(args.views, args.resolution),
    })
    return 0


# -- hull-iou -----------------------------------------------------------------


def _models_at(path: str) -> list:
    """A single model directory or a library directory of them."""
    if (Path(path) / "keypoints.json").exists():
        return [io.load_model(path)]
    return io.load_library(path)


def _similarity_meta(views: int, resolution: int) -> dict:
    return {
        "projection": PROJECTION,
        "views": views,
        "resolution_px": resolution,
        "frame_m": FRAME_METERS,
        "note": "silhouettes are orthographic side views over a yaw ring; perspective effects are not modelled",
    }


def _write_meta(args, meta: dict) -> None:
    """Metadata sidecar: ``--meta`` if given, else ``<out>.meta.json`` when writing to a file."""
    path = args.meta or (f"{args.out}.meta.json" if args.out != "-" else None)
    if path:
        io.atomic_write(path, json.dumps({"version": io.VERSION, **meta}, indent=1, sort_keys=True) + "\n")


def cmd_hull_iou(args) -> int:
    if len(args.dirs) > 2:
        raise SchemaError("hull-iou: give at most two model directories")
    if args.dirs and (args.a is not None or args.b is not None):
        raise SchemaError("hull-iou: --a/--b select from --models and cannot be combined with directories")
    rows = _models_at(args.dirs[0]) if args.dirs else _library(args.models)
    cols = _models_at(args.dirs[1]) if len(args.dirs) == 2 else None
    if args.a is not None or args.b is not None:
        if args.a is None or args.b is None:
            raise SchemaError("hull-iou: give both --a and --b, or neither")
        by_id = {m.id: m for m in rows}
        for v in (args.a, args.b):
            if v not in by_id:
                raise SchemaError(f"hull-iou: unknown model id {v}")
        rows, cols = [by_id[args.a]], [by_id[args.b]]
    cols_or_rows = rows if cols is None else cols
    if cols is None:
        table = similarity_table(rows, views=args.views, resolution=args.resolution)
        matrix = table.matrix
    else:
        matrix = similarity_table(rows, views=args.views, resolution=args.resolution, other=cols)
    lines = [",".join(["model"] + [str(m.id) for m in cols_or_rows])]
    for m, values in zip(rows, matrix):
        lines.append(",".join([str(m.id)] + [repr(float(v)) for v in values]))
    io.atomic_write(args.out, "\n".join(lines) + "\n")
    if args.png_dir:
        Path(args.png_dir).mkdir(parents=True, exist_ok=True)
        seen = {}
        for m in list(rows) + list(cols_or_rows):
            seen.setdefault(m.id, m)
        for m in seen.values():
            for v, yaw in enumerate(view_yaws(args.views)):
                io.write_mask_png(render_silhouette(m, yaw, args.resolution),
                                  Path(args.png_dir) / f"model{m.id}_view{v:03d}.png")
    _write_meta(args, {"command": "hull-iou", "shape_similarity": _similarity_meta(args.views, args.resolution)})
    return 0


# -- aggregate ----------------------------------------------------------------


def _field2d(arr: np.ndarray, name: str, shape: tuple[int, int]) -> np.ndarray:
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.shape != shape:
        raise SchemaError(f"{name}: shape {arr.shape} does not match mask shape {shape}")
    return arr


def cmd_aggregate(args) -> int:
    masks = io.read_pfld(args.mask)
    if masks.ndim != 2:
        raise SchemaError(f"mask: expected a 2D instance map, got shape {masks.shape}")
    shape = masks.shape
    offset = io.read_pfld(args.offset)
    if offset.shape != shape + (2,):
        raise SchemaError(f"offset: expected shape {shape + (2,)}, got {offset.shape}")
    reldepth = _field2d(io.read_pfld(args.reldepth), "reldepth", shape)
    depth = _field2d(io.read_pfld(args.depth), "depth", shape)
    attention = (
        _field2d(io.read_pfld(args.attention), "attention", shape) if args.attention else np.ones(shape)
    )
    logits = io.read_pfld(args.logits) if args.logits else None
    if logits is not None and logits.shape[:2] != shape:
        raise SchemaError(f"logits: shape {logits.shape} does not match mask shape {shape}")
    out = []
    for inst in sorted({int(v) for v in np.unique(masks) if v > 0}):
        m = masks == inst
        ca, dc = recover_center(offset, reldepth, depth, m, attention)
        entry = {"id": inst, "center_px": [float(ca[0]), float(ca[1])], "depth_m": float(dc)}
        if logits is not None:
            entry["pooled"] = [float(v) for v in mask_pool(logits, m, attention)]
        out.append(entry)
    io.atomic_write(args.out, json.dumps({"version": io.VERSION, "instances": out}, indent=1) + "\n")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carpose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    default_threads = os.cpu_count() or 1

    def common(p, seed=True):
        p.add_argument("--threads", type=_threads, default=default_threads,
                       help="worker threads (default: available cores); never changes output")
        if seed:
            p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")

    p = sub.add_parser("simulate", help="generate synthetic scenes with ground truth")
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--cars", type=_car_range, default=(5, 15), help="cars per scene, N or LO:HI (default 5:15)")
    p.add_argument("--noise", type=float, default=0.0, help="keypoint noise sigma in pixels")
    p.add_argument("--drop", type=float, default=0.0, help="keypoint drop rate in [0, 1)")
    p.add_argument("--depth-min", type=float, default=DEPTH_RANGE[0])
    p.add_argument("--depth-max", type=float, default=DEPTH_RANGE[1])
    p.add_argument("--models", help="model library directory (default: built-in library)")
    p.add_argument("--camera", help="camera.json (default: 1280x960, f=1000)")
    p.add_argument("--id-png-dir", help="also write instance-id PNGs here")
    p.add_argument("--out", default="-")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("solve", help="fit car poses and shapes to scene keypoints")
    p.add_argument("--scene", required=True)
    p.add_argument("--models")
    p.add_argument("--context", action=argparse.BooleanOptionalAction, default=False,
                   help="use neighbour co-planarity for sparsely annotated cars")
    p.add_argument("--lambda-n", type=float, default=LAMBDA_N)
    p.add_argument("--kappa", type=int, default=2)
    p.add_argument("--ground-term", choices=("origin", "contact"), default="origin")
    p.add_argument("--borrow", choices=("sparse", "rich"), default="sparse",
                   help="which cars use the neighbour term (default: sparse)")
    p.add_argument("--diagnostics", help="per-car diagnostic CSV")
    p.add_argument("--out", default="-")
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval", help="score predictions with A3DP")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--models")
    p.add_argument("--mode", choices=("abs", "rel"), default="abs")
    p.add_argument("--all-cars", action="store_true",
                   help="also score cars without labelled keypoints (default: labelled cars only)")
    p.add_argument("--views", type=int, default=DEFAULT_VIEWS)
    p.add_argument("--resolution", type=int, default=DEFAULT_RESOLUTION)
    p.add_argument("--out", default="-")
    p.add_argument("--meta", help="metadata JSON (default: <out>.meta.json when --out is a file)")
    common(p, seed=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("hull-iou", help="visual-hull similarity matrix between car models")
    p.add_argument("dirs", nargs="*", metavar="MODEL_DIR",
                   help="zero, one or two model or library directories; two give a cross matrix")
    p.add_argument("--models", help="library used when no MODEL_DIR is given (default: built-in)")
    p.add_argument("--a", type=int, help="restrict to one row model id (with --b)")
    p.add_argument("--b", type=int, help="restrict to one column model id (with --a)")
    p.add_argument("--views", type=int, default=DEFAULT_VIEWS)
    p.add_argument("--resolution", type=int, default=DEFAULT_RESOLUTION)
    p.add_argument("--png-dir", help="also write every silhouette as an 8-bit 0/255 PNG here")
    p.add_argument("--out", default="-")
    p.add_argument("--meta", help="metadata JSON (default: <out>.meta.json when --out is a file)")
    common(p, seed=False)
    p.set_defaults(func=cmd_hull_iou)

    p = sub.add_parser("aggregate", help="recover instance centres from PFLD pixel fields")
    p.add_argument("--mask", required=True, help="instance map (0 background, positive ids)")
    p.add_argument("--offset", required=True, help="(h, w, 2) centre-pointing pixel offsets")
    p.add_argument("--reldepth", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--attention", help="(h, w) attention; uniform if omitted")
    p.add_argument("--logits", help="(h, w, b) field to mask-pool per instance")
    p.add_argument("--out", default="-")
    common(p, seed=False)
    p.set_defaults(func=cmd_aggregate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit with 2, --help with 0
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"carpose {args.command}: schema error: {exc}", file=sys.stderr)
        return 2
    except (CarposeError, OSError, ValueError) as exc:
        print(f"carpose {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
