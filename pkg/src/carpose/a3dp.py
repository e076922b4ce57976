"""Average 3D precision for car pose and shape predictions.

A prediction is a true positive for a ground-truth car when all three hold:

* shape similarity of the two library shapes is at least ``delta_s``;
* ``arccos(|q . q*|)`` is at most ``delta_r``;
* the translation error ``|t - t*|`` is at most ``delta_t`` metres
  (``abs`` mode) or ``|t - t*| / |t*|`` is at most ``delta_t`` (``rel`` mode).

Ten criteria sets, index-paired from loose to strict, are each scored with
101-point interpolated average precision; the metric reports the ten APs,
their mean, the loose criterion (index 0) and a strict criterion.

Matching is greedy per image. Predictions are visited by descending score
(ties: smaller translation error to the nearest ground truth, then input
order). Each takes the unmatched, non-ignored ground truth it satisfies with
the smallest translation error. Ground truths at depth ``>= 100`` m are
ignored, and a prediction that only satisfies ignored ground truths is
ignored as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import MixedImageIdsError, UnknownShapeError
from .geometry import Pose, rotation_distance

DEPTH_CUTOFF = 100.0
RECALL_POINTS = 101

DELTA_S = (0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95)
DELTA_T_ABS = (2.8, 2.5, 2.2, 1.9, 1.6, 1.3, 1.0, 0.7, 0.4, 0.1)
DELTA_T_REL = (0.10, 0.09, 0.08, 0.07, 0.06, 0.05, 0.04, 0.03, 0.02, 0.01)
DELTA_R = tuple(k * math.pi / 60.0 for k in range(10, 0, -1))

MODES = ("abs", "rel")

TP, FP, IGNORED = "tp", "fp", "ignored"


@dataclass(frozen=True)
class Prediction:
    image_id: str
    shape_id: int
    pose: Pose
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("prediction score must be finite")


@dataclass(frozen=True)
class GroundTruthInstance:
    """A scored-against instance; ``ignore`` marks one that neither counts
    towards recall nor turns a matching prediction into a false positive."""

    image_id: str
    shape_id: int
    pose: Pose
    ignore: bool = False

    def __post_init__(self):
        if not self.pose.translation[2] > 0:
            raise ValueError("ground-truth depth must be positive")


@dataclass(frozen=True)
class CriteriaSet:
    delta_s: float
    delta_t: float
    delta_r: float

    def __post_init__(self):
        if not 0 < self.delta_s <= 1:
            raise ValueError("delta_s must lie in (0, 1]")
        if not self.delta_t > 0:
            raise ValueError("delta_t must be positive")
        if not 0 < self.delta_r <= math.pi:
            raise ValueError("delta_r must lie in (0, pi]")


@dataclass(frozen=True)
class ThresholdGrid:
    mode: str
    criteria: tuple[CriteriaSet, ...]

    @classmethod
    def for_mode(cls, mode: str) -> "ThresholdGrid":
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        dt = DELTA_T_ABS if mode == "abs" else DELTA_T_REL
        return cls(mode, tuple(CriteriaSet(s, t, r) for s, t, r in zip(DELTA_S, dt, DELTA_R)))

    def __len__(self) -> int:
        return len(self.criteria)

    def __getitem__(self, i: int) -> CriteriaSet:
        return self.criteria[i]


ABS_GRID = ThresholdGrid.for_mode("abs")
REL_GRID = ThresholdGrid.for_mode("rel")
LOOSE_INDEX = 0
# the strict absolute criterion is stated as (0.75, 1.4 m, pi/12), which is
# not on the 0.3 m translation grid; it is evaluated as an extra criterion
STRICT_ABS = CriteriaSet(0.75, 1.4, math.pi / 12.0)
STRICT_REL_INDEX = 5

ShapeSimilarity = Callable[[int, int], float]


def translation_error(pred: Pose, gt: Pose, mode: str = "abs") -> float:
    d = float(np.linalg.norm(pred.t - gt.t))
    if mode == "abs":
        return d
    if mode == "rel":
        return d / float(np.linalg.norm(gt.t))
    raise ValueError(f"mode must be one of {MODES}")


def _similarity(sim: ShapeSimilarity, a: int, b: int) -> float:
    try:
        return float(sim(a, b))
    except UnknownShapeError:
        raise
    except (KeyError, IndexError) as exc:
        raise UnknownShapeError(f"unknown shape pair ({a}, {b})") from exc


def is_true_positive(pred: Prediction | GroundTruthInstance, gt: GroundTruthInstance, criteria: CriteriaSet,
                     mode: str, sim: ShapeSimilarity) -> bool:
    if _similarity(sim, pred.shape_id, gt.shape_id) < criteria.delta_s:
        return False
    if rotation_distance(pred.pose.rotation, gt.pose.rotation) > criteria.delta_r:
        return False
    return translation_error(pred.pose, gt.pose, mode) <= criteria.delta_t


@dataclass(frozen=True)
class MatchResult:
    """Per-image outcome; ``order`` lists prediction indices in visiting order."""

    order: tuple[int, ...]
    labels: tuple[str, ...]  # label of each visited prediction
    matches: tuple[tuple[int, int], ...]  # (prediction index, gt index)
    num_gt: int  # non-ignored ground truths
    ignored_gt: tuple[int, ...] = field(default=())

    @property
    def tp(self) -> int:
        return self.labels.count(TP)

    @property
    def fp(self) -> int:
        return self.labels.count(FP)

    @property
    def fn(self) -> int:
        return self.num_gt - self.tp


def _image_id(preds: Sequence[Prediction], gts: Sequence[GroundTruthInstance]) -> str | None:
    ids = {p.image_id for p in preds} | {g.image_id for g in gts}
    if len(ids) > 1:
        raise MixedImageIdsError(f"match() got instances from several images: {sorted(map(str, ids))}")
    return next(iter(ids), None)


def visiting_order(preds: Sequence[Prediction], gts: Sequence[GroundTruthInstance]) -> list[int]:
    """Descending score; ties by translation error to the nearest ground truth, then input order."""
    def nearest(p: Prediction) -> float:
        return min((translation_error(p.pose, g.pose) for g in gts), default=math.inf)

    return sorted(range(len(preds)), key=lambda i: (-preds[i].score, nearest(preds[i]), i))


def match(preds: Sequence[Prediction], gts: Sequence[GroundTruthInstance], criteria: CriteriaSet,
          mode: str, sim: ShapeSimilarity, depth_cutoff: float = DEPTH_CUTOFF) -> MatchResult:
    """Greedy matching of one image's predictions to its ground truths."""
    _image_id(preds, gts)
    ignored = [g.ignore or g.pose.translation[2] >= depth_cutoff for g in gts]
    taken = [False] * len(gts)
    order = visiting_order(preds, gts)
    labels, matches = [], []
    for i in order:
        p = preds[i]
        best, best_err, hits_ignored = None, math.inf, False
        for j, g in enumerate(gts):
            if taken[j] or not is_true_positive(p, g, criteria, mode, sim):
                continue
            if ignored[j]:
                hits_ignored = True
                continue
            err = translation_error(p.pose, g.pose, mode)
            if err < best_err:
                best, best_err = j, err
        if best is not None:
            taken[best] = True
            labels.append(TP)
            matches.append((i, best))
        elif hits_ignored:
            labels.append(IGNORED)
        else:
            labels.append(FP)
    return MatchResult(
        tuple(order), tuple(labels), tuple(matches), len(gts) - sum(ignored),
        tuple(j for j, ig in enumerate(ignored) if ig),
    )


def average_precision(sequence: Sequence[bool], num_gt: int) -> float:
    """101-point interpolated AP (percent) of a score-sorted TP/FP sequence.

    ``sequence`` holds True for a true positive and False for a false
    positive. Returns NaN when there is no ground truth.
    """
    if num_gt <= 0:
        return math.nan
    if len(sequence) == 0:
        return 0.0
    hits = np.asarray(sequence, dtype=bool)
    tp = np.cumsum(hits, dtype=np.int64)
    n = np.arange(1, len(hits) + 1, dtype=np.int64)
    precision = tp / n
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= k / 100 compared exactly in integers: 100 * tp >= k * num_gt
    k = np.arange(RECALL_POINTS, dtype=np.int64)
    first = np.searchsorted(100 * tp, k * num_gt, side="left")
    sampled = np.where(first < len(hits), envelope[np.minimum(first, len(hits) - 1)], 0.0)
    return float(math.fsum(sampled.tolist()) / RECALL_POINTS * 100.0)


def _group(items: Iterable, order: list[str]) -> dict[str, list]:
    groups: dict[str, list] = {}
    for it in items:
        if it.image_id not in groups:
            groups[it.image_id] = []
            if it.image_id not in order:
                order.append(it.image_id)
        groups[it.image_id].append(it)
    return groups


def evaluate_criteria(preds: Sequence[Prediction], gts: Sequence[GroundTruthInstance], criteria: CriteriaSet,
                      mode: str, sim: ShapeSimilarity, depth_cutoff: float = DEPTH_CUTOFF) -> float:
    """AP (percent) of one criteria set over all images."""
    images: list[str] = []
    gt_by = _group(gts, images)
    pred_by = _group(preds, images)
    entries = []  # (-score, image rank, visit rank, is_tp)
    num_gt = 0
    for rank, image in enumerate(images):
        ps, gs = pred_by.get(image, []), gt_by.get(image, [])
        res = match(ps, gs, criteria, mode, sim, depth_cutoff)
        num_gt += res.num_gt
        for v, (i, label) in enumerate(zip(res.order, res.labels)):
            if label != IGNORED:
                entries.append((-ps[i].score, rank, v, label == TP))
    entries.sort()
    return average_precision([e[3] for e in entries], num_gt)


@dataclass(frozen=True)
class A3DPResult:
    mode: str
    aps: tuple[float, ...]
    mean: float
    c_l: float
    c_s: float
    strict_criteria: CriteriaSet
    metadata: dict = field(default_factory=dict, compare=False)


def _nanmean(values: Sequence[float]) -> float:
    finite = [v for v in values if not math.isnan(v)]
    return math.fsum(finite) / len(finite) if finite else math.nan


def a3dp(preds: Sequence[Prediction], gts: Sequence[GroundTruthInstance], sim: ShapeSimilarity,
         mode: str = "abs", depth_cutoff: float = DEPTH_CUTOFF) -> A3DPResult:
    """Score predictions over the ten-entry grid of ``mode``."""
    grid = ThresholdGrid.for_mode(mode)
    aps = tuple(evaluate_criteria(preds, gts, c, mode, sim, depth_cutoff) for c in grid.criteria)
    if mode == "abs":
        strict = STRICT_ABS
        c_s = evaluate_criteria(preds, gts, strict, mode, sim, depth_cutoff)
        note = "c-s evaluated off-grid at delta_t = 1.4 m"
    else:
        strict = grid[STRICT_REL_INDEX]
        c_s = aps[STRICT_REL_INDEX]
        note = f"c-s is grid index {STRICT_REL_INDEX}"
    meta = {
        "loose_index": LOOSE_INDEX,
        "strict": note,
        "depth_cutoff_m": depth_cutoff,
        "strict_grid_index_5": aps[STRICT_REL_INDEX],
    }
    return A3DPResult(mode, aps, _nanmean(aps), aps[LOOSE_INDEX], c_s, strict, meta)
