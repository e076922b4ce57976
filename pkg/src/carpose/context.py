"""Joint multi-car pose solving with a co-planarity prior between neighbours.

Cars with rich annotations (more than 6 keypoints spread over at least 3
surfaces) are solved on their own by exhaustive model fitting. Every other
car is then solved against the frozen rich cars: its pose minimises the
reprojection energy plus ``lambda_n`` times the co-planarity energy to its
``kappa`` nearest rich neighbours (nearest in mean keypoint position).
A car with fewer than four labelled keypoints cannot be started from EPnP;
it is solved only when it has neighbours, from neighbour-derived starting
poses. Cars without any labelled keypoint stay unsolved.

Co-planarity compares roll, pitch and a ground coordinate derived from the
vertical translation and the model height. Angles are the vehicle Euler
angles of :mod:`carpose.geometry` (yaw about the vertical camera axis).

The stage-two optimiser is Levenberg-Marquardt on squared residuals: the
per-keypoint pixel offsets and, per neighbour, ``sqrt(lambda_n)`` times the
three co-planarity differences. :func:`scene_energy` reports the energy in
its literal form (sum of keypoint distances plus weighted squared
co-planarity terms).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DegenerateConfigurationError,
    GimbalLockError,
    InsufficientCorrespondencesError,
    NoConsensusError,
    NoModelAcceptedError,
)
from .geometry import (
    MIN_DEPTH,
    SURFACES,
    CarModel,
    Intrinsics,
    KeypointObservation,
    Pose,
    SurfaceTable,
    UnitQuaternion,
    euler_from_matrix,
    euler_from_pose,
)
from .pnp import (
    BEHIND_CAMERA_PENALTY,
    CorrespondenceSet,
    ModelFit,
    epnp,
    fit_model,
    reprojection_energy,
)

KAPPA = 2
LAMBDA_N = 100.0
MIN_KEYPOINTS = 4
RICH_MIN_KEYPOINTS = 7
RICH_MIN_SURFACES = 3

LM_MAX_ITERS = 100
LM_GRAD_TOL = 1e-8
LM_DAMPING = 1e-3
LM_DAMPING_UP = 10.0
LM_DAMPING_DOWN = 0.5
LM_DAMPING_MAX = 1e12
LM_REL_TOL = 1e-14
JACOBIAN_STEP = 1e-6

GROUND_TERMS = ("origin", "contact")
BORROW_RULES = ("sparse", "rich")


def richness(obs: KeypointObservation, table: SurfaceTable = SURFACES) -> bool:
    """More than 6 labelled keypoints touching at least 3 surfaces."""
    idx = obs.indices
    if len(idx) < RICH_MIN_KEYPOINTS:
        return False
    touched = {table.surface_of(int(k)) for k in idx} - {None}
    return len(touched) >= RICH_MIN_SURFACES


@dataclass(frozen=True, eq=False)
class CarHypothesis:
    index: int
    observation: KeypointObservation
    mask: np.ndarray | None = None
    fit: ModelFit | None = None
    rich: bool | None = None

    def __post_init__(self):
        if self.rich is None:
            object.__setattr__(self, "rich", richness(self.observation))


@dataclass(frozen=True, eq=False)
class SceneProblem:
    """One image worth of cars plus solver settings.

    ``ground_term`` selects the co-planarity height coordinate: ``"origin"``
    uses ``y - h`` and ``"contact"`` the bottom-contact ``y + h / 2``.
    ``borrow`` selects which cars use the neighbour term: ``"sparse"`` (cars
    that are not rich, the default) or ``"rich"``.
    """

    cars: tuple[CarHypothesis, ...]
    library: tuple[CarModel, ...]
    K: Intrinsics
    kappa: int = KAPPA
    lambda_n: float = LAMBDA_N
    ground_term: str = "origin"
    borrow: str = "sparse"

    def __post_init__(self):
        object.__setattr__(self, "cars", tuple(self.cars))
        object.__setattr__(self, "library", tuple(self.library))
        if self.kappa < 1:
            raise ValueError("kappa must be at least 1")
        if self.lambda_n < 0:
            raise ValueError("lambda_n must be non-negative")
        if self.ground_term not in GROUND_TERMS:
            raise ValueError(f"ground_term must be one of {GROUND_TERMS}")
        if self.borrow not in BORROW_RULES:
            raise ValueError(f"borrow must be one of {BORROW_RULES}")
        for pos, car in enumerate(self.cars):
            if car.index != pos:
                raise ValueError(f"car at position {pos} has index {car.index}")

    @classmethod
    def from_observations(cls, observations: Sequence[KeypointObservation], library, K,
                          masks: Sequence[np.ndarray | None] | None = None, **kwargs) -> "SceneProblem":
        masks = masks if masks is not None else [None] * len(observations)
        cars = tuple(CarHypothesis(i, o, m) for i, (o, m) in enumerate(zip(observations, masks)))
        return cls(cars, tuple(library), K, **kwargs)

    def model(self, model_id: int) -> CarModel:
        for m in self.library:
            if m.id == model_id:
                return m
        raise KeyError(model_id)

    def borrows(self, c: int) -> bool:
        rich = self.cars[c].rich
        return not rich if self.borrow == "sparse" else rich


def neighbors(c: int, scene: SceneProblem, eligible: Sequence[int] | None = None) -> list[int]:
    """The ``scene.kappa`` nearest eligible cars to car ``c``.

    Distance is between mean labelled-keypoint pixels; ties go to the lower
    index. ``eligible`` defaults to the rich cars.
    """
    if eligible is None:
        eligible = [i for i, car in enumerate(scene.cars) if car.rich]
    here = scene.cars[c].observation.mean_xy()
    ranked = []
    for i in eligible:
        if i == c or scene.cars[i].observation.count == 0:
            continue
        d = float(np.linalg.norm(scene.cars[i].observation.mean_xy() - here))
        ranked.append((d, i))
    ranked.sort()
    return [i for _, i in ranked[: scene.kappa]]


def ground_coordinate(y: float, height: float, ground_term: str = "origin") -> float:
    if ground_term == "origin":
        return y - height
    if ground_term == "contact":
        return y + height / 2.0
    raise ValueError(f"ground_term must be one of {GROUND_TERMS}")


def coplanar_energy(p: Pose, model: CarModel, p_n: Pose, model_n: CarModel,
                    ground_term: str = "origin") -> float:
    """Squared roll, pitch and ground-height differences between two cars."""
    a, b, _ = euler_from_pose(p)
    a_n, b_n, _ = euler_from_pose(p_n)
    g = ground_coordinate(p.translation[1], model.height, ground_term)
    g_n = ground_coordinate(p_n.translation[1], model_n.height, ground_term)
    return (a - a_n) ** 2 + (b - b_n) ** 2 + (g - g_n) ** 2


@dataclass(frozen=True)
class EnergyTerms:
    pnp: float
    neighbor: float  # unweighted sum of coplanar energies
    neighbors: tuple[int, ...]


def energy_terms(scene: SceneProblem, poses: Sequence[Pose], shapes: Sequence[int]) -> list[EnergyTerms]:
    """Per-car reprojection energy and co-planarity energy to its neighbours."""
    if len(poses) != len(scene.cars) or len(shapes) != len(scene.cars):
        raise ValueError("need one pose and one shape per car")
    models = [scene.model(s) for s in shapes]
    out = []
    for c, car in enumerate(scene.cars):
        e_pnp, _ = reprojection_energy(poses[c], models[c], car.observation, scene.K)
        nbrs = tuple(neighbors(c, scene)) if scene.borrows(c) else ()
        e_n = sum(
            coplanar_energy(poses[c], models[c], poses[n], models[n], scene.ground_term) for n in nbrs
        )
        out.append(EnergyTerms(e_pnp, float(e_n), nbrs))
    return out


def scene_energy(scene: SceneProblem, poses: Sequence[Pose], shapes: Sequence[int]) -> float:
    """Total reprojection energy plus ``lambda_n``-weighted neighbour energy."""
    return float(sum(t.pnp + scene.lambda_n * t.neighbor for t in energy_terms(scene, poses, shapes)))


# -- Levenberg-Marquardt ------------------------------------------------------


def _rodrigues(w: np.ndarray) -> np.ndarray:
    theta = math.sqrt(float(w @ w))
    if theta < 1e-300:
        return np.eye(3)
    k = w / theta
    Kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(theta) * Kx + (1.0 - math.cos(theta)) * (Kx @ Kx)


def _retract(R: np.ndarray, t: np.ndarray, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return _rodrigues(delta[:3]) @ R, t + delta[3:]


@dataclass(frozen=True)
class LMResult:
    pose: Pose
    cost: float
    iterations: int
    converged: bool
    trace: tuple[float, ...]  # cost after every accepted step, starting with the initial cost


ResidualFn = Callable[[np.ndarray, np.ndarray], "np.ndarray | None"]


def levenberg_marquardt(fun: ResidualFn, init: Pose, max_iters: int = LM_MAX_ITERS,
                        grad_tol: float = LM_GRAD_TOL, damping: float = LM_DAMPING) -> LMResult:
    """Minimise ``|fun(R, t)|^2`` over a pose with a left-multiplied rotation update.

    ``fun`` may return ``None`` for poses outside its domain; such steps are
    rejected. The Jacobian is taken by central differences. Every trial step
    counts towards ``max_iters``.
    """
    R, t = init.R.copy(), init.t.copy()
    r = fun(R, t)
    if r is None:
        raise GimbalLockError("initial pose is outside the residual domain")
    cost = float(r @ r)
    trace = [cost]
    mu = damping
    converged = False
    iters = 0
    J = None
    while iters < max_iters:
        if J is None:
            J = np.empty((len(r), 6))
            for k in range(6):
                d = np.zeros(6)
                d[k] = JACOBIAN_STEP
                rp = fun(*_retract(R, t, d))
                rm = fun(*_retract(R, t, -d))
                if rp is None or rm is None:
                    J = None
                    break
                J[:, k] = (rp - rm) / (2.0 * JACOBIAN_STEP)
            if J is None:
                break
            g = J.T @ r
            if np.max(np.abs(g)) < grad_tol:
                converged = True
                break
            A = J.T @ J
            diag = np.maximum(np.diag(A), 1e-12 * max(float(np.max(np.diag(A))), 1e-300))
        iters += 1
        try:
            step = np.linalg.solve(A + mu * np.diag(diag), -g)
        except np.linalg.LinAlgError:
            mu *= LM_DAMPING_UP
            if mu > LM_DAMPING_MAX:
                break
            continue
        R_new, t_new = _retract(R, t, step)
        r_new = fun(R_new, t_new)
        cost_new = math.inf if r_new is None else float(r_new @ r_new)
        if cost_new < cost:
            rel = (cost - cost_new) / max(cost, 1e-300)
            R, t, r, cost = R_new, t_new, r_new, cost_new
            trace.append(cost)
            mu *= LM_DAMPING_DOWN
            J = None
            if rel < LM_REL_TOL:
                converged = True
                break
        else:
            mu *= LM_DAMPING_UP
            if mu > LM_DAMPING_MAX:
                converged = True
                break
    return LMResult(Pose.from_rt(R, t), cost, iters, converged, tuple(trace))


def _residual_fn(model: CarModel, obs: KeypointObservation, K: Intrinsics,
                 targets: Sequence[tuple[float, float, float]], lambda_n: float,
                 ground_term: str) -> ResidualFn:
    idx = obs.indices
    pw = model.keypoints3d[idx]
    uv = obs.xy[idx]
    w = math.sqrt(lambda_n)
    tgt = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    h = model.height

    def fun(R: np.ndarray, t: np.ndarray):
        cam = pw @ R.T + t
        z = cam[:, 2]
        valid = z > MIN_DEPTH
        zs = np.where(valid, z, 1.0)
        du = np.where(valid, K.fx * cam[:, 0] / zs + K.ux - uv[:, 0], BEHIND_CAMERA_PENALTY)
        dv = np.where(valid, K.fy * cam[:, 1] / zs + K.uy - uv[:, 1], 0.0)
        if len(tgt) == 0:
            return np.concatenate([du, dv])
        try:
            roll, pitch, _ = euler_from_matrix(R)
        except GimbalLockError:
            return None
        g = ground_coordinate(float(t[1]), h, ground_term)
        cop = w * (np.array([roll, pitch, g]) - tgt)
        return np.concatenate([du, dv, cop.reshape(-1)])

    return fun


# -- two-stage solve ----------------------------------------------------------


@dataclass(frozen=True)
class CarSolution:
    """Outcome for one car. ``status`` is ``stage1``, ``stage2`` or ``unsolved``."""

    index: int
    status: str
    rich: bool
    fit: ModelFit | None = None
    neighbors: tuple[int, ...] = ()
    pnp_energy: float = math.nan
    neighbor_energy: float = math.nan
    reason: str = ""

    @property
    def solved(self) -> bool:
        return self.fit is not None


def _score(fit: ModelFit) -> float:
    return 1.0 / (1.0 + fit.mean_reprojection_error)


def _average_rotation(rotations: Sequence[UnitQuaternion], weights: Sequence[float]) -> UnitQuaternion:
    ref = rotations[0].as_array()
    acc = np.zeros(4)
    for q, w in zip(rotations, weights):
        v = q.as_array()
        acc += w * (v if v @ ref >= 0 else -v)
    return UnitQuaternion(*acc)


def _neighbor_inits(model: CarModel, obs: KeypointObservation, K: Intrinsics,
                    fits: Sequence[ModelFit], nmodels: Sequence[CarModel], ground_term: str) -> list[Pose]:
    """Poses built from neighbour orientation, ground height and the keypoint ray.

    The averaged neighbour rotation is tried at four yaw offsets, since
    neighbours may drive in either direction.
    """
    weights = [_score(f) for f in fits]
    q = _average_rotation([f.pose.rotation for f in fits], weights)
    gs = [ground_coordinate(f.pose.translation[1], m.height, ground_term) for f, m in zip(fits, nmodels)]
    g = float(np.average(gs, weights=weights))
    if ground_term == "origin":
        y = g + model.height
    else:
        y = g - model.height / 2.0
    depth = float(np.average([f.pose.translation[2] for f in fits], weights=weights))
    mx, my = obs.mean_xy()
    ray = np.array([(mx - K.ux) / K.fx, (my - K.uy) / K.fy, 1.0])
    idx = obs.indices
    out = []
    for k in range(4):
        rot = UnitQuaternion.from_axis_angle((0.0, 1.0, 0.0), k * math.pi / 2.0) * q
        off = rot.as_matrix() @ model.keypoints3d[idx].mean(axis=0)
        d = (y + off[1]) / ray[1] if abs(ray[1]) > 1e-3 else -1.0
        if not d > MIN_DEPTH:
            d = depth
        out.append(Pose(rot, tuple(d * ray - off)))
    return out


def _stage_two(c: int, scene: SceneProblem, stage1: dict[int, ModelFit], use_context: bool) -> CarSolution:
    car = scene.cars[c]
    obs = car.observation
    if obs.count == 0:
        return CarSolution(c, "unsolved", car.rich, reason="no labelled keypoints")
    nbrs: tuple[int, ...] = ()
    if use_context and scene.borrows(c):
        nbrs = tuple(neighbors(c, scene, eligible=sorted(stage1)))
    if obs.count < MIN_KEYPOINTS and not nbrs:
        # too few points for EPnP and no neighbour pose to start from
        return CarSolution(c, "unsolved", car.rich, reason=f"only {obs.count} labelled keypoints")
    nfits = [stage1[n] for n in nbrs]
    nmodels = [scene.model(f.model_id) for f in nfits]
    targets = []
    for f, m in zip(nfits, nmodels):
        a, b, _ = euler_from_pose(f.pose)
        targets.append((a, b, ground_coordinate(f.pose.translation[1], m.height, scene.ground_term)))

    best = None
    for model in scene.library:
        fun = _residual_fn(model, obs, scene.K, targets, scene.lambda_n, scene.ground_term)
        inits = []
        if obs.count >= MIN_KEYPOINTS:
            try:
                inits.append(epnp(CorrespondenceSet.from_observation(obs, model), scene.K).pose)
            except (DegenerateConfigurationError, InsufficientCorrespondencesError):
                pass
        if nfits:
            inits.extend(_neighbor_inits(model, obs, scene.K, nfits, nmodels, scene.ground_term))
        for init in inits:
            try:
                res = levenberg_marquardt(fun, init)
            except GimbalLockError:
                continue
            if best is None or res.cost < best[0].cost:
                best = (res, model)
    if best is None:
        return CarSolution(c, "unsolved", car.rich, neighbors=nbrs, reason="no initial pose")
    res, model = best
    e_pnp, mean = reprojection_energy(res.pose, model, obs, scene.K)
    e_n = sum(
        coplanar_energy(res.pose, model, f.pose, m, scene.ground_term) for f, m in zip(nfits, nmodels)
    )
    fit = ModelFit(model.id, res.pose, mean, None, frozenset(int(i) for i in obs.indices))
    return CarSolution(c, "stage2", car.rich, fit, nbrs, e_pnp, float(e_n))


def _stage_one(c: int, scene: SceneProblem, seed: int) -> ModelFit | None:
    car = scene.cars[c]
    try:
        return fit_model(car.observation, scene.library, scene.K, car.mask, seed=seed)
    except (NoModelAcceptedError, InsufficientCorrespondencesError, NoConsensusError):
        return None


def solve_stage_one(scene: SceneProblem, seed: int = 0) -> SceneProblem:
    """Copy of ``scene`` with stage-1 fits attached to its rich cars."""
    cars = []
    for c, car in enumerate(scene.cars):
        fit = car.fit
        if car.rich and fit is None:
            fit = _stage_one(c, scene, seed)
        cars.append(CarHypothesis(car.index, car.observation, car.mask, fit, car.rich))
    return replace(scene, cars=tuple(cars))


def solve_scene(scene: SceneProblem, seed: int = 0, context: bool = True,
                threads: int = 1) -> list[CarSolution]:
    """Two-stage solve; one :class:`CarSolution` per car, in car order.

    Stage 1 runs :func:`carpose.pnp.fit_model` on every rich car. Stage 2
    solves the remaining cars (and rich cars no model was accepted for)
    against the frozen stage-1 poses, trying every library model and, per
    model, an EPnP start plus neighbour-derived starts. The lowest final
    objective wins; ties keep the earlier model. Rich cars that already carry
    a ``fit`` (see :func:`solve_stage_one`) are not refitted. Results do not
    depend on ``threads``.
    """
    n = len(scene.cars)
    rich = [c for c in range(n) if scene.cars[c].rich]
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    run = pool.map if pool is not None else map
    try:
        todo = [c for c in rich if scene.cars[c].fit is None]
        fits = dict(zip(todo, run(lambda c: _stage_one(c, scene, seed), todo)))
        for c in rich:
            if scene.cars[c].fit is not None:
                fits[c] = scene.cars[c].fit
        stage1 = {c: fits[c] for c in rich if fits[c] is not None}
        rest = [c for c in range(n) if c not in stage1]
        second = list(run(lambda c: _stage_two(c, scene, stage1, context), rest))
    finally:
        if pool is not None:
            pool.shutdown()
    out: dict[int, CarSolution] = {s.index: s for s in second}
    for c, f in stage1.items():
        e_pnp, _ = reprojection_energy(f.pose, scene.model(f.model_id), scene.cars[c].observation, scene.K)
        out[c] = CarSolution(c, "stage1", True, f, (), e_pnp, 0.0)
    return [out[c] for c in range(n)]


__all__ = [
    "CarHypothesis",
    "CarSolution",
    "EnergyTerms",
    "LMResult",
    "SceneProblem",
    "coplanar_energy",
    "energy_terms",
    "ground_coordinate",
    "levenberg_marquardt",
    "neighbors",
    "richness",
    "scene_energy",
    "solve_scene",
    "solve_stage_one",
]
