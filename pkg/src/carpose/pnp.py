"""Single-car pose estimation from 2D-3D keypoint correspondences.

EPnP (Lepetit et al.) expresses every model point as a barycentric
combination of four control points (three for planar point sets), solves
for the control points in the camera frame from the null space of a linear
system, refines the null-space coefficients by Gauss-Newton and finally
recovers the rigid transform by absolute orientation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import (
    DegenerateConfigurationError,
    InsufficientCorrespondencesError,
    NoConsensusError,
    NoLabelledKeypointsError,
    NoModelAcceptedError,
)
from .geometry import (
    MIN_DEPTH,
    NUM_KEYPOINTS,
    CarModel,
    Intrinsics,
    KeypointObservation,
    Pose,
    project_points,
)

BEHIND_CAMERA_PENALTY = 1e6
ACCEPT_REPROJECTION_PX = 5.0
ACCEPT_BOUNDARY_PX = 5.0
GN_ITERATIONS = 10
GN_STEP_TOL = 1e-12
# relative eigenvalue thresholds on the centred point covariance
PLANAR_RTOL = 1e-10
DEGENERATE_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    indices: np.ndarray
    image_points: np.ndarray
    model_points: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        uv = np.asarray(self.image_points, dtype=np.float64).reshape(-1, 2)
        xyz = np.asarray(self.model_points, dtype=np.float64).reshape(-1, 3)
        if not (len(idx) == len(uv) == len(xyz)):
            raise ValueError("correspondence arrays differ in length")
        if len(np.unique(idx)) != len(idx) or (len(idx) and (idx.min() < 0 or idx.max() >= NUM_KEYPOINTS)):
            raise ValueError("keypoint indices must be unique and in [0, 66)")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "image_points", uv)
        object.__setattr__(self, "model_points", xyz)

    def __len__(self) -> int:
        return len(self.indices)

    @classmethod
    def from_observation(cls, obs: KeypointObservation, model: CarModel) -> "CorrespondenceSet":
        idx = obs.indices
        return cls(idx, obs.xy[idx], model.keypoints3d[idx])

    def take(self, rows: Sequence[int]) -> "CorrespondenceSet":
        rows = np.asarray(rows, dtype=np.int64)
        return CorrespondenceSet(self.indices[rows], self.image_points[rows], self.model_points[rows])


@dataclass(frozen=True)
class PnPSolution:
    pose: Pose
    mean_reprojection_error: float
    inlier_indices: frozenset[int] = field(default_factory=frozenset)


@dataclass(frozen=True)
class ModelFit:
    model_id: int
    pose: Pose
    mean_reprojection_error: float
    boundary_offset: float | None = None
    inlier_indices: frozenset[int] = field(default_factory=frozenset)


def residuals(pose: Pose, K: Intrinsics, model_points: np.ndarray, image_points: np.ndarray) -> np.ndarray:
    """Per-point reprojection distance in pixels; behind-camera points get the penalty."""
    uv, valid = project_points(K, pose, model_points)
    err = np.full(len(model_points), BEHIND_CAMERA_PENALTY)
    err[valid] = np.linalg.norm(uv[valid] - image_points[valid], axis=1)
    return err


def _residuals_rt(R, t, K, pw, uv):
    cam = pw @ R.T + t
    z = cam[:, 2]
    valid = z > MIN_DEPTH
    zs = np.where(valid, z, 1.0)
    du = K.fx * cam[:, 0] / zs + K.ux - uv[:, 0]
    dv = K.fy * cam[:, 1] / zs + K.uy - uv[:, 1]
    return np.where(valid, np.sqrt(du * du + dv * dv), BEHIND_CAMERA_PENALTY)


def reprojection_energy(p: Pose, model: CarModel, obs: KeypointObservation,
                        K: Intrinsics) -> tuple[float, float]:
    """Sum and mean of labelled-keypoint reprojection distances (pixels)."""
    idx = obs.indices
    if len(idx) == 0:
        raise NoLabelledKeypointsError("observation has no labelled keypoints")
    err = residuals(p, K, model.keypoints3d[idx], obs.xy[idx])
    total = float(err.sum())
    return total, total / len(idx)


# -- EPnP ---------------------------------------------------------------------


def _control_points(pw: np.ndarray) -> np.ndarray:
    c0 = pw.mean(axis=0)
    centred = pw - c0
    cov = centred.T @ centred / len(pw)
    evals, evecs = np.linalg.eigh(cov)  # ascending
    evals = np.clip(evals, 0.0, None)
    top = evals[-1]
    if not top > 0 or evals[1] <= DEGENERATE_RTOL * top:
        raise DegenerateConfigurationError("model points are coincident or collinear")
    planar = evals[0] <= PLANAR_RTOL * top
    axes = [2, 1] if planar else [2, 1, 0]
    ctrl = [c0] + [c0 + math.sqrt(evals[a]) * evecs[:, a] for a in axes]
    return np.array(ctrl)


def _barycentric(pw: np.ndarray, cw: np.ndarray) -> np.ndarray:
    nc = len(cw)
    A = np.vstack([cw.T, np.ones(nc)])  # (4, nc)
    B = np.vstack([pw.T, np.ones(len(pw))])  # (4, n)
    if nc == 4:
        return np.linalg.solve(A, B).T
    return np.linalg.lstsq(A, B, rcond=None)[0].T


def _pair_list(nc: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(nc), 2))


def _betas_objective(betas, dv, rho):
    """Residuals ``|sum_i beta_i dv_i|^2 - rho`` and their Jacobian."""
    d = betas @ dv  # (pairs, 3)
    r = (d * d).sum(axis=1) - rho
    J = 2.0 * (dv @ d[:, :, None])[:, :, 0]
    return r, J


def _gauss_newton(betas, dv, rho):
    betas = np.array(betas, dtype=np.float64)
    kernels.active().gauss_newton_betas(
        betas, np.ascontiguousarray(dv, dtype=np.float64), np.ascontiguousarray(rho, dtype=np.float64),
        GN_ITERATIONS, GN_STEP_TOL,
    )
    return betas


def _initial_betas(n_active: int, dv: np.ndarray, rho: np.ndarray) -> np.ndarray | None:
    """Linearised estimate of the first ``n_active`` betas (others zero)."""
    nb = dv.shape[1]
    terms = [(i, j) for i in range(n_active) for j in range(i, n_active)]
    if len(terms) > len(rho):
        return None
    L = np.stack(
        [(1.0 if i == j else 2.0) * (dv[:, i] * dv[:, j]).sum(axis=1) for i, j in terms], axis=1
    )
    prod = np.linalg.lstsq(L, rho, rcond=None)[0]
    B = dict(zip(terms, prod))
    betas = np.zeros(nb)
    betas[0] = math.sqrt(abs(B[(0, 0)]))
    if betas[0] == 0.0:
        return None
    # magnitudes from the diagonal products, signs from the cross terms with
    # beta_0; the global sign is fixed later by requiring positive depth
    for j in range(1, n_active):
        betas[j] = math.copysign(math.sqrt(abs(B[(j, j)])), B[(0, j)])
    return betas


def _absolute_orientation(pw: np.ndarray, pc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid transform with ``pc ≈ R @ pw + t`` (Kabsch)."""
    mw, mc = pw.mean(axis=0), pc.mean(axis=0)
    H = (pc - mc).T @ (pw - mw)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return R, mc - R @ mw


def _pose_from_betas(betas, null_vecs, alphas, pw):
    nc = alphas.shape[1]
    cc = (null_vecs @ betas).reshape(nc, 3)
    pc = alphas @ cc
    if np.mean(pc[:, 2]) < 0:
        pc = -pc
    R, t = _absolute_orientation(pw, pc)
    return R, t


def epnp(corrs: CorrespondenceSet, K: Intrinsics) -> PnPSolution:
    n = len(corrs)
    if n < 4:
        raise InsufficientCorrespondencesError(f"EPnP needs at least 4 correspondences, got {n}")
    pw, uv = corrs.model_points, corrs.image_points
    cw = _control_points(pw)
    nc = len(cw)
    alphas = _barycentric(pw, cw)

    M = np.zeros((2 * n, 3 * nc))
    du = K.ux - uv[:, 0]
    dv_ = K.uy - uv[:, 1]
    for j in range(nc):
        a = alphas[:, j]
        M[0::2, 3 * j] = a * K.fx
        M[0::2, 3 * j + 2] = a * du
        M[1::2, 3 * j + 1] = a * K.fy
        M[1::2, 3 * j + 2] = a * dv_
    _, evecs = np.linalg.eigh(M.T @ M)
    nb = 4 if nc == 4 else 3
    null_vecs = evecs[:, :nb]  # smallest eigenvalues first

    pairs = _pair_list(nc)
    dv = np.stack(
        [null_vecs[3 * a:3 * a + 3, :].T - null_vecs[3 * b:3 * b + 3, :].T for a, b in pairs]
    )  # (pairs, nb, 3)
    rho = np.array([np.sum((cw[a] - cw[b]) ** 2) for a, b in pairs])

    best = None
    for n_active in (1, 2, 3):
        init = _initial_betas(n_active, dv, rho)
        if init is None:
            continue
        betas = _gauss_newton(init, dv, rho)
        R, t = _pose_from_betas(betas, null_vecs, alphas, pw)
        err = float(_residuals_rt(R, t, K, pw, uv).mean())
        if best is None or err < best[2]:
            best = (R, t, err)
    if best is None or not np.isfinite(best[2]):
        raise DegenerateConfigurationError("no EPnP beta case produced a solution")
    return PnPSolution(Pose.from_rt(best[0], best[1]), best[2], frozenset(int(i) for i in corrs.indices))


# -- RANSAC -------------------------------------------------------------------


def ransac_pnp(
    corrs: CorrespondenceSet,
    K: Intrinsics,
    inlier_threshold_px: float = 5.0,
    max_iters: int = 200,
    min_sample: int = 5,
    seed: int | np.random.Generator | None = 0,
    early_exit_ratio: float = 0.95,
) -> PnPSolution:
    n = len(corrs)
    if n < min_sample:
        raise InsufficientCorrespondencesError(
            f"RANSAC needs at least {min_sample} correspondences, got {n}"
        )
    rng = np.random.default_rng(seed)
    best_mask = None
    best_key = None
    for _ in range(max_iters):
        sample = np.sort(rng.choice(n, size=min_sample, replace=False))
        try:
            sol = epnp(corrs.take(sample), K)
        except DegenerateConfigurationError:
            continue
        err = residuals(sol.pose, K, corrs.model_points, corrs.image_points)
        mask = err <= inlier_threshold_px
        count = int(mask.sum())
        key = (count, -float(err[mask].mean()) if count else -math.inf)
        if best_key is None or key > best_key:
            best_key, best_mask = key, mask
        if count >= early_exit_ratio * n:
            break
    if best_mask is None or best_key[0] < 4:
        raise NoConsensusError("no sample reached a consensus of 4 inliers")

    refit = epnp(corrs.take(np.flatnonzero(best_mask)), K)
    err = residuals(refit.pose, K, corrs.model_points, corrs.image_points)
    mask = err <= inlier_threshold_px
    if mask.sum() < 4:
        raise NoConsensusError("refit lost the consensus set")
    return PnPSolution(
        refit.pose,
        float(err[mask].mean()),
        frozenset(int(i) for i in corrs.indices[mask]),
    )


# -- model selection ----------------------------------------------------------


def fit_model(
    obs: KeypointObservation,
    library: Sequence[CarModel],
    K: Intrinsics,
    mask: np.ndarray | None = None,
    seed: int = 0,
    inlier_threshold_px: float = 5.0,
    max_iters: int = 200,
    min_sample: int = 5,
) -> ModelFit:
    """Fit every library model with RANSAC-EPnP and keep the best accepted one.

    A fit is accepted when its mean inlier reprojection error is below 5 px
    and, if ``mask`` is given, the boundary offset between the rendered
    silhouette and the mask is below 5 px. Among accepted fits the one with
    the most inliers wins, then the lowest mean error, then the lowest id.
    """
    from .raster import render_silhouette
    from .shapesim import boundary_offset

    if obs.count < min_sample:
        raise InsufficientCorrespondencesError(
            f"need at least {min_sample} labelled keypoints, got {obs.count}"
        )
    accepted = []
    for model in library:
        corrs = CorrespondenceSet.from_observation(obs, model)
        try:
            sol = ransac_pnp(corrs, K, inlier_threshold_px, max_iters, min_sample, seed)
        except (NoConsensusError, DegenerateConfigurationError):
            continue
        if not sol.mean_reprojection_error < ACCEPT_REPROJECTION_PX:
            continue
        offset = None
        if mask is not None:
            sil = render_silhouette(K, model, sol.pose)
            if not sil.any():
                continue
            offset = boundary_offset(sil, mask)
            if not offset < ACCEPT_BOUNDARY_PX:
                continue
        accepted.append(
            ModelFit(model.id, sol.pose, sol.mean_reprojection_error, offset, sol.inlier_indices)
        )
    if not accepted:
        raise NoModelAcceptedError("no library model passed the acceptance gates")

    def rank(f: ModelFit):
        return (-len(f.inlier_indices), f.mean_reprojection_error, f.model_id)

    best = min(accepted, key=rank)
    # errors within 1e-9 count as a tie: lowest id wins
    ties = [
        f for f in accepted
        if len(f.inlier_indices) == len(best.inlier_indices)
        and f.mean_reprojection_error - best.mean_reprojection_error < 1e-9
    ]
    return min(ties, key=lambda f: f.model_id)
