"""Control-point triangulation from pixel detections.

Robust initialization (LO-RANSAC over two-view midpoint hypotheses),
nonlinear refinement of the reprojection error over the inlier set, and
the Gauss-Newton covariance of the refined point. Camera poses are treated
as fixed inputs; they may carry a scale when the trajectory lives in a
monocular SLAM frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateGeometryError,
    InsufficientObservationsError,
    NoConsensusError,
    VigtError,
)
from .geometry import (
    CameraKind,
    CameraModel,
    RigCalibration,
    RigidPose,
    Similarity,
    camera_from_frame,
    projection_jacobian,
    try_project,
    unproject,
)
from . import solver

_MIN_DEPTH = 1e-6


def default_pixel_covariance(sigma_px: float = 1.0) -> np.ndarray:
    return np.eye(2) * sigma_px**2


@dataclass(frozen=True, eq=False)
class Observation:
    """A single pixel detection of a control point."""

    image_id: int  # trajectory timestamp, ns
    camera_id: str
    pixel: np.ndarray  # (2,)
    pixel_cov: np.ndarray = field(default_factory=default_pixel_covariance)

    def __post_init__(self):
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=float).reshape(2))
        object.__setattr__(
            self, "pixel_cov", np.asarray(self.pixel_cov, dtype=float).reshape(2, 2)
        )


@dataclass
class TriangulatedCP:
    """Triangulated local-frame position of one control point."""

    cp_id: str
    position: np.ndarray  # (3,)
    covariance: np.ndarray  # (3, 3)
    inliers: tuple[Observation, ...]
    mean_reproj_error_px: float


@dataclass(frozen=True)
class TriangulationConfig:
    threshold_px: float = 4.0
    max_iters: int = 500
    seed: int = 42
    sigma_detect_px: float = 1.0
    min_pair_angle_deg: float = 0.5


class _ObsFrame:
    """Per-observation projection geometry: p_cam = A p + b."""

    def __init__(self, obs: Observation, pose, rig: RigCalibration):
        self.obs = obs
        self.cam: CameraModel = rig.cameras[obs.camera_id]
        extr = rig.camera_from_device[obs.camera_id]
        self.a, self.b = camera_from_frame(pose, extr)
        self.a_inv = np.linalg.inv(self.a)
        self.center = -self.a_inv @ self.b
        ray_cam = unproject(self.cam, obs.pixel)
        ray = self.a_inv @ ray_cam
        self.ray = ray / np.linalg.norm(ray)

    def point_in_camera(self, p: np.ndarray) -> np.ndarray:
        return self.a @ p + self.b

    def safe_project(self, p: np.ndarray) -> np.ndarray:
        """Projection that stays finite for invalid points so the solver
        can reject wandering trial steps by cost."""
        p_cam = self.point_in_camera(p)
        if self.cam.kind is CameraKind.KANNALA_BRANDT4:
            if np.linalg.norm(p_cam) < _MIN_DEPTH:
                p_cam = np.array([0.0, 0.0, _MIN_DEPTH])
        elif p_cam[2] < _MIN_DEPTH:
            p_cam = np.array([p_cam[0], p_cam[1], _MIN_DEPTH])
        uv, _ = try_project(self.cam, p_cam)
        return uv

    def reproj_error(self, p: np.ndarray) -> float:
        p_cam = self.point_in_camera(p)
        uv, valid = try_project(self.cam, p_cam)
        if not valid:
            return np.inf
        return float(np.linalg.norm(uv - self.obs.pixel))

    def jacobian(self, p: np.ndarray) -> np.ndarray:
        p_cam = self.point_in_camera(p)
        if self.cam.kind is CameraKind.KANNALA_BRANDT4:
            if np.linalg.norm(p_cam) < _MIN_DEPTH:
                p_cam = np.array([0.0, 0.0, _MIN_DEPTH])
        elif p_cam[2] < _MIN_DEPTH:
            p_cam = np.array([p_cam[0], p_cam[1], _MIN_DEPTH])
        return projection_jacobian(self.cam, p_cam) @ self.a

    def in_front(self, p: np.ndarray) -> bool:
        if self.cam.kind is CameraKind.KANNALA_BRANDT4:
            return True
        return self.point_in_camera(p)[2] > 0.0


def build_frames(
    observations: Sequence[Observation],
    poses: Mapping[int, RigidPose | Similarity],
    rig: RigCalibration,
) -> list[_ObsFrame]:
    frames = []
    for obs in observations:
        if obs.image_id not in poses:
            raise VigtError(f"no pose for image id {obs.image_id}")
        frames.append(_ObsFrame(obs, poses[obs.image_id], rig))
    return frames


class _FrameSet:
    """Array-of-structs view of many observations for fast hypothesis
    scoring: batched projection, error evaluation, and Gauss-Newton."""

    def __init__(self, frames: Sequence[_ObsFrame]):
        self.frames = list(frames)
        self.a = np.stack([f.a for f in frames])  # (N, 3, 3)
        self.b = np.stack([f.b for f in frames])  # (N, 3)
        self.centers = np.stack([f.center for f in frames])
        self.rays = np.stack([f.ray for f in frames])
        self.pixels = np.stack([f.obs.pixel for f in frames])
        self.weights = np.stack(
            [np.linalg.inv(f.obs.pixel_cov) for f in frames]
        )  # (N, 2, 2)
        self.groups: list[tuple[CameraModel, np.ndarray]] = []
        by_cam: dict[int, list[int]] = {}
        cams: dict[int, CameraModel] = {}
        for i, f in enumerate(frames):
            by_cam.setdefault(id(f.cam), []).append(i)
            cams[id(f.cam)] = f.cam
        for key, idx in by_cam.items():
            self.groups.append((cams[key], np.array(idx)))

    def project_all(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(uv (N, 2), valid (N,)) with invalid depths clamped."""
        p_cam = self.a @ p + self.b
        uv = np.empty((len(p_cam), 2))
        valid = np.ones(len(p_cam), dtype=bool)
        for cam, idx in self.groups:
            pc = p_cam[idx]
            if cam.kind is CameraKind.KANNALA_BRANDT4:
                bad = np.linalg.norm(pc, axis=1) < _MIN_DEPTH
                pc[bad] = [0.0, 0.0, _MIN_DEPTH]
            else:
                bad = pc[:, 2] < _MIN_DEPTH
                valid[idx[bad]] = False
                pc[bad, 2] = _MIN_DEPTH
            uv_g, ok = try_project(cam, pc)
            uv[idx] = uv_g
            valid[idx] &= ok
        return uv, valid

    def errors(self, p: np.ndarray) -> np.ndarray:
        uv, valid = self.project_all(p)
        err = np.linalg.norm(uv - self.pixels, axis=1)
        err[~valid] = np.inf
        return err

    def gn_refine(self, p: np.ndarray, mask: np.ndarray, iters: int = 10) -> np.ndarray:
        idx = np.flatnonzero(mask)
        for _ in range(iters):
            p_cam = self.a[idx] @ p + self.b[idx]
            jacs = np.empty((len(idx), 2, 3))
            uv = np.empty((len(idx), 2))
            for cam, gidx in self.groups:
                sel = np.isin(idx, gidx)
                if not sel.any():
                    continue
                pc = p_cam[sel]
                if cam.kind is CameraKind.KANNALA_BRANDT4:
                    bad = np.linalg.norm(pc, axis=1) < _MIN_DEPTH
                    pc[bad] = [0.0, 0.0, _MIN_DEPTH]
                else:
                    pc[pc[:, 2] < _MIN_DEPTH, 2] = _MIN_DEPTH
                uv[sel], _ = try_project(cam, pc)
                jacs[sel] = projection_jacobian_batch(cam, pc)
            jacs = np.einsum("nij,njk->nik", jacs, self.a[idx])
            res = uv - self.pixels[idx]
            w = self.weights[idx]
            h = np.einsum("nji,njk,nkl->il", jacs, w, jacs)
            g = np.einsum("nji,njk,nk->i", jacs, w, res)
            try:
                step = np.linalg.solve(h + 1e-9 * np.eye(3), -g)
            except np.linalg.LinAlgError:
                return p
            p = p + step
            if np.linalg.norm(step) < 1e-10:
                break
        return p


def _midpoint(f1: _ObsFrame, f2: _ObsFrame) -> np.ndarray | None:
    w = f2.center - f1.center
    b = float(f1.ray @ f2.ray)
    denom = 1.0 - b * b
    if denom < 1e-12:
        return None
    d1w = float(f1.ray @ w)
    d2w = float(f2.ray @ w)
    s1 = (d1w - b * d2w) / denom
    s2 = (b * d1w - d2w) / denom
    return 0.5 * (f1.center + s1 * f1.ray + f2.center + s2 * f2.ray)


def _gauss_newton_point(frames, point, iters=10):
    p = point.copy()
    for _ in range(iters):
        h = np.zeros((3, 3))
        g = np.zeros(3)
        for f in frames:
            r = f.safe_project(p) - f.obs.pixel
            j = f.jacobian(p)
            w = np.linalg.inv(f.obs.pixel_cov)
            h += j.T @ w @ j
            g += j.T @ w @ r
        try:
            step = np.linalg.solve(h + 1e-9 * np.eye(3), -g)
        except np.linalg.LinAlgError:
            return p
        p = p + step
        if np.linalg.norm(step) < 1e-10:
            break
    return p


def triangulate_ransac(
    observations: Sequence[Observation],
    poses: Mapping[int, RigidPose | Similarity],
    rig: RigCalibration,
    config: TriangulationConfig = TriangulationConfig(),
) -> tuple[np.ndarray, tuple[int, ...]]:
    """LO-RANSAC triangulation: returns (point, inlier indices).

    Deterministic for a fixed seed and input order. Pairs are enumerated
    exhaustively when few, sampled otherwise.
    """
    if len(observations) < 2:
        raise InsufficientObservationsError(
            f"triangulation needs at least 2 observations, got {len(observations)}"
        )
    frames = build_frames(observations, poses, rig)
    n = len(frames)

    all_pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if len(all_pairs) > config.max_iters:
        rng = np.random.default_rng(config.seed)
        idx = rng.choice(len(all_pairs), size=config.max_iters, replace=False)
        pairs = [all_pairs[int(k)] for k in idx]
    else:
        pairs = all_pairs

    min_sin = np.sin(np.deg2rad(config.min_pair_angle_deg))
    errors = np.empty(n)

    best_inliers: np.ndarray | None = None
    best_point: np.ndarray | None = None
    best_score = (-1, np.inf)
    usable_pair = False

    for i, j in pairs:
        f1, f2 = frames[i], frames[j]
        if np.linalg.norm(f2.center - f1.center) < 1e-12:
            continue
        if np.linalg.norm(np.cross(f1.ray, f2.ray)) < min_sin:
            continue
        usable_pair = True
        point = _midpoint(f1, f2)
        if point is None:
            continue
        if not (f1.in_front(point) and f2.in_front(point)):
            continue
        for k, f in enumerate(frames):
            errors[k] = f.reproj_error(point)
        inliers = errors <= config.threshold_px
        count = int(inliers.sum())
        if count < 2:
            continue
        score = (count, float(errors[inliers].mean()))
        if score[0] > best_score[0] or (
            score[0] == best_score[0] and score[1] < best_score[1]
        ):
            # local optimization on the provisional inlier set
            refined = _gauss_newton_point([f for f, m in zip(frames, inliers) if m], point)
            for k, f in enumerate(frames):
                errors[k] = f.reproj_error(refined)
            new_inliers = errors <= config.threshold_px
            if int(new_inliers.sum()) >= 2:
                point, inliers = refined, new_inliers
                count = int(inliers.sum())
            score = (count, float(errors[inliers].mean()))
            if score[0] > best_score[0] or (
                score[0] == best_score[0] and score[1] < best_score[1]
            ):
                best_score = score
                best_point = point
                best_inliers = inliers.copy()

    if not usable_pair:
        raise DegenerateGeometryError(
            "all observation pairs are near-parallel or have zero baseline"
        )
    if best_point is None or best_inliers is None:
        raise NoConsensusError("no triangulation hypothesis had 2 or more inliers")
    return best_point, tuple(int(k) for k in np.flatnonzero(best_inliers))


def refine_triangulation(
    init_point: np.ndarray,
    inliers: Sequence[Observation],
    poses: Mapping[int, RigidPose | Similarity],
    rig: RigCalibration,
    cp_id: str = "",
) -> TriangulatedCP:
    """Minimize the inlier reprojection error from a RANSAC initialization."""
    if len(inliers) < 2:
        raise InsufficientObservationsError(
            f"refinement needs at least 2 inlier observations, got {len(inliers)}"
        )
    frames = build_frames(inliers, poses, rig)

    problem = solver.Problem()
    problem.add_parameter_block("point", np.asarray(init_point, dtype=float))
    for k, f in enumerate(frames):
        def fn(p, f=f):
            return f.safe_project(p) - f.obs.pixel

        def jac(p, f=f):
            return [f.jacobian(p)]

        problem.add_residual_block(
            fn,
            ["point"],
            f.obs.pixel_cov,
            group="marker-reprojection",
            jac=jac,
            rid=f"obs{k}",
        )
    solver.solve(problem, solver.SolveOptions(max_iters=50, gradient_tol=1e-12))
    point = problem.value("point")

    for f in frames:
        if not f.in_front(point):
            raise BehindCameraError(
                f"refined point is behind camera '{f.obs.camera_id}'"
                f" at image {f.obs.image_id}"
            )
    mean_err = float(np.mean([f.reproj_error(point) for f in frames]))
    cov = triangulation_covariance(point, inliers, poses, rig)
    return TriangulatedCP(
        cp_id=cp_id,
        position=point,
        covariance=cov,
        inliers=tuple(inliers),
        mean_reproj_error_px=mean_err,
    )


def triangulation_covariance(
    point: np.ndarray,
    inliers: Sequence[Observation],
    poses: Mapping[int, RigidPose | Similarity],
    rig: RigCalibration,
) -> np.ndarray:
    """Inverse Gauss-Newton Hessian of the reprojection problem at the
    solution: (J' Sigma_px^-1 J)^-1."""
    if len(inliers) < 2:
        raise InsufficientObservationsError("covariance needs at least 2 observations")
    frames = build_frames(inliers, poses, rig)
    h = np.zeros((3, 3))
    for f in frames:
        j = f.jacobian(point)
        h += j.T @ np.linalg.inv(f.obs.pixel_cov) @ j
    try:
        cov = np.linalg.inv(h)
    except np.linalg.LinAlgError:
        raise DegenerateGeometryError(
            "triangulation Hessian is singular; observation geometry is degenerate"
        ) from None
    if np.linalg.cond(h) > 1e14:
        raise DegenerateGeometryError(
            "triangulation Hessian is numerically singular"
        )
    return 0.5 * (cov + cov.T)


def triangulate_cp(
    cp_id: str,
    observations: Sequence[Observation],
    poses: Mapping[int, RigidPose | Similarity],
    rig: RigCalibration,
    config: TriangulationConfig = TriangulationConfig(),
) -> TriangulatedCP:
    """RANSAC + refinement + covariance for one control point."""
    point, inlier_idx = triangulate_ransac(observations, poses, rig, config)
    inliers = [observations[k] for k in inlier_idx]
    return refine_triangulation(point, inliers, poses, rig, cp_id=cp_id)


def triangulate_all(
    detections: Mapping[str, Sequence[Observation]],
    poses: Mapping[int, RigidPose | Similarity],
    rig: RigCalibration,
    config: TriangulationConfig = TriangulationConfig(),
) -> tuple[dict[str, TriangulatedCP], dict[str, str]]:
    """Triangulate every control point; failures are collected, not raised."""
    results: dict[str, TriangulatedCP] = {}
    failures: dict[str, str] = {}
    for cp_id, obs in detections.items():
        try:
            results[cp_id] = triangulate_cp(cp_id, obs, poses, rig, config)
        except VigtError as exc:
            failures[cp_id] = f"{type(exc).__name__}: {exc}"
    return results, failures
