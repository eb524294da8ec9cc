"""World-from-local similarity estimation against surveyed control points.

The closed-form fit over full-3D correspondences seeds a joint refinement
of the transform and per-point proxy positions, weighted by detection and
survey covariances. Evaluation errors are always measured on the original
triangulations; the refined proxies only stabilize the transform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateConfigurationError
from .geometry import RigidPose, Rotation, Similarity, skew
from .solver import HuberLoss, Problem, SolveOptions, SolveReport, solve
from .triangulation import Observation, TriangulatedCP, build_frames


@dataclass(frozen=True, eq=False)
class ControlPoint:
    """Surveyed world position; 2D points constrain only the horizontal."""

    cp_id: str
    position: np.ndarray  # (3,) for dim 3, (2,) for dim 2
    dim: int
    covariance: np.ndarray  # (3, 3) or (2, 2)

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"control point dim must be 2 or 3, got {self.dim}")
        pos = np.asarray(self.position, dtype=float).reshape(self.dim)
        cov = np.asarray(self.covariance, dtype=float).reshape(self.dim, self.dim)
        if np.linalg.eigvalsh(cov).min() <= 0.0:
            raise ValueError(f"control point '{self.cp_id}': covariance not PD")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "covariance", cov)

    @property
    def xy(self) -> np.ndarray:
        return self.position[:2]

    @property
    def horizontal_covariance(self) -> np.ndarray:
        return self.covariance[:2, :2]


@dataclass
class AlignmentRecord:
    cp_id: str
    dim: int
    used: bool
    error_2d: float  # meters; inf when the CP never triangulated
    error_3d: float  # meters; nan for 2D control points
    sigma_tri_metric: np.ndarray | None  # (3, 3) transformed triangulation cov
    sigma_cp: np.ndarray  # survey covariance as stored
    note: str = ""


@dataclass
class SparseAlignment:
    transform: Similarity
    proxies: dict[str, np.ndarray]
    records: list[AlignmentRecord]
    init_fallback_4dof: bool
    report: SolveReport | None


@dataclass(frozen=True)
class AlignmentConfig:
    huber_delta_px: float = 2.0  # whitened units on reprojection residuals
    max_iters: int = 100
    gradient_tol: float = 1e-12


def umeyama_init(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> Similarity:
    """Closed-form similarity from (local, world) 3D pairs.

    Centroid alignment, SVD rotation with reflection correction, and the
    variance-ratio scale; the global minimizer of the unweighted alignment
    cost.
    """
    if len(pairs) < 3:
        raise DegenerateConfigurationError(
            f"similarity fit needs at least 3 pairs, got {len(pairs)}"
        )
    src = np.stack([np.asarray(p, dtype=float) for p, _ in pairs])
    dst = np.stack([np.asarray(q, dtype=float) for _, q in pairs])

    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    src_c = src - mu_src
    dst_c = dst - mu_dst

    sv = np.linalg.svd(src_c, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-12):
        raise DegenerateConfigurationError(
            "points are collinear; rotation about the line is unobservable"
        )

    cov = dst_c.T @ src_c / len(pairs)
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    var_src = float((src_c**2).sum(axis=1).mean())
    scale = float(np.trace(np.diag(d) @ s)) / var_src
    if scale <= 0.0:
        raise DegenerateConfigurationError("similarity fit collapsed to scale <= 0")
    trans = mu_dst - scale * rot @ mu_src
    return Similarity(scale, Rotation.from_matrix(rot), trans)


def _umeyama_2d(src: np.ndarray, dst: np.ndarray) -> tuple[float, float, np.ndarray]:
    """2D similarity (scale, yaw, txy) between horizontal point sets."""
    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    src_c = src - mu_src
    dst_c = dst - mu_dst
    if np.linalg.norm(src_c) < 1e-12:
        raise DegenerateConfigurationError("horizontal points are coincident")
    cov = dst_c.T @ src_c / len(src)
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        s[1, 1] = -1.0
    rot = u @ s @ vt
    var_src = float((src_c**2).sum(axis=1).mean())
    scale = float(np.trace(np.diag(d) @ s)) / var_src
    if scale <= 0.0:
        raise DegenerateConfigurationError("horizontal fit collapsed to scale <= 0")
    yaw = float(np.arctan2(rot[1, 0], rot[0, 0]))
    trans = mu_dst - scale * rot @ mu_src
    return scale, yaw, trans


def initialize_alignment(
    triangulations: Mapping[str, TriangulatedCP],
    cps: Sequence[ControlPoint],
) -> tuple[Similarity, bool]:
    """Closed-form initialization; falls back to a gravity-aligned 4-DoF
    (yaw, horizontal translation, scale) fit when fewer than 3 CPs are 3D.

    Returns (transform, fallback_used).
    """
    by_id = {cp.cp_id: cp for cp in cps}
    pairs_3d = [
        (triangulations[cid].position, by_id[cid].position)
        for cid in triangulations
        if cid in by_id and by_id[cid].dim == 3
    ]
    if len(pairs_3d) >= 3:
        try:
            return umeyama_init(pairs_3d), False
        except DegenerateConfigurationError:
            pass  # collinear 3D points; try the horizontal fallback

    usable = [cid for cid in triangulations if cid in by_id]
    if len(usable) < 2:
        raise DegenerateConfigurationError(
            "initialization needs at least 2 matched control points"
        )
    src = np.stack([triangulations[cid].position[:2] for cid in usable])
    dst = np.stack([by_id[cid].xy for cid in usable])
    scale, yaw, txy = _umeyama_2d(src, dst)
    z_pairs = [
        (triangulations[cid].position[2], by_id[cid].position[2])
        for cid in usable
        if by_id[cid].dim == 3
    ]
    tz = (
        float(np.mean([zw - scale * zl for zl, zw in z_pairs])) if z_pairs else 0.0
    )
    transform = Similarity(
        scale, Rotation.exp([0.0, 0.0, yaw]), np.array([txy[0], txy[1], tz])
    )
    return transform, True


def propagate_covariance(cov: np.ndarray, transform: Similarity) -> np.ndarray:
    """Map a local-frame covariance through the similarity: s^2 R cov R^T."""
    r = transform.rotation.matrix()
    return transform.scale**2 * r @ np.asarray(cov, dtype=float) @ r.T


def _world_residual(cp: ControlPoint):
    rows = 2 if cp.dim == 2 else 3
    target = cp.position

    def fn(t: Similarity, proxy: np.ndarray):
        return (target - t.apply(proxy)[: cp.dim]).reshape(rows)

    def jac(t: Similarity, proxy: np.ndarray):
        s, r = t.scale, t.rotation.matrix()
        j_t = np.zeros((3, 7))
        j_t[:, 0:3] = s * r @ skew(proxy)
        j_t[:, 3:6] = -np.eye(3)
        j_t[:, 6] = -s * r @ proxy
        j_p = -s * r
        return [j_t[: cp.dim], j_p[: cp.dim]]

    return fn, jac


def joint_sparse_align(
    triangulations: Mapping[str, TriangulatedCP],
    poses: Mapping[int, RigidPose | Similarity],
    rig,
    cps: Sequence[ControlPoint],
    init: Similarity | None = None,
    config: AlignmentConfig = AlignmentConfig(),
    observations: Mapping[str, Sequence[Observation]] | None = None,
) -> SparseAlignment:
    """Jointly refine the world-from-local transform and proxy points.

    Reprojection factors keep each proxy glued to its detections while the
    survey factors pull the transformed proxies onto the measured control
    points; both are whitened by their own covariances. 2D control points
    contribute horizontal components only.
    """
    by_id = {cp.cp_id: cp for cp in cps}
    usable = [
        cid
        for cid, tri in triangulations.items()
        if cid in by_id and len(tri.inliers) >= 2
    ]
    world_components = sum(by_id[cid].dim for cid in usable)
    if len(usable) < 3 or world_components < 7:
        raise DegenerateConfigurationError(
            f"{len(usable)} control points with {world_components} world"
            " residual components cannot constrain a 7-DoF similarity"
        )

    fallback = False
    if init is None:
        init, fallback = initialize_alignment(
            {cid: triangulations[cid] for cid in usable}, cps
        )

    problem = Problem()
    problem.add_parameter_block("T", init)
    loss = HuberLoss(config.huber_delta_px)
    for cid in usable:
        tri = triangulations[cid]
        pid = f"proxy:{cid}"
        problem.add_parameter_block(pid, tri.position.copy())

        obs_list = tri.inliers if observations is None else observations[cid]
        frames = build_frames(obs_list, poses, rig)
        for k, f in enumerate(frames):
            def fn(p, f=f):
                return f.safe_project(p) - f.obs.pixel

            def jac(p, f=f):
                return [f.jacobian(p)]

            problem.add_residual_block(
                fn,
                [pid],
                f.obs.pixel_cov,
                group="marker-reprojection",
                jac=jac,
                loss=loss,
                rid=f"reproj:{cid}:{k}",
            )

        cp = by_id[cid]
        fn_w, jac_w = _world_residual(cp)
        problem.add_residual_block(
            fn_w,
            ["T", pid],
            cp.covariance,
            group="cp-world",
            jac=jac_w,
            rid=f"world:{cid}",
        )

    report = solve(
        problem,
        SolveOptions(max_iters=config.max_iters, gradient_tol=config.gradient_tol),
    )
    transform: Similarity = problem.value("T")
    proxies = {cid: problem.value(f"proxy:{cid}") for cid in usable}

    records = []
    for cp in cps:
        tri = triangulations.get(cp.cp_id)
        if tri is None:
            records.append(
                AlignmentRecord(
                    cp.cp_id,
                    cp.dim,
                    used=False,
                    error_2d=np.inf,
                    error_3d=np.inf if cp.dim == 3 else np.nan,
                    sigma_tri_metric=None,
                    sigma_cp=cp.covariance,
                    note="no-triangulation",
                )
            )
            continue
        mapped = transform.apply(tri.position)
        err_2d = float(np.linalg.norm(cp.xy - mapped[:2]))
        err_3d = (
            float(np.linalg.norm(cp.position - mapped)) if cp.dim == 3 else np.nan
        )
        records.append(
            AlignmentRecord(
                cp.cp_id,
                cp.dim,
                used=cp.cp_id in proxies,
                error_2d=err_2d,
                error_3d=err_3d,
                sigma_tri_metric=propagate_covariance(tri.covariance, transform),
                sigma_cp=cp.covariance,
                note="" if cp.cp_id in proxies else "not-used-in-fit",
            )
        )

    return SparseAlignment(
        transform=transform,
        proxies=proxies,
        records=records,
        init_fallback_4dof=fallback,
        report=report,
    )


def cp_alignment_errors(
    transform: Similarity,
    triangulations: Mapping[str, TriangulatedCP],
    cps: Sequence[ControlPoint],
    mode: str = "2d",
) -> dict[str, float]:
    """Per-CP alignment error in meters.

    2D mode covers every control point using horizontal components; 3D
    mode covers full-3D control points only (2D ones carry no vertical
    truth to compare against). Control points without a triangulation get
    an infinite error so they count against score and recall.
    """
    if mode not in ("2d", "3d"):
        raise ValueError(f"mode must be '2d' or '3d', got {mode!r}")
    errors: dict[str, float] = {}
    for cp in cps:
        if mode == "3d" and cp.dim == 2:
            continue
        tri = triangulations.get(cp.cp_id)
        if tri is None:
            errors[cp.cp_id] = np.inf
            continue
        mapped = transform.apply(tri.position)
        if mode == "2d":
            errors[cp.cp_id] = float(np.linalg.norm(cp.xy - mapped[:2]))
        else:
            errors[cp.cp_id] = float(np.linalg.norm(cp.position - mapped))
    return errors
