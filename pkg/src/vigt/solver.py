"""Sparse nonlinear least-squares over manifolds.

Levenberg-Marquardt with multiplicative damping, optional Schur elimination
of 3-dim point blocks, robust losses, marginal covariance extraction from
the whitened Gauss-Newton Hessian, and per-group variance factors.

A Problem is exclusively owned while :func:`solve` runs; residual and
Jacobian callbacks must be pure functions of the parameter values.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import RankDeficientError, SolverError, VigtError
from .geometry import RigidPose, Rotation, Similarity


class Manifold(enum.Enum):
    EUCLIDEAN = "euclidean"
    ROTATION = "rotation"
    RIGID_POSE = "rigid-pose"
    SIMILARITY = "similarity"


def _infer_manifold(value) -> Manifold:
    if isinstance(value, Rotation):
        return Manifold.ROTATION
    if isinstance(value, RigidPose):
        return Manifold.RIGID_POSE
    if isinstance(value, Similarity):
        return Manifold.SIMILARITY
    return Manifold.EUCLIDEAN


def tangent_dim(manifold: Manifold, value) -> int:
    if manifold is Manifold.EUCLIDEAN:
        return int(np.asarray(value).size)
    if manifold is Manifold.ROTATION:
        return 3
    if manifold is Manifold.RIGID_POSE:
        return 6
    return 7


def retract(manifold: Manifold, value, delta: np.ndarray):
    """Local update: rotations right-multiply Exp(d), translations add,
    scale updates multiplicatively through the log-scale coordinate."""
    if manifold is Manifold.EUCLIDEAN:
        return np.asarray(value, dtype=float) + delta
    if manifold is Manifold.ROTATION:
        return value @ Rotation.exp(delta)
    if manifold is Manifold.RIGID_POSE:
        return RigidPose(
            value.rotation @ Rotation.exp(delta[:3]),
            value.translation + delta[3:6],
        )
    return Similarity(
        value.scale * float(np.exp(delta[6])),
        value.rotation @ Rotation.exp(delta[:3]),
        value.translation + delta[3:6],
    )


@dataclass
class HuberLoss:
    delta: float = 2.0

    def weight(self, sq_norm: float) -> float:
        if sq_norm <= self.delta**2:
            return 1.0
        return self.delta / np.sqrt(sq_norm)

    def cost(self, sq_norm: float) -> float:
        if sq_norm <= self.delta**2:
            return sq_norm
        return 2.0 * self.delta * np.sqrt(sq_norm) - self.delta**2


@dataclass
class CauchyLoss:
    c: float = 2.0

    def weight(self, sq_norm: float) -> float:
        return 1.0 / (1.0 + sq_norm / self.c**2)

    def cost(self, sq_norm: float) -> float:
        return self.c**2 * np.log1p(sq_norm / self.c**2)


@dataclass
class ParameterBlock:
    id: str
    value: object
    manifold: Manifold
    constant: bool = False
    eliminate: bool = False

    @property
    def dim(self) -> int:
        return tangent_dim(self.manifold, self.value)


@dataclass
class ResidualBlock:
    id: str
    group: str
    params: tuple[str, ...]
    fn: Callable
    covariance: np.ndarray
    jac: Callable | None = None
    loss: HuberLoss | CauchyLoss | None = None
    gauge: bool = False
    whitener: np.ndarray = field(init=False)

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        self.covariance = cov
        self.whitener = _inverse_sqrt(cov, self.id)

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    def set_covariance(self, cov: np.ndarray):
        self.covariance = np.atleast_2d(np.asarray(cov, dtype=float))
        self.whitener = _inverse_sqrt(self.covariance, self.id)


def _inverse_sqrt(cov: np.ndarray, rid: str) -> np.ndarray:
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"residual '{rid}': covariance must be square")
    diag = np.diag(np.diag(cov))
    if np.array_equal(cov, diag):
        if np.diag(cov).min() <= 0.0:
            raise ValueError(f"residual '{rid}': covariance not positive-definite")
        return np.diag(1.0 / np.sqrt(np.diag(cov)))
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    if w.min() <= 0.0:
        raise ValueError(f"residual '{rid}': covariance not positive-definite")
    return v @ np.diag(1.0 / np.sqrt(w)) @ v.T


class Problem:
    """Container of parameter blocks and residual blocks."""

    def __init__(self):
        self.params: dict[str, ParameterBlock] = {}
        self.residuals: dict[str, ResidualBlock] = {}

    def add_parameter_block(
        self,
        pid: str,
        value,
        manifold: Manifold | None = None,
        *,
        constant: bool = False,
        eliminate: bool = False,
    ) -> ParameterBlock:
        if pid in self.params:
            raise ValueError(f"duplicate parameter block '{pid}'")
        if manifold is None:
            manifold = _infer_manifold(value)
        if manifold is Manifold.EUCLIDEAN:
            value = np.asarray(value, dtype=float).reshape(-1)
        block = ParameterBlock(pid, value, manifold, constant, eliminate)
        if eliminate and not (manifold is Manifold.EUCLIDEAN and block.dim == 3):
            raise ValueError("only 3-dim euclidean blocks can be Schur-eliminated")
        self.params[pid] = block
        return block

    def add_residual_block(
        self,
        fn: Callable,
        params: Sequence[str],
        covariance,
        *,
        group: str = "generic",
        jac: Callable | None = None,
        loss: HuberLoss | CauchyLoss | None = None,
        rid: str | None = None,
        gauge: bool = False,
    ) -> ResidualBlock:
        if rid is None:
            rid = f"r{len(self.residuals)}"
        if rid in self.residuals:
            raise ValueError(f"duplicate residual block '{rid}'")
        for pid in params:
            if pid not in self.params:
                raise ValueError(f"residual '{rid}' references unknown block '{pid}'")
        block = ResidualBlock(rid, group, tuple(params), fn, covariance, jac, loss, gauge)
        self.residuals[rid] = block
        return block

    def value(self, pid: str):
        return self.params[pid].value

    def set_value(self, pid: str, value):
        block = self.params[pid]
        if block.manifold is Manifold.EUCLIDEAN:
            value = np.asarray(value, dtype=float).reshape(-1)
        block.value = value

    def set_constant(self, pid: str, constant: bool = True):
        self.params[pid].constant = constant

    def groups(self) -> list[str]:
        seen = dict.fromkeys(r.group for r in self.residuals.values())
        return list(seen)

    def scale_group_covariance(self, group: str, factor: float):
        """Multiply every measurement covariance in a residual group."""
        if factor <= 0.0:
            raise ValueError("covariance scale factor must be positive")
        for block in self.residuals.values():
            if block.group == group:
                block.set_covariance(block.covariance * factor)


@dataclass(frozen=True)
class SolveOptions:
    max_iters: int = 100
    gradient_tol: float = 1e-10
    param_tol: float = 1e-12
    initial_lambda: float = 1e-4
    lambda_max: float = 1e10
    cost_tol_rel: float = 1e-16  # declare victory below this fraction of initial cost
    fd_step: float = 1e-7


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: str
    group_residuals: dict[str, np.ndarray]
    group_redundancy: dict[str, int]
    cost_history: list[float]
    group_rss_history: list[dict[str, float]]

    @property
    def success(self) -> bool:
        return self.termination != "failed"


class _Workspace:
    """Static structure of a problem: tangent indexing and row layout."""

    def __init__(self, problem: Problem):
        self.problem = problem
        self.free = [b for b in problem.params.values() if not b.constant]
        if not self.free:
            raise SolverError("problem has no free parameter blocks")
        retained = [b for b in self.free if not b.eliminate]
        eliminated = [b for b in self.free if b.eliminate]
        self.offsets: dict[str, int] = {}
        cursor = 0
        for b in retained + eliminated:
            self.offsets[b.id] = cursor
            cursor += b.dim
        self.n_tangent = cursor
        self.n_retained = sum(b.dim for b in retained)
        self.eliminated = eliminated

        self.rows: dict[str, int] = {}
        cursor = 0
        for r in problem.residuals.values():
            self.rows[r.id] = cursor
            cursor += r.dim
        self.n_rows = cursor

        self.redundancy = self._group_redundancy()

    def _group_redundancy(self) -> dict[str, int]:
        by_group_rows: dict[str, int] = {}
        param_groups: dict[str, set[str]] = {}
        for r in self.problem.residuals.values():
            by_group_rows[r.group] = by_group_rows.get(r.group, 0) + r.dim
            for pid in r.params:
                param_groups.setdefault(pid, set()).add(r.group)
        redundancy = {}
        for group, rows in by_group_rows.items():
            exclusive = sum(
                self.problem.params[pid].dim
                for pid, groups in param_groups.items()
                if groups == {group} and not self.problem.params[pid].constant
            )
            redundancy[group] = rows - exclusive
        return redundancy

    def values_of(self, block: ResidualBlock):
        return [self.problem.params[pid].value for pid in block.params]

    def evaluate(self, values: dict[str, object]) -> tuple[float, dict[str, np.ndarray], dict[str, float]]:
        """Robust cost, whitened residual per block, raw rss per group."""
        cost = 0.0
        whitened: dict[str, np.ndarray] = {}
        group_rss: dict[str, float] = {}
        for r in self.problem.residuals.values():
            raw = np.asarray(
                r.fn(*[values[pid] for pid in r.params]), dtype=float
            ).reshape(-1)
            if raw.shape[0] != r.dim:
                raise SolverError(
                    f"residual '{r.id}' returned dimension {raw.shape[0]},"
                    f" expected {r.dim}",
                    block_id=r.id,
                )
            if not np.all(np.isfinite(raw)):
                raise SolverError(
                    f"non-finite residual in block '{r.id}'", block_id=r.id
                )
            w = r.whitener @ raw
            whitened[r.id] = w
            sq = float(w @ w)
            group_rss[r.group] = group_rss.get(r.group, 0.0) + sq
            cost += 0.5 * (r.loss.cost(sq) if r.loss else sq)
        return cost, whitened, group_rss

    def try_evaluate(self, values):
        """Like evaluate, but a failing trial state just reports inf cost."""
        try:
            return self.evaluate(values)
        except VigtError:
            return np.inf, {}, {}

    def linearize(
        self,
        values: dict[str, object],
        whitened: dict[str, np.ndarray],
        fd_step: float,
    ) -> tuple[scipy.sparse.csr_matrix, np.ndarray]:
        """Whitened, robust-scaled Jacobian and residual vector."""
        data, rows_idx, cols_idx = [], [], []
        rhs = np.zeros(self.n_rows)
        for r in self.problem.residuals.values():
            row0 = self.rows[r.id]
            vals = [values[pid] for pid in r.params]
            if r.jac is not None:
                jacs = r.jac(*vals)
            else:
                jacs = _forward_difference_jacobians(r, vals, fd_step)
            w = whitened[r.id]
            scale = np.sqrt(r.loss.weight(float(w @ w))) if r.loss else 1.0
            rhs[row0 : row0 + r.dim] = scale * w
            for pid, jac in zip(r.params, jacs):
                pblock = self.problem.params[pid]
                if pblock.constant or jac is None:
                    continue
                jac = np.asarray(jac, dtype=float)
                if jac.shape != (r.dim, pblock.dim):
                    raise SolverError(
                        f"residual '{r.id}': Jacobian for '{pid}' has shape"
                        f" {jac.shape}, expected {(r.dim, pblock.dim)}",
                        block_id=r.id,
                    )
                if not np.all(np.isfinite(jac)):
                    raise SolverError(
                        f"non-finite Jacobian in block '{r.id}'", block_id=r.id
                    )
                jw = scale * (r.whitener @ jac)
                col0 = self.offsets[pid]
                rr, cc = np.meshgrid(
                    np.arange(row0, row0 + r.dim),
                    np.arange(col0, col0 + pblock.dim),
                    indexing="ij",
                )
                rows_idx.append(rr.ravel())
                cols_idx.append(cc.ravel())
                data.append(jw.ravel())
        if data:
            jac_matrix = scipy.sparse.coo_matrix(
                (
                    np.concatenate(data),
                    (np.concatenate(rows_idx), np.concatenate(cols_idx)),
                ),
                shape=(self.n_rows, self.n_tangent),
            ).tocsr()
        else:
            jac_matrix = scipy.sparse.csr_matrix((self.n_rows, self.n_tangent))
        return jac_matrix, rhs

    def apply_step(self, values: dict[str, object], delta: np.ndarray) -> dict[str, object]:
        out = dict(values)
        for b in self.free:
            off = self.offsets[b.id]
            out[b.id] = retract(b.manifold, values[b.id], delta[off : off + b.dim])
        return out


def _forward_difference_jacobians(block: ResidualBlock, vals, step: float):
    base = np.asarray(block.fn(*vals), dtype=float).reshape(-1)
    jacs = []
    for i, v in enumerate(vals):
        manifold = _infer_manifold(v)
        dim = tangent_dim(manifold, v)
        jac = np.zeros((base.size, dim))
        for d in range(dim):
            delta = np.zeros(dim)
            delta[d] = step
            perturbed = list(vals)
            perturbed[i] = retract(manifold, v, delta)
            jac[:, d] = (
                np.asarray(block.fn(*perturbed), dtype=float).reshape(-1) - base
            ) / step
        jacs.append(jac)
    return jacs


def _solve_normal_equations(
    ws: _Workspace, hess: scipy.sparse.csr_matrix, grad: np.ndarray
) -> np.ndarray:
    """Solve H d = -g, Schur-eliminating flagged point blocks."""
    n_r = ws.n_retained
    if not ws.eliminated or n_r == 0:
        return _sparse_solve(hess, -grad)

    h_rr = hess[:n_r, :n_r]
    h_re = hess[:n_r, n_r:].tocsr()
    h_ee = hess[n_r:, n_r:].toarray()
    g_r, g_e = grad[:n_r], grad[n_r:]

    n_pts = (ws.n_tangent - n_r) // 3
    blocks = h_ee.reshape(n_pts, 3, n_pts, 3)
    inv_blocks = np.linalg.inv(
        np.stack([blocks[i, :, i, :] for i in range(n_pts)])
    )
    h_ee_inv = scipy.sparse.block_diag(inv_blocks, format="csr")

    reduced = (h_rr - h_re @ h_ee_inv @ h_re.T).tocsc()
    rhs = -(g_r - h_re @ (h_ee_inv @ g_e))
    d_r = _sparse_solve(reduced, rhs)
    d_e = h_ee_inv @ (-g_e - h_re.T @ d_r)
    return np.concatenate([d_r, d_e])


def _sparse_solve(mat, rhs: np.ndarray) -> np.ndarray:
    if mat.shape[0] < 80:
        return np.linalg.solve(mat.toarray(), rhs)
    return scipy.sparse.linalg.spsolve(mat.tocsc(), rhs)


def solve(problem: Problem, options: SolveOptions = SolveOptions()) -> SolveReport:
    """Minimize the problem in place; returns the report."""
    ws = _Workspace(problem)
    values = {pid: b.value for pid, b in problem.params.items()}

    cost, whitened, group_rss = ws.evaluate(values)
    initial_cost = cost
    cost_history = [cost]
    rss_history = [dict(group_rss)]

    lam = options.initial_lambda
    iterations = 0
    termination = "max_iterations"

    for iterations in range(1, options.max_iters + 1):
        jac, rhs = ws.linearize(values, whitened, options.fd_step)
        grad = jac.T @ rhs
        if np.max(np.abs(grad), initial=0.0) < options.gradient_tol:
            iterations -= 1
            termination = "converged_gradient"
            break

        hess = (jac.T @ jac).tocsr()
        diag = np.maximum(hess.diagonal(), 1e-12)

        accepted = False
        while lam <= options.lambda_max:
            damped = hess + scipy.sparse.diags(lam * diag)
            try:
                delta = _solve_normal_equations(ws, damped, grad)
            except Exception:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            trial = ws.apply_step(values, delta)
            trial_cost, trial_whitened, trial_rss = ws.try_evaluate(trial)
            if trial_cost < cost:
                values, cost = trial, trial_cost
                whitened, group_rss = trial_whitened, trial_rss
                step_norm = float(np.linalg.norm(delta))
                lam = max(lam * 0.1, 1e-15)
                accepted = True
                cost_history.append(cost)
                rss_history.append(dict(group_rss))
                if step_norm < options.param_tol:
                    termination = "converged_params"
                if cost <= options.cost_tol_rel * initial_cost:
                    termination = "converged_cost"
                break
            lam *= 10.0
        if not accepted:
            termination = "no_progress"
            break
        if termination in ("converged_params", "converged_cost"):
            break

    for pid, v in values.items():
        problem.params[pid].value = v

    group_res: dict[str, np.ndarray] = {}
    for r in problem.residuals.values():
        group_res.setdefault(r.group, []).append(whitened[r.id])
    group_res = {g: np.concatenate(parts) for g, parts in group_res.items()}

    return SolveReport(
        initial_cost=initial_cost,
        final_cost=cost,
        iterations=iterations,
        termination=termination,
        group_residuals=group_res,
        group_redundancy=dict(ws.redundancy),
        cost_history=cost_history,
        group_rss_history=rss_history,
    )


def variance_factor(report: SolveReport, group: str) -> float:
    """Ratio of whitened residual energy to redundancy for one group."""
    if group not in report.group_residuals:
        raise KeyError(f"no residual group '{group}' in report")
    redundancy = report.group_redundancy[group]
    if redundancy <= 0:
        raise ValueError(
            f"group '{group}' has redundancy {redundancy}; variance factor undefined"
        )
    res = report.group_residuals[group]
    return float(res @ res) / redundancy


def _gauss_newton_hessian(problem: Problem, fd_step: float):
    ws = _Workspace(problem)
    values = {pid: b.value for pid, b in problem.params.items()}
    _, whitened, _ = ws.evaluate(values)
    jac, _ = ws.linearize(values, whitened, fd_step)
    return ws, (jac.T @ jac).tocsc()


def marginal_covariances(
    problem: Problem, block_ids: Sequence[str], fd_step: float = 1e-7
) -> dict[str, np.ndarray]:
    """Tangent-space marginal covariance of the requested blocks.

    The problem must be at its solution and gauge-fixed (through constant
    blocks, prior factors, or absolute measurements); a singular Hessian
    raises :class:`RankDeficientError` with the estimated null-space
    dimension.
    """
    for pid in block_ids:
        if pid not in problem.params:
            raise KeyError(f"unknown parameter block '{pid}'")
        if problem.params[pid].constant:
            raise ValueError(f"block '{pid}' is constant; covariance undefined")
    ws, hess = _gauss_newton_hessian(problem, fd_step)

    dense = hess.shape[0] <= 600
    try:
        if dense:
            chol = scipy.linalg.cho_factor(hess.toarray())
            solve_cols = lambda rhs: scipy.linalg.cho_solve(chol, rhs)
        else:
            lu = scipy.sparse.linalg.splu(hess.tocsc())
            u_diag = np.abs(lu.U.diagonal())
            if u_diag.min() < 1e-12 * max(u_diag.max(), 1.0):
                raise np.linalg.LinAlgError("near-singular factorization")
            solve_cols = lu.solve
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, RuntimeError):
        nullity = _estimate_nullity(hess)
        raise RankDeficientError(
            f"Gauss-Newton Hessian is rank-deficient"
            f" (null-space dimension {nullity}); fix the gauge first",
            nullity=nullity,
        ) from None

    out = {}
    for pid in block_ids:
        off = ws.offsets[pid]
        dim = problem.params[pid].dim
        rhs = np.zeros((hess.shape[0], dim))
        rhs[np.arange(off, off + dim), np.arange(dim)] = 1.0
        cols = solve_cols(rhs)
        block = cols[off : off + dim, :]
        out[pid] = 0.5 * (block + block.T)
    return out


def marginal_covariance(problem: Problem, block_id: str, fd_step: float = 1e-7) -> np.ndarray:
    return marginal_covariances(problem, [block_id], fd_step)[block_id]


def _estimate_nullity(hess) -> int:
    n = hess.shape[0]
    if n <= 2000:
        w = np.linalg.eigvalsh(hess.toarray())
        scale = max(float(w.max()), 1.0)
        return int(np.sum(w < 1e-10 * scale))
    k = min(12, n - 1)
    w = scipy.sparse.linalg.eigsh(hess, k=k, sigma=0.0, return_eigenvectors=False)
    return int(np.sum(np.abs(w) < 1e-10))


def write_diagnostics(report: SolveReport, fh) -> None:
    """Per-iteration cost and per-group variance factors as CSV text."""
    groups = list(report.group_redundancy)
    fh.write("iteration,cost," + ",".join(f"vf_{g}" for g in groups) + "\n")
    for i, (cost, rss) in enumerate(zip(report.cost_history, report.group_rss_history)):
        cells = [str(i), repr(float(cost))]
        for g in groups:
            red = report.group_redundancy[g]
            cells.append(repr(rss[g] / red) if red > 0 else "")
        fh.write(",".join(cells) + "\n")
