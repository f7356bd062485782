"""Robust nonlinear least squares over poses and map points.

Cost minimized by :func:`bundle_adjust`::

    sum_(i,j) rho_r(|proj(T_i, f_j) - q_ij|) + w_shape * sum_j rho_s(|D(f_j) - f_j|)

where ``rho(r) = r**2`` inside the Huber elbow and ``delta * (2r - delta)`` outside,
and ``D(f)`` is the closest sample of the prior surface.  ``D`` is refreshed after
every accepted step and held constant inside each linear solve.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .geometry import Intrinsics, Pose

log = logging.getLogger(__name__)


class OptimizerError(Exception):
    pass


class TooFewObservations(OptimizerError):
    pass


class SingularSystem(OptimizerError):
    pass


# ---------------------------------------------------------------------------
# robust kernels


@dataclass(frozen=True)
class RobustKernel:
    kind: str = "huber"
    delta: float = 3.0

    def __post_init__(self):
        if self.kind not in ("none", "huber"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.kind == "huber" and not self.delta > 0:
            raise ValueError("huber delta must be positive")

    def cost(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.kind == "none":
            return r * r
        d = self.delta
        return np.where(r <= d, r * r, d * (2.0 * r - d))

    def weight(self, r: np.ndarray) -> np.ndarray:
        """IRLS weight so that ``weight * r**2`` has the kernel's gradient."""
        r = np.asarray(r, dtype=float)
        if self.kind == "none":
            return np.ones_like(r)
        return np.where(r <= self.delta, 1.0, self.delta / np.maximum(r, 1e-300))


def robust_cost(residual_norm: float, kernel: RobustKernel) -> float:
    if residual_norm < 0:
        raise ValueError("residual norm must be non-negative")
    return float(kernel.cost(residual_norm))


@dataclass
class OptimizerConfig:
    w_shape: float = 100.0  # prior-shape weight
    max_iterations: int = 30
    reproj_delta: float = 3.0  # px
    shape_delta: Optional[float] = None  # scene units; None -> 2% of the mesh bbox diagonal
    tolerance: float = 1e-10  # relative cost decrease
    robust: bool = True
    pose_rounds: int = 4
    pose_iterations: int = 10
    outlier_factor: float = 2.0  # outlier gate = factor * reproj_delta

    def __post_init__(self):
        if self.w_shape < 0:
            raise ValueError("w_shape must be >= 0")

    def reproj_kernel(self) -> RobustKernel:
        return RobustKernel("huber" if self.robust else "none", self.reproj_delta)

    def shape_kernel(self, bbox_diagonal: float = 1.0) -> RobustKernel:
        d = self.shape_delta if self.shape_delta is not None else 0.02 * bbox_diagonal
        return RobustKernel("huber" if self.robust else "none", d)


# ---------------------------------------------------------------------------
# residuals and Jacobians


def project_with_jacobians(R: np.ndarray, t: np.ndarray, X: np.ndarray, k: Intrinsics):
    """Projection of points ``X`` (E,3) through per-edge rotations ``R`` (E,3,3) / (3,3).

    Returns pixels (E,2), the pose Jacobian (E,2,6) for the left update
    ``p' = Exp(w) p + v`` and the point Jacobian (E,2,3), plus camera-frame depth.
    """
    if R.ndim == 2:
        p = X @ R.T + t
    else:
        p = np.einsum("eij,ej->ei", R, X) + t
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    iz = 1.0 / z
    uv = np.stack([k.fx * x * iz + k.cx, k.fy * y * iz + k.cy], axis=1)
    n = len(X)
    Jproj = np.zeros((n, 2, 3))
    Jproj[:, 0, 0] = k.fx * iz
    Jproj[:, 0, 2] = -k.fx * x * iz * iz
    Jproj[:, 1, 1] = k.fy * iz
    Jproj[:, 1, 2] = -k.fy * y * iz * iz
    # d p / d w = -[p]_x
    Jrot = np.zeros((n, 2, 3))
    Jrot[:, :, 0] = Jproj[:, :, 1] * (-z)[:, None] + Jproj[:, :, 2] * y[:, None]
    Jrot[:, :, 1] = Jproj[:, :, 0] * z[:, None] - Jproj[:, :, 2] * x[:, None]
    Jrot[:, :, 2] = -Jproj[:, :, 0] * y[:, None] + Jproj[:, :, 1] * x[:, None]
    Jpose = np.concatenate([Jrot, Jproj], axis=2)
    if R.ndim == 2:
        Jpoint = Jproj @ R
    else:
        Jpoint = np.einsum("eik,ekj->eij", Jproj, R)
    return uv, Jpose, Jpoint, z


def reprojection_residuals(poses: Sequence[Pose], points: np.ndarray, pose_idx, point_idx, pixels, k: Intrinsics):
    """Pixel residuals ``proj - observed`` for every edge (E,2) and camera depths."""
    Rs = np.stack([p.rotation for p in poses])
    ts = np.stack([p.translation for p in poses])
    pose_idx = np.asarray(pose_idx)
    p = np.einsum("eij,ej->ei", Rs[pose_idx], points[np.asarray(point_idx)]) + ts[pose_idx]
    uv = np.stack([k.fx * p[:, 0] / p[:, 2] + k.cx, k.fy * p[:, 1] / p[:, 2] + k.cy], axis=1)
    return uv - np.asarray(pixels), p[:, 2]


def shape_residuals(points: np.ndarray, anchors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Point-to-surface residuals ``f - D(f)`` (N,3) and their Jacobian (N,3,3) with the anchors held fixed."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    J = np.broadcast_to(np.eye(3), (len(points), 3, 3))
    return points - np.asarray(anchors, dtype=float).reshape(-1, 3), J


# ---------------------------------------------------------------------------
# motion-only refinement


@dataclass
class PoseFit:
    pose: Pose
    cost: float
    iterations: int
    converged: bool


def _pose_cost(pose, X, q, k, kernel, active):
    uv = pose.apply(X)
    z = uv[:, 2]
    ok = active & (z > 1e-9)
    if ok.sum() == 0:
        return math.inf, ok
    zz = np.where(ok, z, 1.0)
    u = k.fx * uv[:, 0] / zz + k.cx
    v = k.fy * uv[:, 1] / zz + k.cy
    r = np.hypot(u - q[:, 0], v - q[:, 1])
    # points behind the camera are charged as far outliers
    r = np.where(ok, r, 1e6)
    return float(kernel.cost(r[active]).sum()), ok


def refine_pose(
    points: np.ndarray,
    pixels: np.ndarray,
    initial: Pose,
    k: Intrinsics,
    kernel: RobustKernel,
    active: Optional[np.ndarray] = None,
    max_iterations: int = 100,
    tolerance: float = 1e-10,
) -> PoseFit:
    """Levenberg-Marquardt over a single pose with IRLS robust weights."""
    X = np.asarray(points, dtype=float).reshape(-1, 3)
    q = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if active is None:
        active = np.ones(len(X), dtype=bool)
    pose = initial
    cost, ok = _pose_cost(pose, X, q, k, kernel, active)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        if not np.isfinite(cost) or ok.sum() < 3:
            break
        Xa, qa = X[ok], q[ok]
        uv, Jp, _, _ = project_with_jacobians(pose.rotation, pose.translation, Xa, k)
        e = uv - qa
        w = kernel.weight(np.linalg.norm(e, axis=1))
        H = np.einsum("e,eki,ekj->ij", w, Jp, Jp)
        g = np.einsum("e,eki,ek->i", w, Jp, e)
        if np.max(np.abs(g)) < 1e-14 * max(1.0, cost):
            converged = True
            break
        improved = False
        while lam < 1e12:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-9))
            try:
                delta = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = pose.retract(delta)
            c_new, ok_new = _pose_cost(cand, X, q, k, kernel, active)
            if c_new < cost:
                rel = (cost - c_new) / max(cost, 1e-300)
                pose, cost, ok = cand, c_new, ok_new
                lam = max(lam / 5.0, 1e-12)
                improved = True
                break
            lam *= 5.0
        if not improved:
            converged = True
            break
        if rel < tolerance or cost < 1e-24:
            converged = True
            break
    return PoseFit(pose, cost, it, converged)


def optimize_pose(
    map_points: np.ndarray,
    observations: Sequence,
    initial: Pose,
    config: OptimizerConfig,
    k: Intrinsics,
) -> tuple[Pose, np.ndarray]:
    """Motion-only robust refinement with ORB-SLAM-style outlier re-flagging rounds.

    ``observations`` is a sequence of ``(point_index, (u, v))`` or a pair of arrays.
    Returns the refined pose and a boolean inlier flag per observation.
    """
    if isinstance(observations, tuple) and len(observations) == 2 and isinstance(observations[0], np.ndarray):
        idx, pix = observations
    else:
        idx = np.array([o[0] for o in observations], dtype=np.int64)
        pix = np.array([o[1] for o in observations], dtype=float).reshape(-1, 2)
    if len(idx) < 6:
        raise TooFewObservations(f"{len(idx)} observations (need 6)")
    X = np.asarray(map_points, dtype=float)[idx]
    kernel = config.reproj_kernel()
    gate = config.outlier_factor * config.reproj_delta
    inlier = np.ones(len(idx), dtype=bool)
    c0, _ = _pose_cost(initial, X, pix, k, kernel, inlier)
    pose = initial
    for _ in range(config.pose_rounds):
        if inlier.sum() < 3:
            break
        fit = refine_pose(X, pix, pose, k, kernel, inlier, config.pose_iterations, 1e-12)
        pose = fit.pose
        r, z = _residual_norms(pose, X, pix, k)
        inlier = (r <= gate) & (z > 1e-9)
    c1, _ = _pose_cost(pose, X, pix, k, kernel, np.ones(len(idx), dtype=bool))
    if not np.isfinite(c1) or c1 > c0 * (1 + 1e-12) + 1e-12:
        # cost went up overall: keep the prior
        r, z = _residual_norms(initial, X, pix, k)
        return initial, (r <= gate) & (z > 1e-9)
    return pose, inlier


def _residual_norms(pose, X, q, k):
    p = pose.apply(X)
    z = p[:, 2]
    zz = np.where(z > 1e-9, z, 1.0)
    u = k.fx * p[:, 0] / zz + k.cx
    v = k.fy * p[:, 1] / zz + k.cy
    r = np.hypot(u - q[:, 0], v - q[:, 1])
    return np.where(z > 1e-9, r, np.inf), z


# ---------------------------------------------------------------------------
# bundle adjustment


@dataclass(eq=False)
class BaProblem:
    k: Intrinsics
    poses: list[Pose]
    fixed: np.ndarray
    points: np.ndarray
    edge_pose: np.ndarray
    edge_point: np.ndarray
    edge_pixel: np.ndarray
    shape_points: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    surface: object = None  # SurfaceIndex
    bbox_diagonal: float = 1.0

    def __post_init__(self):
        self.fixed = np.asarray(self.fixed, dtype=bool)
        self.points = np.array(self.points, dtype=float).reshape(-1, 3)
        self.edge_pose = np.asarray(self.edge_pose, dtype=np.int64)
        self.edge_point = np.asarray(self.edge_point, dtype=np.int64)
        self.edge_pixel = np.asarray(self.edge_pixel, dtype=float).reshape(-1, 2)
        self.shape_points = np.asarray(self.shape_points, dtype=np.int64)
        if len(self.fixed) != len(self.poses):
            raise ValueError("fixed flags do not match poses")
        if len(self.edge_pose) and (self.edge_pose.max() >= len(self.poses) or self.edge_point.max() >= len(self.points)):
            raise ValueError("edge references a missing vertex")
        if not self.fixed.any():
            raise ValueError("gauge: at least one pose must be fixed")
        if len(self.shape_points) and self.surface is None:
            raise ValueError("shape edges need a surface index")

    def to_text(self) -> str:
        """One line per vertex/edge, for cross-checking against external solvers."""
        k = self.k
        lines = [f"K {float(k.fx)!r} {float(k.fy)!r} {float(k.cx)!r} {float(k.cy)!r} {k.width} {k.height}"]
        for i, p in enumerate(self.poses):
            vals = " ".join(repr(float(x)) for x in (*p.quat, *p.translation))
            lines.append(f"POSE {i} {int(self.fixed[i])} {vals}")
        for j, x in enumerate(self.points):
            lines.append(f"POINT {j} " + " ".join(repr(float(v)) for v in x))
        for i, j, q in zip(self.edge_pose, self.edge_point, self.edge_pixel):
            lines.append(f"EDGE {i} {j} {float(q[0])!r} {float(q[1])!r}")
        for j in self.shape_points:
            lines.append(f"SHAPE {j}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, surface=None, bbox_diagonal: float = 1.0) -> "BaProblem":
        poses, fixed, points, ei, ej, eq, shape = [], [], [], [], [], [], []
        k = None
        for line in text.splitlines():
            p = line.split()
            if not p:
                continue
            if p[0] == "K":
                k = Intrinsics(float(p[1]), float(p[2]), float(p[3]), float(p[4]), int(p[5]), int(p[6]))
            elif p[0] == "POSE":
                fixed.append(bool(int(p[2])))
                v = [float(x) for x in p[3:]]
                poses.append(Pose(v[:4], v[4:]))
            elif p[0] == "POINT":
                points.append([float(x) for x in p[2:5]])
            elif p[0] == "EDGE":
                ei.append(int(p[1]))
                ej.append(int(p[2]))
                eq.append([float(p[3]), float(p[4])])
            elif p[0] == "SHAPE":
                shape.append(int(p[1]))
        return cls(k, poses, fixed, points, ei, ej, eq, shape, surface, bbox_diagonal)


@dataclass
class BaResult:
    poses: list[Pose]
    points: np.ndarray
    initial_cost: float
    final_cost: float
    iterations: int
    cost_history: list[float]
    edge_residuals: np.ndarray


def ba_cost(problem: BaProblem, poses, points, config: OptimizerConfig, anchors=None) -> float:
    """Total robust cost; with ``anchors=None`` the closest-point anchors are looked up fresh."""
    kr = config.reproj_kernel()
    e, z = reprojection_residuals(poses, points, problem.edge_pose, problem.edge_point, problem.edge_pixel, problem.k)
    r = np.linalg.norm(e, axis=1)
    r = np.where(z > 1e-9, r, 1e6)
    cost = float(kr.cost(r).sum())
    if config.w_shape > 0 and len(problem.shape_points):
        pts = points[problem.shape_points]
        if anchors is None:
            anchors, _ = problem.surface.closest_points(pts)
        ks = config.shape_kernel(problem.bbox_diagonal)
        cost += config.w_shape * float(ks.cost(np.linalg.norm(pts - anchors, axis=1)).sum())
    return cost


def _block_inverse3(V: np.ndarray) -> np.ndarray:
    return np.linalg.inv(V)


def bundle_adjust(problem: BaProblem, config: OptimizerConfig, max_iterations: Optional[int] = None) -> BaResult:
    """Damped Gauss-Newton (Levenberg-Marquardt) with a Schur complement on the point blocks."""
    k = problem.k
    n_iter = config.max_iterations if max_iterations is None else max_iterations
    poses = list(problem.poses)
    points = problem.points.copy()
    P, N = len(poses), len(points)
    free = np.flatnonzero(~problem.fixed)
    free_index = np.full(P, -1, dtype=np.int64)
    free_index[free] = np.arange(len(free))
    nf = len(free)
    use_shape = config.w_shape > 0 and len(problem.shape_points) > 0
    kr = config.reproj_kernel()
    ks = config.shape_kernel(problem.bbox_diagonal)

    ep, ej, eq = problem.edge_pose, problem.edge_point, problem.edge_pixel
    E = len(ep)
    efree = free_index[ep]
    has_free = efree >= 0
    # sparsity pattern of the pose-point coupling block, fixed across iterations
    fe = np.flatnonzero(has_free)
    rows = (6 * efree[fe])[:, None, None] + np.arange(6)[None, :, None]
    cols = (3 * ej[fe])[:, None, None] + np.arange(3)[None, None, :]
    rows = np.broadcast_to(rows, (len(fe), 6, 3)).ravel()
    cols = np.broadcast_to(cols, (len(fe), 6, 3)).ravel()

    def anchors_for(pts):
        if not use_shape:
            return None
        a, _ = problem.surface.closest_points(pts[problem.shape_points])
        return a

    anchors = anchors_for(points)
    cost = ba_cost(problem, poses, points, config, anchors)
    initial_cost = cost
    history = [cost]
    lam = 1e-4
    it = 0
    for it in range(1, n_iter + 1):
        if cost <= 1e-24:
            break
        Rs = np.stack([p.rotation for p in poses])
        ts = np.stack([p.translation for p in poses])
        uv, Jp, Jx, z = project_with_jacobians(Rs[ep], ts[ep], points[ej], k)
        e = uv - eq
        w = kr.weight(np.linalg.norm(e, axis=1))
        w = np.where(z > 1e-9, w, 0.0)

        # point blocks
        V = np.zeros((N, 3, 3))
        bx = np.zeros((N, 3))
        np.add.at(V, ej, np.einsum("e,eki,ekj->eij", w, Jx, Jx))
        np.add.at(bx, ej, np.einsum("e,eki,ek->ei", w, Jx, e))
        if use_shape:
            sidx = problem.shape_points
            d, Js = shape_residuals(points[sidx], anchors)
            ws = config.w_shape * ks.weight(np.linalg.norm(d, axis=1))
            np.add.at(V, sidx, np.einsum("n,nki,nkj->nij", ws, Js, Js))
            np.add.at(bx, sidx, np.einsum("n,nki,nk->ni", ws, Js, d))
        # pose blocks
        U = np.zeros((nf, 6, 6))
        bp = np.zeros((nf, 6))
        if nf:
            np.add.at(U, efree[fe], np.einsum("e,eki,ekj->eij", w[fe], Jp[fe], Jp[fe]))
            np.add.at(bp, efree[fe], np.einsum("e,eki,ek->ei", w[fe], Jp[fe], e[fe]))
            Wb = np.einsum("e,eki,ekj->eij", w[fe], Jp[fe], Jx[fe])
            Wmat = sp.csr_matrix((Wb.ravel(), (rows, cols)), shape=(6 * nf, 3 * N))
        grad = max(np.abs(bx).max(initial=0.0), np.abs(bp).max(initial=0.0))
        if grad < 1e-15 * max(1.0, cost):
            break

        Vd = np.diagonal(V, axis1=1, axis2=2)
        Ud = np.diagonal(U, axis1=1, axis2=2) if nf else np.zeros((0, 6))
        accepted = False
        while lam < 1e16:
            Vdamp = V + lam * np.einsum("ni,ij->nij", np.maximum(Vd, 1e-9), np.eye(3))
            try:
                Vinv = _block_inverse3(Vdamp)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            if nf:
                Udense = scipy.linalg.block_diag(*(U + lam * np.einsum("ni,ij->nij", np.maximum(Ud, 1e-9), np.eye(6))))
                Vinv_sp = sp.bsr_matrix((Vinv, np.arange(N), np.arange(N + 1)), shape=(3 * N, 3 * N))
                WV = (Wmat @ Vinv_sp).tocsr()
                S = Udense - (WV @ Wmat.T).toarray()
                rhs = -bp.ravel() + WV @ bx.ravel()
                try:
                    cf = scipy.linalg.cho_factor(S, check_finite=False)
                    dp = scipy.linalg.cho_solve(cf, rhs, check_finite=False)
                except (np.linalg.LinAlgError, ValueError):
                    lam *= 10
                    continue
                if not np.all(np.isfinite(dp)):
                    lam *= 10
                    continue
                tmp = -bx.ravel() - Wmat.T @ dp
            else:
                dp = np.zeros(0)
                tmp = -bx.ravel()
            dx = np.einsum("nij,nj->ni", Vinv, tmp.reshape(N, 3))
            cand_poses = list(poses)
            for fi, pi in enumerate(free):
                cand_poses[pi] = poses[pi].retract(dp[6 * fi : 6 * fi + 6])
            cand_points = points + dx
            c_new = ba_cost(problem, cand_poses, cand_points, config, anchors)
            if np.isfinite(c_new) and c_new < cost:
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            if lam >= 1e16 and it == 1 and not np.isfinite(cost):
                raise SingularSystem("normal equations could not be solved")
            break
        poses, points = cand_poses, cand_points
        anchors = anchors_for(points)
        new_cost = ba_cost(problem, poses, points, config, anchors)
        # refreshing the anchors can only lower the cost
        assert new_cost <= c_new * (1 + 1e-12) + 1e-300
        rel = (cost - new_cost) / max(cost, 1e-300)
        cost = new_cost
        history.append(cost)
        lam = max(lam / 3.0, 1e-12)
        if rel < config.tolerance:
            break
    e, _ = reprojection_residuals(poses, points, ep, ej, eq, k)
    # fixed poses are passed through untouched
    for i in np.flatnonzero(problem.fixed):
        poses[i] = problem.poses[i]
    return BaResult(poses, points, initial_cost, cost, it, history, np.linalg.norm(e, axis=1) if E else np.zeros(0))


def local_bundle_adjust(slam_map, center_kf: int, window_size: int, config: OptimizerConfig, surface=None,
                        min_shared: int = 15) -> Optional[BaResult]:
    """Optimize the covisibility window around ``center_kf`` and write results back to ``slam_map``."""
    window = covisibility_window(slam_map, center_kf, window_size, min_shared)
    return _adjust_keyframes(slam_map, window, config, surface)


def covisibility_window(slam_map, center_kf: int, window_size: int, min_shared: int = 15) -> list:
    """``center_kf`` plus up to ``window_size - 1`` keyframes sharing >= ``min_shared`` points, most shared first."""
    if center_kf not in slam_map.keyframes:
        raise KeyError(f"keyframe {center_kf} not in map")
    cov = slam_map.covisibility(center_kf)
    neighbors = [kf for kf, n in sorted(cov.items(), key=lambda kv: (-kv[1], kv[0])) if n >= min_shared]
    return [center_kf] + neighbors[: max(0, window_size - 1)]


def global_bundle_adjust(slam_map, config: OptimizerConfig, surface=None) -> Optional[BaResult]:
    return _adjust_keyframes(slam_map, list(slam_map.keyframes), config, surface)


@dataclass
class WindowProblem:
    problem: BaProblem
    kf_order: list
    point_ids: list
    fixed: np.ndarray
    edge_kf: np.ndarray
    edge_pid: np.ndarray


def build_window_problem(slam_map, window: list, config: OptimizerConfig, surface) -> Optional[WindowProblem]:
    """BA problem over ``window`` keyframes; other keyframes seeing the window's points enter fixed."""
    window_set = set(window)
    point_ids = sorted({int(pid) for kf in window for pid in slam_map.keyframes[kf].point_ids if pid >= 0})
    if not point_ids:
        return None
    pindex = {pid: n for n, pid in enumerate(point_ids)}
    kf_order = list(window)
    extra = sorted({kf for pid in point_ids for kf in slam_map.points[pid].observations} - window_set)
    kf_order += extra
    kindex = {kf: n for n, kf in enumerate(kf_order)}
    poses = [slam_map.keyframes[kf].pose for kf in kf_order]
    fixed = np.array([(kf not in window_set) or slam_map.keyframes[kf].fixed for kf in kf_order])
    if not fixed.any():
        return None
    ei, ej, eq = [], [], []
    for pid in point_ids:
        mp = slam_map.points[pid]
        for kf, obs in sorted(mp.observations.items()):
            ei.append(kindex[kf])
            ej.append(pindex[pid])
            eq.append(slam_map.keyframes[kf].pixels[obs])
    points = np.array([slam_map.points[pid].position for pid in point_ids])
    use_shape = surface is not None and config.w_shape > 0
    problem = BaProblem(
        slam_map.k, poses, fixed, points, ei, ej, eq,
        np.arange(len(point_ids)) if use_shape else np.zeros(0, dtype=np.int64),
        surface if use_shape else None, slam_map.bbox_diagonal,
    )
    edge_kf = np.array([kf_order[i] for i in ei], dtype=np.int64)
    edge_pid = np.array([point_ids[j] for j in ej], dtype=np.int64)
    return WindowProblem(problem, kf_order, point_ids, fixed, edge_kf, edge_pid)


def apply_window_result(slam_map, wp: WindowProblem, result: BaResult, config: OptimizerConfig) -> int:
    """Write optimized poses/points back and drop far-outlier observations; returns the drop count."""
    for n, kf in enumerate(wp.kf_order):
        if not wp.fixed[n] and kf in slam_map.keyframes:
            slam_map.keyframes[kf].pose = result.poses[n]
    for n, pid in enumerate(wp.point_ids):
        if pid in slam_map.points:
            slam_map.points[pid].position = result.points[n].copy()
    # drop observations that ended far outside the robust gate
    gate = config.outlier_factor * config.reproj_delta * 2.0
    bad = np.flatnonzero(result.edge_residuals > gate)
    for b in bad:
        slam_map.remove_observation(int(wp.edge_kf[b]), int(wp.edge_pid[b]))
    return len(bad)


def _adjust_keyframes(slam_map, window: list, config: OptimizerConfig, surface) -> Optional[BaResult]:
    wp = build_window_problem(slam_map, window, config, surface)
    if wp is None:
        return None
    result = bundle_adjust(wp.problem, config)
    apply_window_result(slam_map, wp, result, config)
    return result
