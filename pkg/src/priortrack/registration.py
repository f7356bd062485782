"""Initial 3D-2D registration of the prior mesh to the first frame.

Global search is deterministic multi-start local optimization: 24 octahedral
rotations x 3 depth guesses are screened together by a few batched damped
Gauss-Newton steps, the most promising starts are refined to convergence by a
Huber-robust Levenberg-Marquardt, and the lowest RMS residual wins.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import Intrinsics, Pose, so3_exp
from .optimizer import RobustKernel, refine_pose


class RegistrationError(Exception):
    pass


class TooFewPoints(RegistrationError):
    pass


class DegenerateConfiguration(RegistrationError):
    pass


@dataclass(frozen=True)
class Correspondence:
    point3: tuple
    pixel: tuple
    id: int = 0


@dataclass
class RegistrationConfig:
    depth_factors: tuple = (0.5, 1.0, 2.0)
    huber_delta: float = 3.0
    max_iterations: int = 100
    tolerance: float = 1e-10
    use_octahedral: bool = True
    screen_iterations: int = 10  # batched steps for every start; 0 refines all starts fully
    screen_keep: int = 4


@dataclass
class RegistrationResult:
    pose: Pose
    rms_px: float
    per_start_residuals: list = field(default_factory=list)
    converged: bool = True
    best_seed: int = 0


def octahedral_rotations() -> list[np.ndarray]:
    """The 24 proper rotations of the cube (signed permutation matrices with det +1)."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            R = np.zeros((3, 3))
            for r, c in enumerate(perm):
                R[r, c] = signs[r]
            if np.linalg.det(R) > 0:
                out.append(R)
    return out


def _as_arrays(corrs) -> tuple[np.ndarray, np.ndarray]:
    X = np.array([c.point3 for c in corrs], dtype=float).reshape(-1, 3)
    q = np.array([c.pixel for c in corrs], dtype=float).reshape(-1, 2)
    return X, q


def _rms(pose: Pose, X, q, k) -> float:
    p = pose.apply(X)
    if np.any(p[:, 2] <= 1e-9):
        return float("inf")
    uv = np.stack([k.fx * p[:, 0] / p[:, 2] + k.cx, k.fy * p[:, 1] / p[:, 2] + k.cy], axis=1)
    return float(np.sqrt(np.mean(np.sum((uv - q) ** 2, axis=1))))


def seed_poses(X: np.ndarray, q: np.ndarray, k: Intrinsics, config: RegistrationConfig) -> list[Pose]:
    """Rotation seeds with translations that put the 3D centroid on the 2D centroid's ray."""
    c3 = X.mean(0)
    c2 = q.mean(0)
    spread3 = np.sqrt(np.mean(np.sum((X - c3) ** 2, axis=1)))
    spread2 = np.sqrt(np.mean(np.sum((q - c2) ** 2, axis=1)))
    f = 0.5 * (k.fx + k.fy)
    depth0 = f * spread3 / max(spread2, 1e-6)
    ray = np.array([(c2[0] - k.cx) / k.fx, (c2[1] - k.cy) / k.fy, 1.0])
    rotations = octahedral_rotations() if config.use_octahedral else [np.eye(3)]
    seeds = []
    for R in rotations:
        for s in config.depth_factors:
            d = depth0 * s
            seeds.append(Pose.from_rt(R, d * ray - R @ c3))
    return seeds


def _batch_exp(w: np.ndarray) -> np.ndarray:
    return np.stack([so3_exp(v) for v in w])


def _batch_cost(R, t, X, q, k, delta):
    p = np.einsum("sij,nj->sni", R, X) + t[:, None, :]
    z = p[..., 2]
    ok = z > 1e-9
    zz = np.where(ok, z, 1.0)
    e = np.stack([k.fx * p[..., 0] / zz + k.cx - q[:, 0], k.fy * p[..., 1] / zz + k.cy - q[:, 1]], axis=-1)
    r = np.where(ok, np.linalg.norm(e, axis=-1), 1e6)
    rho = np.where(r <= delta, r * r, delta * (2.0 * r - delta))
    return rho.sum(axis=1), p, e, r, ok


def screen_starts(starts: Sequence[Pose], X, q, k: Intrinsics, delta: float, iterations: int):
    """Damped Gauss-Newton on all starts at once with IRLS Huber weights.

    Returns rotations (S,3,3), translations (S,3) and robust costs (S,).
    """
    R = np.stack([s.rotation for s in starts])
    t = np.stack([s.translation for s in starts])
    lam = np.full(len(starts), 1e-3)
    cost, p, e, r, ok = _batch_cost(R, t, X, q, k, delta)
    for _ in range(iterations):
        x, y, z = p[..., 0], p[..., 1], np.where(ok, p[..., 2], 1.0)
        iz = 1.0 / z
        J = np.zeros(p.shape[:2] + (2, 6))
        J[..., 0, 3] = k.fx * iz
        J[..., 0, 5] = -k.fx * x * iz * iz
        J[..., 1, 4] = k.fy * iz
        J[..., 1, 5] = -k.fy * y * iz * iz
        # rotation columns: d p / d w = -[p]_x
        for c in range(2):
            J[..., c, 0] = J[..., c, 4] * -z + J[..., c, 5] * y
            J[..., c, 1] = J[..., c, 3] * z - J[..., c, 5] * x
            J[..., c, 2] = -J[..., c, 3] * y + J[..., c, 4] * x
        w = np.where(ok, np.minimum(1.0, delta / np.maximum(r, 1e-300)), 0.0)
        H = np.einsum("sn,snki,snkj->sij", w, J, J)
        g = np.einsum("sn,snki,snk->si", w, J, e)
        diag = np.maximum(np.diagonal(H, axis1=1, axis2=2), 1e-9)
        A = H + lam[:, None, None] * np.einsum("si,ij->sij", diag, np.eye(6))
        step = -np.linalg.solve(A, g[..., None])[..., 0]
        dR = _batch_exp(step[:, :3])
        Rn = dR @ R
        tn = np.einsum("sij,sj->si", dR, t) + step[:, 3:]
        cn, pn, en, rn, okn = _batch_cost(Rn, tn, X, q, k, delta)
        acc = cn < cost
        R[acc], t[acc], cost[acc] = Rn[acc], tn[acc], cn[acc]
        p[acc], e[acc], r[acc], ok[acc] = pn[acc], en[acc], rn[acc], okn[acc]
        lam = np.where(acc, np.maximum(lam / 5.0, 1e-12), np.minimum(lam * 5.0, 1e12))
    return R, t, cost


def solve_initial_registration(
    corrs: Sequence[Correspondence] | tuple,
    k: Intrinsics,
    config: Optional[RegistrationConfig] = None,
    seeds: Optional[Sequence[Pose]] = None,
    extra_seeds: Sequence[Pose] = (),
) -> RegistrationResult:
    """Pose minimizing the pixel reprojection error of the correspondences.

    ``corrs`` is a list of :class:`Correspondence` or a ``(points3, pixels)`` pair of arrays.
    ``seeds`` replaces the multi-start set; ``extra_seeds`` are tried first.
    """
    config = config or RegistrationConfig()
    if isinstance(corrs, tuple):
        X, q = (np.asarray(a, dtype=float) for a in corrs)
        X, q = X.reshape(-1, 3), q.reshape(-1, 2)
    else:
        X, q = _as_arrays(corrs)
    if len(X) < 4:
        raise TooFewPoints(f"{len(X)} correspondences (need 4)")
    sv = np.linalg.svd(X - X.mean(0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateConfiguration("3D points are collinear")
    starts = list(extra_seeds) + list(seeds if seeds is not None else seed_poses(X, q, k, config))
    kernel = RobustKernel("huber", config.huber_delta)
    per_start = []
    refine_ids = list(range(len(starts)))
    if config.screen_iterations > 0 and len(starts) > config.screen_keep:
        R, t, cost = screen_starts(starts, X, q, k, config.huber_delta, config.screen_iterations)
        order = np.argsort(cost, kind="stable")
        refine_ids = sorted(int(i) for i in order[: config.screen_keep])
        # explicitly supplied seeds always get a full refinement
        refine_ids = sorted(set(refine_ids) | set(range(len(extra_seeds))))
        screened = {i: Pose.from_rt(R[i], t[i]) for i in range(len(starts))}
        for i in range(len(starts)):
            if i not in refine_ids:
                per_start.append((i, _rms(screened[i], X, q, k)))
        starts = [screened[i] if i >= len(extra_seeds) else starts[i] for i in range(len(starts))]
    best = None
    any_converged = False
    for sid in refine_ids:
        fit = refine_pose(X, q, starts[sid], k, kernel, None, config.max_iterations, config.tolerance)
        rms = _rms(fit.pose, X, q, k)
        per_start.append((sid, rms))
        ok = fit.converged and np.isfinite(rms)
        any_converged |= ok
        if best is None or rms < best[1]:
            best = (fit.pose, rms, sid)
    per_start.sort()
    return RegistrationResult(best[0], best[1], per_start, any_converged, best[2])


def read_correspondences(path) -> list[Correspondence]:
    """CSV with columns x,y,z,u,v (header optional)."""
    out = []
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.reader(fh)):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                vals = [float(v) for v in row[:5]]
            except ValueError:
                if n == 0:
                    continue
                raise
            out.append(Correspondence(tuple(vals[:3]), tuple(vals[3:5]), len(out)))
    return out


def write_correspondences(path, points3: np.ndarray, pixels: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "u", "v"])
        for p, q in zip(points3, pixels):
            w.writerow([repr(float(v)) for v in (*p, *q)])


def read_pose_file(path) -> Pose:
    """12 numbers, row-major 3x4 world-to-camera matrix."""
    vals = [float(v) for v in Path(path).read_text().replace(",", " ").split()]
    if len(vals) != 12:
        raise ValueError(f"{path}: expected 12 numbers, got {len(vals)}")
    M = np.eye(4)
    M[:3] = np.array(vals).reshape(3, 4)
    return Pose.from_matrix(M)


def write_pose_file(path, pose: Pose) -> None:
    M = pose.matrix()[:3]
    Path(path).write_text("\n".join(" ".join(repr(float(v)) for v in row) for row in M) + "\n")
