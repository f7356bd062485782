"""Evaluation metrics: 2D target registration error, trajectory error, lost frames, timing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Intrinsics, Pose, project_points, rotation_error


class MetricsError(Exception):
    pass


class MarkerNotVisible(MetricsError):
    pass


class EmptyOverlap(MetricsError):
    pass


def compute_tre(markers: np.ndarray, est_pose: Pose, gt_pose: Pose, k: Intrinsics, k_est: Optional[Intrinsics] = None) -> float:
    """Mean pixel distance between marker projections under the estimated and true poses.

    ``k_est`` optionally projects the estimate with different intrinsics.
    """
    markers = np.asarray(markers, dtype=float).reshape(-1, 3)
    gt_uv, front = project_points(gt_pose, k, markers)
    if not (front.all() and k.contains(gt_uv).all()):
        raise MarkerNotVisible("marker outside the ground-truth view")
    est_uv, efront = project_points(est_pose, k_est or k, markers)
    if not efront.all():
        return float("inf")
    return float(np.mean(np.linalg.norm(est_uv - gt_uv, axis=1)))


def markers_visible(markers: np.ndarray, pose: Pose, k: Intrinsics) -> bool:
    uv, front = project_points(pose, k, np.asarray(markers, dtype=float).reshape(-1, 3))
    return bool(front.all() and k.contains(uv).all())


def compute_traj_error(est: Sequence[Optional[Pose]], gt: Sequence[Pose]) -> tuple[float, float]:
    """Translation and rotation (radians) RMSE of ``gt_i^-1 @ est_i`` over frames with an estimate."""
    if len(est) != len(gt):
        raise ValueError("sequences must be aligned by frame id")
    dt, dr = [], []
    for e, g in zip(est, gt):
        if e is None:
            continue
        rel = g.inverse() @ e
        dt.append(float(np.linalg.norm(rel.translation)))
        dr.append(rotation_error(g, e))
    if not dt:
        raise EmptyOverlap("no frame has an estimated pose")
    return float(np.sqrt(np.mean(np.square(dt)))), float(np.sqrt(np.mean(np.square(dr))))


def sample_tre_frames(candidates: Sequence[int], count: int, seed: int) -> list[int]:
    """Uniform random subset of tracked frames (sorted), seed-controlled."""
    cand = np.asarray(sorted(candidates), dtype=np.int64)
    if len(cand) <= count:
        return [int(c) for c in cand]
    rng = np.random.default_rng(seed)
    return sorted(int(c) for c in rng.choice(cand, size=count, replace=False))


def percentiles(values, qs=(50, 90, 99)) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {f"p{q}": 0.0 for q in qs}
    return {f"p{q}": float(np.percentile(v, q)) for q in qs}


@dataclass
class MetricsReport:
    tre_px: dict = field(default_factory=dict)  # mean / median / max / frames
    traj_rmse: dict = field(default_factory=dict)  # translation, rotation_deg
    lost_fraction: float = 0.0
    lost_frames: int = 0
    total_frames: int = 0
    fps: float = 0.0
    timing: dict = field(default_factory=dict)  # stage -> percentiles (ms)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.lost_fraction <= 1.0:
            raise ValueError("lost_fraction outside [0, 1]")

    def metrics_dict(self) -> dict:
        """Deterministic part of the report (no wall-clock quantities)."""
        return {
            "tre_px": self.tre_px,
            "traj_rmse": self.traj_rmse,
            "lost_fraction": self.lost_fraction,
            "lost_frames": self.lost_frames,
            "total_frames": self.total_frames,
            **self.extra,
        }

    def timing_dict(self) -> dict:
        return {"fps": self.fps, "stages_ms": self.timing}
