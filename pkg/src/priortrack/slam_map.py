"""Map points, keyframes and the covisibility bookkeeping shared by tracking and mapping."""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Intrinsics, Pose


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    origin: str  # "prior_depth" | "triangulated"
    feature_id: int = -1
    descriptor: Optional[np.ndarray] = None
    aliases: list = field(default_factory=list)  # further feature ids matched by descriptor
    observations: dict = field(default_factory=dict)  # keyframe id -> observation index
    # visibility record over recent keyframes that should have observed the point
    seen_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.origin not in ("prior_depth", "triangulated"):
            raise ValueError(f"unknown origin {self.origin!r}")
        self.position = np.asarray(self.position, dtype=float).reshape(3)


@dataclass
class Keyframe:
    id: int
    frame_id: int
    pose: Pose
    pixels: np.ndarray
    feature_ids: np.ndarray
    point_ids: np.ndarray  # map point per observation, -1 when unassigned
    descriptors: Optional[np.ndarray] = None
    fixed: bool = False
    image: Optional[np.ndarray] = None


class RWLock:
    """Many readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


class SlamMap:
    def __init__(self, k: Intrinsics, bbox_diagonal: float = 1.0):
        self.k = k
        self.bbox_diagonal = float(bbox_diagonal)
        self.keyframes: dict[int, Keyframe] = {}
        self.points: dict[int, MapPoint] = {}
        self.feature_to_point: dict[int, int] = {}
        self.lock = RWLock()
        self._next_kf = 1
        self._next_pt = 0

    def __len__(self) -> int:
        return len(self.points)

    # -- construction

    def add_keyframe(self, frame_id, pose, pixels, feature_ids, descriptors=None, fixed=False, image=None) -> Keyframe:
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        kf = Keyframe(
            self._next_kf, int(frame_id), pose, pixels, np.asarray(feature_ids, dtype=np.int64).copy(),
            np.full(len(pixels), -1, dtype=np.int64), descriptors, fixed, image,
        )
        self.keyframes[kf.id] = kf
        self._next_kf += 1
        return kf

    def add_point(self, position, origin, feature_id=-1, descriptor=None) -> MapPoint:
        mp = MapPoint(self._next_pt, position, origin, int(feature_id), descriptor)
        self.points[mp.id] = mp
        if feature_id >= 0:
            self.feature_to_point[int(feature_id)] = mp.id
        self._next_pt += 1
        return mp

    def add_observation(self, kf_id: int, obs_idx: int, point_id: int) -> None:
        kf = self.keyframes[kf_id]
        mp = self.points[point_id]
        if kf_id in mp.observations:
            return
        kf.point_ids[obs_idx] = point_id
        mp.observations[kf_id] = obs_idx

    def remove_observation(self, kf_id: int, point_id: int) -> None:
        mp = self.points.get(point_id)
        if mp is None or kf_id not in mp.observations:
            return
        idx = mp.observations.pop(kf_id)
        self.keyframes[kf_id].point_ids[idx] = -1
        min_obs = 2 if mp.origin == "triangulated" else 1
        if len(mp.observations) < min_obs:
            self.remove_point(point_id)

    def remove_point(self, point_id: int) -> None:
        mp = self.points.pop(point_id, None)
        if mp is None:
            return
        for kf_id, idx in mp.observations.items():
            self.keyframes[kf_id].point_ids[idx] = -1
        for fid in [mp.feature_id, *mp.aliases]:
            if self.feature_to_point.get(fid) == point_id:
                del self.feature_to_point[fid]

    def link_feature(self, feature_id: int, point_id: int) -> None:
        """Associate another persistent feature id with an existing point."""
        mp = self.points[point_id]
        if feature_id != mp.feature_id and feature_id not in mp.aliases:
            mp.aliases.append(int(feature_id))
        self.feature_to_point[int(feature_id)] = point_id

    # -- queries

    def covisibility(self, kf_id: int) -> dict[int, int]:
        """Shared map-point counts between ``kf_id`` and every other keyframe."""
        counts: Counter = Counter()
        for pid in self.keyframes[kf_id].point_ids:
            if pid < 0:
                continue
            for other in self.points[pid].observations:
                if other != kf_id:
                    counts[other] += 1
        return dict(counts)

    def point_array(self, ids=None) -> tuple[np.ndarray, np.ndarray]:
        ids = np.array(sorted(self.points) if ids is None else ids, dtype=np.int64)
        pos = np.array([self.points[i].position for i in ids]).reshape(-1, 3)
        return ids, pos

    def last_keyframe(self) -> Keyframe:
        return self.keyframes[max(self.keyframes)]

    def first_keyframe(self) -> Keyframe:
        return self.keyframes[min(self.keyframes)]
