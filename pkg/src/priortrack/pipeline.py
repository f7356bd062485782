"""Tracking state machine: prior-shape initialization, masked tracking, mapping, relocalization."""

from __future__ import annotations

import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from . import raster
from .features import FrameObservations, filter_by_mask, hamming, select_bucketed
from .geometry import DegenerateParallax, GeometryError, Intrinsics, Pose, triangulate
from .mesh import (
    BinaryMask,
    SurfaceIndex,
    TriangleMesh,
    build_surface_index,
    cast_pixels,
    default_dilation,
    render_mask,
    texture_update,
)
from .optimizer import (
    OptimizerConfig,
    OptimizerError,
    TooFewObservations,
    apply_window_result,
    build_window_problem,
    bundle_adjust,
    covisibility_window,
    optimize_pose,
)
from .registration import RegistrationConfig, RegistrationError, solve_initial_registration
from .slam_map import Keyframe, SlamMap

log = logging.getLogger(__name__)


class TrackingState(str, Enum):
    NOT_INITIALIZED = "NotInitialized"
    TRACKING = "Tracking"
    LOST = "Lost"


_LEGAL = {
    (TrackingState.NOT_INITIALIZED, TrackingState.TRACKING),
    (TrackingState.TRACKING, TrackingState.LOST),
    (TrackingState.LOST, TrackingState.TRACKING),
}


class PipelineError(Exception):
    pass


class InsufficientDepthPoints(PipelineError):
    pass


class IllegalTransition(PipelineError):
    pass


class NotInitialized(PipelineError):
    pass


@dataclass
class Toggles:
    prior_init: bool = True
    pseudo_mask: bool = True
    shape_prior_ba: bool = True

    NAMES = ("prior_init", "pseudo_mask", "shape_prior_ba")

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in self.NAMES}


@dataclass
class TrackingConfig:
    budget: int = 600  # features per frame, applied after the mask
    grid: int = 8
    dilation_px: Optional[int] = None  # None: 5 px at 1280 wide, scaled with width
    min_inliers: int = 15
    min_depth_points: int = 20
    keyframe_inlier_ratio: float = 0.7
    keyframe_max_gap: int = 20
    local_window: int = 10
    min_shared: int = 15
    min_parallax_deg: float = 0.5
    triangulation_keyframes: int = 5
    cull_window: int = 3
    cull_min_seen: int = 2
    cull_recent_only: bool = True  # only points within their first cull_window keyframes are tested
    reloc_min_matches: int = 15
    reloc_inlier_px: float = 3.0
    search_radius_px: float = 11.0
    descriptor_max_distance: int = 64
    texture: str = "keyframes"  # keyframes | frames | off
    texture_margin_px: Optional[int] = 2  # sample visible pixels this far inside the silhouette; None = all covered
    two_view_window: int = 30
    two_view_min_points: int = 50
    two_view_min_parallax_deg: float = 1.0
    two_view_min_disparity_px: float = 4.0  # median flow left after removing the best pure rotation
    two_view_iterations: int = 200
    surface_density: Optional[float] = None
    global_ba_at_end: bool = True
    queue_size: int = 2


@dataclass
class FrameResult:
    frame_id: int
    state: TrackingState
    pose: Optional[Pose]
    inlier_count: int = 0
    mask_coverage: float = 0.0
    timing: dict = field(default_factory=dict)
    keyframe: bool = False
    event: str = ""

    def __post_init__(self):
        if (self.pose is not None) != (self.state == TrackingState.TRACKING):
            raise ValueError("pose must be present exactly when tracking")


class Tracker:
    """Model-based monocular tracker over a prior mesh (world frame = mesh frame)."""

    def __init__(
        self,
        mesh: TriangleMesh,
        k: Intrinsics,
        tracking: Optional[TrackingConfig] = None,
        optimizer: Optional[OptimizerConfig] = None,
        toggles: Optional[Toggles] = None,
        t_init: Optional[Pose] = None,
        parallel: bool = False,
        surface: Optional[SurfaceIndex] = None,
        seed: int = 0,
    ):
        self.mesh = mesh
        self.k = k
        self.cfg = tracking or TrackingConfig()
        self.opt = optimizer or OptimizerConfig()
        self.toggles = toggles or Toggles()
        self.t_init = t_init
        self.parallel = parallel
        self.seed = seed
        self.dilation = self.cfg.dilation_px if self.cfg.dilation_px is not None else default_dilation(k)
        self.surface = surface
        if self.toggles.shape_prior_ba and self.surface is None:
            self.surface = build_surface_index(mesh, self.cfg.surface_density, seed)
        self.textured = mesh.copy()
        self.textured.face_colors[:] = 0.0
        self.textured.face_weights[:] = 0.0
        self.map: Optional[SlamMap] = None
        self.state = TrackingState.NOT_INITIALIZED
        self.transitions: list = []  # (frame_id, from, to), append-only
        self.results: list[FrameResult] = []
        self.last_pose: Optional[Pose] = None
        self.velocity = Pose.identity()
        self.ref_kf: Optional[int] = None
        self.frames_since_kf = 0
        self.init_frame: Optional[int] = None
        self.init_attempts = 0
        self.last_init_error = ""
        self._init_ref: Optional[FrameObservations] = None
        self._texture_lock = threading.Lock()
        self._rng = np.random.default_rng(seed)
        self._queue: Optional[queue.Queue] = None
        self._worker: Optional[threading.Thread] = None
        self._worker_error: Optional[BaseException] = None
        self.mapping_ms: list = []
        if parallel:
            self._queue = queue.Queue(maxsize=self.cfg.queue_size)
            self._worker = threading.Thread(target=self._mapping_loop, name="mapping", daemon=True)
            self._worker.start()

    # ------------------------------------------------------------------
    # state

    def _transition(self, frame_id: int, new: TrackingState) -> None:
        if new == self.state:
            return
        if (self.state, new) not in _LEGAL:
            raise IllegalTransition(f"{self.state.value} -> {new.value}")
        self.transitions.append((frame_id, self.state.value, new.value))
        self.state = new

    def _mask(self, pose: Pose) -> BinaryMask:
        return render_mask(self.mesh, pose, self.k, self.dilation)

    def _select(self, frame: FrameObservations) -> FrameObservations:
        idx = select_bucketed(frame.pixels, frame.scores, self.k.width, self.k.height, self.cfg.budget, self.cfg.grid)
        return frame.subset(idx)

    # ------------------------------------------------------------------
    # initialization

    def initialize(self, frame0: FrameObservations, t_init: Pose) -> SlamMap:
        """Map from a single frame: features inside the prior's mask get depth by ray casting the mesh."""
        mask = self._mask(t_init)
        obs = self._select(filter_by_mask(frame0, mask))
        if len(obs):
            depth, pts, _ = cast_pixels(self.mesh, t_init, self.k, obs.pixels)
        else:
            depth, pts = np.zeros(0), np.zeros((0, 3))
        hit = np.isfinite(depth)
        if hit.sum() < self.cfg.min_depth_points:
            raise InsufficientDepthPoints(f"{int(hit.sum())} features received depth (need {self.cfg.min_depth_points})")
        smap = SlamMap(self.k, self.mesh.bbox_diagonal)
        kf = smap.add_keyframe(frame0.frame_id, t_init, obs.pixels, obs.feature_ids, obs.descriptors, True, frame0.image)
        for i in np.flatnonzero(hit):
            desc = None if obs.descriptors is None else obs.descriptors[i]
            mp = smap.add_point(pts[i], "prior_depth", int(obs.feature_ids[i]), desc)
            smap.add_observation(kf.id, int(i), mp.id)
        self._start_map(smap, kf, frame0.frame_id, t_init)
        self._texture(kf.pose, frame0.image)
        return smap

    def _start_map(self, smap: SlamMap, kf: Keyframe, frame_id: int, pose: Pose) -> None:
        self.map = smap
        self.ref_kf = kf.id
        self.last_pose = pose
        self.velocity = Pose.identity()
        self.frames_since_kf = 0
        self.init_frame = frame_id
        self._transition(frame_id, TrackingState.TRACKING)

    def _try_two_view(self, frame: FrameObservations) -> Optional[FrameResult]:
        """Classical monocular initialization from two frames; world anchored at ``t_init``."""
        t0 = time.perf_counter()
        if self.toggles.pseudo_mask and self.t_init is not None:
            frame = filter_by_mask(frame, self._mask(self.t_init))
        frame = self._select(frame)
        ref = self._init_ref
        if ref is None or frame.frame_id - ref.frame_id > self.cfg.two_view_window:
            self._init_ref = frame if len(frame) >= self.cfg.two_view_min_points else None
            return None
        common, ia, ib = np.intersect1d(ref.feature_ids, frame.feature_ids, return_indices=True)
        common_ok = common >= 0
        ia, ib = ia[common_ok], ib[common_ok]
        if len(ia) < self.cfg.two_view_min_points:
            return None
        self.init_attempts += 1
        rec = two_view_reconstruct(
            ref.pixels[ia], frame.pixels[ib], self.k, self._rng, self.cfg.two_view_iterations,
            self.cfg.two_view_min_points, self.cfg.two_view_min_parallax_deg,
            min_disparity_px=self.cfg.two_view_min_disparity_px,
        )
        if rec is None:
            self.last_init_error = "two-view reconstruction rejected"
            return None
        R, t, X, good = rec
        anchor = self.t_init if self.t_init is not None else Pose.identity()
        # monocular convention: unit median depth in the first view
        scale = 1.0 / float(np.median(X[good, 2]))
        rel = Pose.from_rt(R, t * scale)
        pose_b = rel @ anchor
        inv_a = anchor.inverse()
        smap = SlamMap(self.k, self.mesh.bbox_diagonal)
        kfa = smap.add_keyframe(ref.frame_id, anchor, ref.pixels, ref.feature_ids, ref.descriptors, True, ref.image)
        kfb = smap.add_keyframe(frame.frame_id, pose_b, frame.pixels, frame.feature_ids, frame.descriptors, False, frame.image)
        for n in np.flatnonzero(good):
            a, b = int(ia[n]), int(ib[n])
            desc = None if frame.descriptors is None else frame.descriptors[b]
            mp = smap.add_point(inv_a.apply(X[n] * scale), "triangulated", int(frame.feature_ids[b]), desc)
            smap.add_observation(kfa.id, a, mp.id)
            smap.add_observation(kfb.id, b, mp.id)
        self._start_map(smap, kfb, frame.frame_id, pose_b)
        self.velocity = Pose.identity()
        timing = {"init": (time.perf_counter() - t0) * 1e3}
        return FrameResult(frame.frame_id, self.state, pose_b, int(good.sum()), 0.0, timing, True, "init")

    # ------------------------------------------------------------------
    # per frame

    def process_frame(self, frame: FrameObservations) -> FrameResult:
        t_start = time.perf_counter()
        self._check_worker()
        if self.state == TrackingState.NOT_INITIALIZED:
            res = self._process_uninitialized(frame)
        elif self.state == TrackingState.TRACKING:
            res = self._track(frame)
        else:
            res = self._relocalize_frame(frame)
        res.timing["total"] = (time.perf_counter() - t_start) * 1e3
        self.results.append(res)
        return res

    def _process_uninitialized(self, frame: FrameObservations) -> FrameResult:
        t0 = time.perf_counter()
        if self.toggles.prior_init:
            if self.t_init is None:
                raise NotInitialized("prior initialization needs t_init")
            self.init_attempts += 1
            try:
                self.initialize(frame, self.t_init)
            except InsufficientDepthPoints as exc:
                self.last_init_error = str(exc)
                return FrameResult(frame.frame_id, self.state, None, 0, 0.0, {"init": (time.perf_counter() - t0) * 1e3})
            kf = self.map.keyframes[self.ref_kf]
            n = int((kf.point_ids >= 0).sum())
            return FrameResult(frame.frame_id, self.state, self.t_init, n, 0.0,
                               {"init": (time.perf_counter() - t0) * 1e3}, True, "init")
        res = self._try_two_view(frame)
        if res is None:
            return FrameResult(frame.frame_id, self.state, None, 0, 0.0, {"init": (time.perf_counter() - t0) * 1e3})
        return res

    def _associate(self, obs: FrameObservations, pred: Pose):
        """Observation index -> map point id, by persistent id then descriptor search near projections."""
        smap = self.map
        pids = np.array([smap.feature_to_point.get(int(f), -1) for f in obs.feature_ids], dtype=np.int64)
        if obs.descriptors is not None:
            self._descriptor_search(obs, pids, pred)
        return pids

    def _descriptor_search(self, obs: FrameObservations, pids: np.ndarray, pred: Pose) -> None:
        smap = self.map
        free_obs = np.flatnonzero(pids < 0)
        used = set(int(p) for p in pids[pids >= 0])
        cands = [pid for pid, mp in smap.points.items() if pid not in used and mp.descriptor is not None]
        if not len(free_obs) or not cands:
            return
        pos = np.array([smap.points[c].position for c in cands])
        pc = pred.apply(pos)
        front = pc[:, 2] > 1e-9
        z = np.where(front, pc[:, 2], 1.0)
        uv = np.stack([self.k.fx * pc[:, 0] / z + self.k.cx, self.k.fy * pc[:, 1] / z + self.k.cy], axis=1)
        keep = front & self.k.contains(uv)
        if not keep.any():
            return
        cands = [c for c, kp in zip(cands, keep) if kp]
        uv = uv[keep]
        D = np.array([smap.points[c].descriptor for c in cands])
        dist = hamming(obs.descriptors[free_obs], D)
        near = np.linalg.norm(obs.pixels[free_obs][:, None, :] - uv[None], axis=2) <= self.cfg.search_radius_px
        dist = np.where(near, dist, 10**6)
        taken = set()
        for n in np.argsort(dist.min(axis=1), kind="stable"):
            j = int(np.argmin(dist[n]))
            if dist[n, j] > self.cfg.descriptor_max_distance or j in taken:
                continue
            taken.add(j)
            i = free_obs[n]
            pids[i] = cands[j]
            smap.link_feature(int(obs.feature_ids[i]), cands[j])

    def _track(self, frame: FrameObservations) -> FrameResult:
        timing = {}
        t0 = time.perf_counter()
        prev = self.last_pose
        mask = self._mask(prev) if self.toggles.pseudo_mask else None
        coverage = mask.coverage if mask is not None else 1.0
        t1 = time.perf_counter()
        obs = self._select(filter_by_mask(frame, mask))
        t2 = time.perf_counter()
        pred = self.velocity @ prev
        with self.map.lock.read():
            pids = self._associate(obs, pred)
            has = np.flatnonzero(pids >= 0)
            X = np.array([self.map.points[int(p)].position for p in pids[has]]).reshape(-1, 3)
        t3 = time.perf_counter()
        timing.update(mask=(t1 - t0) * 1e3, select=(t2 - t1) * 1e3, associate=(t3 - t2) * 1e3)
        try:
            pose, inl = optimize_pose(X, (np.arange(len(has)), obs.pixels[has]), pred, self.opt, self.k)
        except TooFewObservations:
            pose, inl = None, np.zeros(len(has), dtype=bool)
        t4 = time.perf_counter()
        timing["pose"] = (t4 - t3) * 1e3
        n_inl = int(inl.sum())
        if pose is None or n_inl < self.cfg.min_inliers:
            self._transition(frame.frame_id, TrackingState.LOST)
            self.velocity = Pose.identity()
            return FrameResult(frame.frame_id, self.state, None, n_inl, coverage, timing, False, "lost")
        self.velocity = pose @ prev.inverse()
        self.last_pose = pose
        self.frames_since_kf += 1
        is_kf = self._need_keyframe(n_inl)
        if is_kf:
            point_ids = np.full(len(obs), -1, dtype=np.int64)
            point_ids[has[inl]] = pids[has[inl]]
            self._insert_keyframe(obs, pose, point_ids, mask)
        elif self.cfg.texture == "frames":
            self._texture(pose, frame.image)
        timing["mapping"] = (time.perf_counter() - t4) * 1e3
        return FrameResult(frame.frame_id, self.state, pose, n_inl, coverage, timing, is_kf)

    def _need_keyframe(self, n_inliers: int) -> bool:
        if self.frames_since_kf >= self.cfg.keyframe_max_gap:
            return True
        with self.map.lock.read():
            ref = self.map.keyframes.get(self.ref_kf)
            n_ref = int((ref.point_ids >= 0).sum()) if ref is not None else 0
        return n_ref == 0 or n_inliers < self.cfg.keyframe_inlier_ratio * n_ref

    def _insert_keyframe(self, obs: FrameObservations, pose: Pose, point_ids: np.ndarray, mask) -> None:
        with self.map.lock.write():
            kf = self.map.add_keyframe(obs.frame_id, pose, obs.pixels, obs.feature_ids, obs.descriptors, False, obs.image)
            for i in np.flatnonzero(point_ids >= 0):
                if int(point_ids[i]) in self.map.points:
                    self.map.add_observation(kf.id, int(i), int(point_ids[i]))
        self.ref_kf = kf.id
        self.frames_since_kf = 0
        if self.parallel:
            self._queue.put((kf.id, mask))
        else:
            self._map_keyframe(kf.id, mask)

    # ------------------------------------------------------------------
    # mapping

    def _map_keyframe(self, kf_id: int, mask) -> None:
        t0 = time.perf_counter()
        with self.map.lock.write():
            if kf_id not in self.map.keyframes:
                return
            fresh = self._triangulate(kf_id)
        self._local_ba(kf_id)
        with self.map.lock.write():
            self._cull(kf_id, mask, fresh)
            kf = self.map.keyframes[kf_id]
            pose, image = kf.pose, kf.image
        if self.cfg.texture in ("keyframes", "frames"):
            self._texture(pose, image)
        self.mapping_ms.append((time.perf_counter() - t0) * 1e3)

    def _triangulate(self, kf_id: int) -> set:
        """New points from unmatched features shared with recent keyframes; returns their ids."""
        smap = self.map
        kf = smap.keyframes[kf_id]
        free = np.flatnonzero((kf.point_ids < 0) & (kf.feature_ids >= 0))
        made = set()
        if not len(free):
            return made
        others = sorted((i for i in smap.keyframes if i != kf_id), reverse=True)[: self.cfg.triangulation_keyframes]
        gate = self.opt.outlier_factor * self.opt.reproj_delta
        for other_id in others:
            if not len(free):
                break
            other = smap.keyframes[other_id]
            lookup = {int(f): n for n, f in enumerate(other.feature_ids) if f >= 0 and other.point_ids[n] < 0}
            still = []
            for i in free:
                j = lookup.get(int(kf.feature_ids[i]))
                fid = int(kf.feature_ids[i])
                if j is None or fid in smap.feature_to_point:
                    still.append(i)
                    continue
                try:
                    tri = triangulate(other.pose, kf.pose, other.pixels[j], kf.pixels[i], self.k, self.cfg.min_parallax_deg)
                except GeometryError:
                    still.append(i)
                    continue
                X = tri.point
                ok = True
                for P, px in ((other.pose, other.pixels[j]), (kf.pose, kf.pixels[i])):
                    pc = P.apply(X)
                    uv = np.array([self.k.fx * pc[0] / pc[2] + self.k.cx, self.k.fy * pc[1] / pc[2] + self.k.cy])
                    if np.linalg.norm(uv - px) > gate:
                        ok = False
                if not ok:
                    still.append(i)
                    continue
                desc = None if kf.descriptors is None else kf.descriptors[i]
                mp = smap.add_point(X, "triangulated", fid, desc)
                smap.add_observation(other_id, int(j), mp.id)
                smap.add_observation(kf_id, int(i), mp.id)
                mp.seen_history.append(True)
                made.add(mp.id)
            free = np.array(still, dtype=np.int64)
        return made

    def _local_ba(self, kf_id: int) -> None:
        surface = self.surface if self.toggles.shape_prior_ba else None
        opt = self.opt if self.toggles.shape_prior_ba else replace(self.opt, w_shape=0.0)
        with self.map.lock.read():
            window = covisibility_window(self.map, kf_id, self.cfg.local_window, self.cfg.min_shared)
            wp = build_window_problem(self.map, window, opt, surface)
        if wp is None:
            return
        try:
            result = bundle_adjust(wp.problem, opt)
        except OptimizerError as exc:
            log.warning("local BA failed: %s", exc)
            return
        with self.map.lock.write():
            apply_window_result(self.map, wp, result, opt)

    def _cull(self, kf_id: int, mask, fresh=frozenset()) -> int:
        """Drop points missed in too many of the recent keyframes that should have seen them."""
        smap = self.map
        kf = smap.keyframes[kf_id]
        ids, pos = smap.point_array()
        if not len(ids):
            return 0
        pc = kf.pose.apply(pos)
        front = pc[:, 2] > 1e-9
        z = np.where(front, pc[:, 2], 1.0)
        uv = np.stack([self.k.fx * pc[:, 0] / z + self.k.cx, self.k.fy * pc[:, 1] / z + self.k.cy], axis=1)
        expected = front & self.k.contains(uv)
        if mask is not None:
            expected &= mask.contains(uv)
        expected &= ~raster.points_occluded(kf.pose.apply(self.mesh.vertices), self.mesh.faces, self.k, pc)
        observed = set(int(p) for p in kf.point_ids if p >= 0)
        removed = 0
        w, need = self.cfg.cull_window, self.cfg.cull_min_seen
        for pid, exp in zip(ids, expected):
            pid = int(pid)
            mp = smap.points.get(pid)
            if mp is None or pid in fresh or not exp:
                continue
            if self.cfg.cull_recent_only and len(mp.seen_history) >= w:
                continue  # survived its probation
            mp.seen_history.append(pid in observed)
            if len(mp.seen_history) >= w and sum(mp.seen_history[-w:]) < need:
                smap.remove_point(pid)
                removed += 1
        return removed

    def _texture(self, pose: Pose, image) -> None:
        if image is None or self.cfg.texture == "off":
            return
        img = np.asarray(image)
        if img.shape[0] != self.k.height or img.shape[1] != self.k.width:
            return
        with self._texture_lock:
            texture_update(self.textured, pose, img, self.k, self.cfg.texture_margin_px)

    # ------------------------------------------------------------------
    # relocalization

    def relocalize(self, frame: FrameObservations) -> Optional[Pose]:
        """Pose from global matches against the map (persistent ids, then descriptors); None on failure."""
        if self.map is None:
            return None
        with self.map.lock.read():
            pids = np.array([self.map.feature_to_point.get(int(f), -1) for f in frame.feature_ids], dtype=np.int64)
            if frame.descriptors is not None:
                self._global_descriptor_match(frame, pids)
            has = np.flatnonzero(pids >= 0)
            X = np.array([self.map.points[int(p)].position for p in pids[has]]).reshape(-1, 3)
        if len(has) < self.cfg.reloc_min_matches:
            return None
        q = frame.pixels[has]
        # the last tracked pose first, then the full multi-start
        attempts = [dict(seeds=[self.last_pose])] if self.last_pose is not None else []
        attempts.append({})
        for kw in attempts:
            try:
                res = solve_initial_registration((X, q), self.k, RegistrationConfig(), **kw)
            except RegistrationError:
                return None
            pc = res.pose.apply(X)
            if np.any(pc[:, 2] <= 1e-9):
                inl = pc[:, 2] > 1e-9
            else:
                inl = np.ones(len(X), dtype=bool)
            z = np.where(pc[:, 2] > 1e-9, pc[:, 2], 1.0)
            uv = np.stack([self.k.fx * pc[:, 0] / z + self.k.cx, self.k.fy * pc[:, 1] / z + self.k.cy], axis=1)
            inl &= np.linalg.norm(uv - q, axis=1) <= self.cfg.reloc_inlier_px
            if inl.sum() >= self.cfg.min_inliers:
                return res.pose
        return None

    def _global_descriptor_match(self, frame: FrameObservations, pids: np.ndarray) -> None:
        free = np.flatnonzero(pids < 0)
        cands = [pid for pid, mp in self.map.points.items() if mp.descriptor is not None]
        if not len(free) or len(cands) < 2:
            return
        D = np.array([self.map.points[c].descriptor for c in cands])
        dist = hamming(frame.descriptors[free], D)
        order = np.argsort(dist, axis=1, kind="stable")
        best, second = dist[np.arange(len(free)), order[:, 0]], dist[np.arange(len(free)), order[:, 1]]
        used = set(int(p) for p in pids[pids >= 0])
        for n in np.argsort(best, kind="stable"):
            c = cands[int(order[n, 0])]
            if best[n] <= self.cfg.descriptor_max_distance and best[n] < 0.8 * second[n] and c not in used:
                pids[free[n]] = c
                used.add(c)

    def _relocalize_frame(self, frame: FrameObservations) -> FrameResult:
        t0 = time.perf_counter()
        pose = self.relocalize(frame)
        timing = {"relocalize": (time.perf_counter() - t0) * 1e3}
        if pose is None:
            return FrameResult(frame.frame_id, self.state, None, 0, 0.0, timing)
        # refine against the masked features exactly as in tracking
        self._transition(frame.frame_id, TrackingState.TRACKING)
        self.last_pose = pose
        self.velocity = Pose.identity()
        res = self._track(frame)
        res.timing.update(timing)
        if res.state == TrackingState.TRACKING:
            res.event = "relocalized"
        return res

    # ------------------------------------------------------------------
    # global BA and shutdown

    def run_global_ba(self, config: Optional[OptimizerConfig] = None):
        if self.map is None or len(self.map.keyframes) < 2:
            raise PipelineError("global BA needs at least two keyframes")
        self.flush()
        opt = config or self.opt
        surface = self.surface if self.toggles.shape_prior_ba else None
        if not self.toggles.shape_prior_ba:
            opt = replace(opt, w_shape=0.0)
        with self.map.lock.write():
            wp = build_window_problem(self.map, sorted(self.map.keyframes), opt, surface)
            if wp is None:
                return None
            result = bundle_adjust(wp.problem, opt)
            apply_window_result(self.map, wp, result, opt)
        return result

    def flush(self) -> None:
        if self._queue is not None:
            self._queue.join()
            self._check_worker()

    def finish(self) -> None:
        """Drain the mapper, stop it, and run the end-of-sequence global BA."""
        self.flush()
        if self._worker is not None:
            self._queue.put(None)
            self._worker.join()
            self._worker = None
        if self.cfg.global_ba_at_end and self.map is not None and len(self.map.keyframes) >= 2:
            self.run_global_ba()

    def _mapping_loop(self) -> None:
        while True:
            item = self._queue.get()
            try:
                if item is None:
                    return
                if self._worker_error is None:
                    self._map_keyframe(*item)
            except BaseException as exc:  # surfaced on the tracking thread
                self._worker_error = exc
            finally:
                self._queue.task_done()

    def _check_worker(self) -> None:
        if self._worker_error is not None:
            raise PipelineError(f"mapping worker failed: {self._worker_error!r}") from self._worker_error

    def keyframe_poses(self) -> dict:
        return {kf.frame_id: kf.pose for kf in self.map.keyframes.values()} if self.map else {}


# ---------------------------------------------------------------------------
# two-view geometry for the monocular baseline


def _normalize(pixels: np.ndarray, k: Intrinsics) -> np.ndarray:
    return np.stack([(pixels[:, 0] - k.cx) / k.fx, (pixels[:, 1] - k.cy) / k.fy], axis=1)


def _conditioner(x: np.ndarray) -> np.ndarray:
    c = x.mean(axis=0)
    scale = np.sqrt(2.0) / max(float(np.mean(np.linalg.norm(x - c, axis=1))), 1e-12)
    return np.array([[scale, 0.0, -scale * c[0]], [0.0, scale, -scale * c[1]], [0.0, 0.0, 1.0]])


def essential_eight_point(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Essential matrix with ``x2^T E x1 = 0`` from >= 8 normalized correspondences.

    Coordinates are conditioned (zero mean, mean norm sqrt 2) before the linear solve.
    """
    T1, T2 = _conditioner(x1), _conditioner(x2)
    x1 = x1 @ T1[:2, :2].T + T1[:2, 2]
    x2 = x2 @ T2[:2, :2].T + T2[:2, 2]
    A = np.stack([
        x2[:, 0] * x1[:, 0], x2[:, 0] * x1[:, 1], x2[:, 0],
        x2[:, 1] * x1[:, 0], x2[:, 1] * x1[:, 1], x2[:, 1],
        x1[:, 0], x1[:, 1], np.ones(len(x1)),
    ], axis=1)
    _, _, Vt = np.linalg.svd(A)
    E = T2.T @ Vt[-1].reshape(3, 3) @ T1
    U, s, Vt = np.linalg.svd(E)
    m = 0.5 * (s[0] + s[1])
    return U @ np.diag([m, m, 0.0]) @ Vt


def sampson_distance(E: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    h1 = np.column_stack([x1, np.ones(len(x1))])
    h2 = np.column_stack([x2, np.ones(len(x2))])
    Ex1 = h1 @ E.T
    Etx2 = h2 @ E
    num = np.sum(h2 * Ex1, axis=1) ** 2
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return num / np.maximum(den, 1e-300)


def decompose_essential(E: np.ndarray) -> list:
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    return [(U @ W @ Vt, t), (U @ W @ Vt, -t), (U @ W.T @ Vt, t), (U @ W.T @ Vt, -t)]


def _triangulate_normalized(R, t, x1, x2):
    """Linear triangulation in the first camera's frame for normalized coordinates."""
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, t.reshape(3, 1)])
    X = np.empty((len(x1), 3))
    for n in range(len(x1)):
        A = np.stack([
            x1[n, 0] * P1[2] - P1[0], x1[n, 1] * P1[2] - P1[1],
            x2[n, 0] * P2[2] - P2[0], x2[n, 1] * P2[2] - P2[1],
        ])
        _, _, Vt = np.linalg.svd(A)
        h = Vt[-1]
        X[n] = h[:3] / h[3] if abs(h[3]) > 1e-15 else np.nan
    return X


def _sampson_residual(E, x1, x2):
    h1 = np.c_[x1, np.ones(len(x1))]
    h2 = np.c_[x2, np.ones(len(x2))]
    Ex1 = h1 @ E.T
    Etx2 = h2 @ E
    num = np.sum(h2 * Ex1, axis=1)
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return num / np.sqrt(den + 1e-300)


def _hat(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def refine_relative_pose(R, t, x1, x2, scale=1.0):
    """Minimise the robust Sampson error over (R, unit t), starting from a linear estimate."""
    from scipy.optimize import least_squares
    from scipy.spatial.transform import Rotation

    def fun(p):
        Rp = Rotation.from_rotvec(p[:3]).as_matrix() @ R
        tp = p[3:] / np.linalg.norm(p[3:])
        return _sampson_residual(_hat(tp) @ Rp, x1, x2) / scale

    sol = least_squares(fun, np.r_[np.zeros(3), t / np.linalg.norm(t)], loss="huber", f_scale=1.0, max_nfev=100)
    Rr = Rotation.from_rotvec(sol.x[:3]).as_matrix() @ R
    return Rr, sol.x[3:] / np.linalg.norm(sol.x[3:])


def _cheirality(R, t, x1, x2, min_parallax_deg):
    X = _triangulate_normalized(R, t, x1, x2)
    X2 = X @ R.T + t
    with np.errstate(invalid="ignore"):
        good = np.isfinite(X).all(1) & (X[:, 2] > 0) & (X2[:, 2] > 0)
        c2 = -R.T @ t
        d1 = X / np.linalg.norm(X, axis=1, keepdims=True)
        d2 = X - c2
        d2 = d2 / np.linalg.norm(d2, axis=1, keepdims=True)
        par = np.degrees(np.arccos(np.clip(np.sum(d1 * d2, axis=1), -1.0, 1.0)))
    good &= np.nan_to_num(par) >= min_parallax_deg
    return X, good


def rotation_compensated_disparity(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Per-point image distance (normalized units) left after the best pure rotation between the views.

    Translation alone produces this residual, so it measures usable parallax independently of the
    essential-matrix fit, which can trade rotation for translation on a shallow, narrow target.
    """
    from scipy.spatial.transform import Rotation

    b1 = np.c_[x1, np.ones(len(x1))]
    b2 = np.c_[x2, np.ones(len(x2))]
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    b2 /= np.linalg.norm(b2, axis=1, keepdims=True)
    rot, _ = Rotation.align_vectors(b2, b1)
    p = rot.apply(b1)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = p[:, :2] / p[:, 2:]
    return np.nan_to_num(np.linalg.norm(p - x2, axis=1), nan=np.inf)


def two_view_reconstruct(px1, px2, k: Intrinsics, rng, iterations=200, min_points=50, min_parallax_deg=1.0,
                         threshold_px=3.0, min_disparity_px=4.0):
    """Relative pose (R, t with |t| = 1) and points in view 1, or None when the geometry is not trusted."""
    x1, x2 = _normalize(px1, k), _normalize(px2, k)
    n = len(x1)
    if n < max(8, min_points):
        return None
    f = 0.5 * (k.fx + k.fy)
    thr = (threshold_px / f) ** 2
    best_E, best_inl, best_count = None, None, -1
    for _ in range(iterations):
        s = rng.choice(n, 8, replace=False)
        E = essential_eight_point(x1[s], x2[s])
        inl = sampson_distance(E, x1, x2) < thr
        c = int(inl.sum())
        if c > best_count:
            best_E, best_inl, best_count = E, inl, c
    if best_count < min_points:
        return None
    disparity = rotation_compensated_disparity(x1[best_inl], x2[best_inl])
    if float(np.median(disparity)) * f < min_disparity_px:
        return None
    # the linear fit over all inliers is poorly conditioned for a narrow target, so the best
    # minimal hypothesis seeds a nonlinear refinement instead
    candidates = []
    for R, t in decompose_essential(best_E):
        _, good = _cheirality(R, t, x1[best_inl], x2[best_inl], 0.0)
        candidates.append((int(good.sum()), R, t))
    candidates.sort(key=lambda c: -c[0])
    R, t = refine_relative_pose(candidates[0][1], candidates[0][2], x1[best_inl], x2[best_inl], threshold_px / f)
    inl = sampson_distance(_hat(t) @ R, x1, x2) < thr
    scored = []
    for Rc, tc in decompose_essential(_hat(t) @ R):
        X, good = _cheirality(Rc, tc, x1[inl], x2[inl], min_parallax_deg)
        scored.append((int(good.sum()), Rc, tc, X, good))
    scored.sort(key=lambda c: -c[0])
    best, second = scored[0], scored[1]
    if best[0] < min_points or second[0] > 0.7 * best[0]:
        return None
    idx = np.flatnonzero(inl)
    Xall = np.full((n, 3), np.nan)
    Xall[idx] = best[3]
    good = np.zeros(n, dtype=bool)
    good[idx] = best[4]
    return best[1], best[2], Xall, good
