"""Synthetic organ scenes: trajectories, challenge events, noisy feature streams and renders.

Frames: the organ mesh defines the organ frame; camera and organ move in a lab
frame.  The tracker estimates ``relative[t] = camera_lab[t] @ organ_lab[t]``,
which maps organ (mesh) coordinates to camera coordinates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.interpolate import CubicSpline

from . import raster
from .features import FrameObservations
from .geometry import Intrinsics, Pose, look_at, project_points, so3_exp
from .mesh import TriangleMesh, bumpy_ellipsoid, ellipsoid, grid_plane, icosphere, load_mesh, sample_surface
from .registration import Correspondence

EVENT_KINDS = ("fast_motion", "out_of_fov", "occlusion", "organ_motion")
DEFAULT_INTRINSICS = Intrinsics(1000.0, 1000.0, 640.0, 360.0, 1280, 720)


class ScenarioError(ValueError):
    pass


@dataclass
class Event:
    kind: str
    start: int
    duration: int
    factor: float = 3.0  # fast_motion: speed multiplier
    angle_deg: float = 60.0  # out_of_fov: yaw excursion
    rect: tuple = (0.0, 0.0, 1.0, 1.0)  # occlusion: normalized x0, y0, x1, y1
    rotation_deg: float = 20.0  # organ_motion
    axis: tuple = (0.0, 1.0, 0.0)
    translation: tuple = (0.2, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ScenarioError(f"unknown event kind {self.kind!r}")
        if self.duration <= 0 or self.start < 0:
            raise ScenarioError(f"{self.kind}: bad window start={self.start} duration={self.duration}")

    def active(self, t: int) -> bool:
        return self.start <= t < self.start + self.duration


@dataclass
class ScenarioSpec:
    name: str = "default"
    organ: str = "icosphere"  # icosphere | ellipsoid | bumpy_ellipsoid | mesh file path
    subdivisions: int = 5
    radius: float = 1.0
    axes: tuple = (1.0, 0.8, 0.6)
    bump_amplitude: float = 0.05
    n_organ_features: int = 300
    n_background: int = 200
    background_box: tuple = ((-5.0, -4.0, 1.5), (5.0, 4.0, 4.0))
    n_markers: int = 3
    # camera orbit around the organ (lab frame, organ initially at the origin)
    distance: tuple = (3.5, 4.5)
    azimuth_deg: float = 40.0
    elevation_deg: float = 20.0
    target_jitter: float = 0.15
    waypoint_every: int = 100
    static_frames: int = 0  # opening with a fixed camera center (rotation only)
    events: list = field(default_factory=list)
    noise_px: float = 1.0
    dropout: float = 0.0
    outlier_prob: float = 0.0
    fps: float = 30.0
    n_frames: int = 1000
    intrinsics: Intrinsics = DEFAULT_INTRINSICS
    seed: int = 0
    albedo: Optional[float] = None  # constant organ albedo for renders
    shading: bool = True
    n_correspondences: int = 20

    def __post_init__(self):
        self.events = [e if isinstance(e, Event) else Event(**e) for e in self.events]
        if isinstance(self.intrinsics, dict):
            self.intrinsics = Intrinsics(**self.intrinsics)
        for name in ("dropout", "outlier_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ScenarioError(f"{name}={v} outside [0, 1]")
        if not self.fps > 0:
            raise ScenarioError("fps must be positive")
        if self.n_frames <= 0:
            raise ScenarioError("n_frames must be positive")
        if self.noise_px < 0:
            raise ScenarioError("noise_px must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intrinsics"] = self.intrinsics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        for key in ("axes", "distance", "background_box"):
            if key in d and isinstance(d[key], list):
                d[key] = tuple(tuple(v) if isinstance(v, list) else v for v in d[key])
        return cls(**d)


@dataclass
class GroundTruth:
    camera_lab: list  # lab -> camera
    organ_lab: list  # organ -> lab
    relative: list  # organ -> camera, the tracker's target
    feature_ids: np.ndarray
    feature_points: np.ndarray  # organ frame for organ features, lab frame for background
    is_organ: np.ndarray
    markers: np.ndarray  # (3, 3) organ frame

    def points_of(self, ids) -> np.ndarray:
        lookup = {int(f): n for n, f in enumerate(self.feature_ids)}
        return self.feature_points[[lookup[int(i)] for i in ids]]

    def organ_of(self, ids) -> np.ndarray:
        lookup = {int(f): n for n, f in enumerate(self.feature_ids)}
        return np.array([self.is_organ[lookup[int(i)]] for i in ids], dtype=bool)


@dataclass
class Scenario:
    spec: ScenarioSpec
    mesh: TriangleMesh
    frames: list
    truth: GroundTruth
    t_init: Pose
    correspondences: list

    @property
    def k(self) -> Intrinsics:
        return self.spec.intrinsics


# ---------------------------------------------------------------------------
# builtin scenarios


def builtin_scenario(name: str, seed: int = 0, **overrides) -> ScenarioSpec:
    """Named scenarios: default, organ_motion, out_of_fov, occlusion, zero_parallax, texture."""
    if name == "default":
        spec = ScenarioSpec(
            name=name,
            seed=seed,
            events=[
                Event("fast_motion", 300, 30, factor=3.0),
                Event("occlusion", 520, 60, rect=(0.0, 0.0, 0.5, 1.0)),
                Event("occlusion", 760, 20),
            ],
        )
    elif name == "organ_motion":
        spec = ScenarioSpec(
            name=name,
            seed=seed,
            n_frames=300,
            # feature-rich surroundings, so a small per-frame budget is mostly spent off the organ
            n_background=600,
            events=[Event("organ_motion", 60, 150, rotation_deg=20.0, translation=(0.2, 0.0, 0.0))],
        )
    elif name == "out_of_fov":
        spec = ScenarioSpec(name=name, seed=seed, n_frames=300, events=[Event("out_of_fov", 100, 90, angle_deg=60.0)])
    elif name == "occlusion":
        spec = ScenarioSpec(name=name, seed=seed, n_frames=200, events=[Event("occlusion", 80, 30)])
    elif name == "zero_parallax":
        spec = ScenarioSpec(name=name, seed=seed, n_frames=200, static_frames=90)
    elif name == "texture":
        spec = ScenarioSpec(
            name=name, seed=seed, n_frames=150, subdivisions=4, albedo=180.0, shading=False, noise_px=0.5,
            azimuth_deg=80.0, elevation_deg=40.0, waypoint_every=50,
        )
    else:
        raise ScenarioError(f"unknown builtin scenario {name!r}")
    for key, val in overrides.items():
        setattr(spec, key, val)
    spec.__post_init__()
    return spec


def load_scenario_spec(path) -> ScenarioSpec:
    """Scenario from a TOML or JSON file; ``builtin = "name"`` starts from a builtin."""
    path = Path(path)
    if path.suffix == ".json":
        data = json.loads(path.read_text())
    else:
        from .config import load_toml

        data = load_toml(path)
        data = data.get("scenario", data)
    base = data.pop("builtin", None)
    if base is not None:
        seed = data.pop("seed", 0)
        return builtin_scenario(base, seed=seed, **data)
    return ScenarioSpec.from_dict(data)


# ---------------------------------------------------------------------------
# trajectories


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def build_mesh(spec: ScenarioSpec) -> TriangleMesh:
    if spec.organ == "icosphere":
        return icosphere(spec.subdivisions, spec.radius)
    if spec.organ == "ellipsoid":
        return ellipsoid(spec.axes, spec.subdivisions)
    if spec.organ == "bumpy_ellipsoid":
        return bumpy_ellipsoid(spec.axes, spec.subdivisions, spec.bump_amplitude, spec.seed)
    return load_mesh(spec.organ)


def _time_warp(spec: ScenarioSpec, t: np.ndarray) -> np.ndarray:
    s = t.astype(float).copy()
    for e in spec.events:
        if e.kind == "fast_motion":
            s += (e.factor - 1.0) * np.clip(t - e.start, 0, e.duration)
    return s


def camera_trajectory(spec: ScenarioSpec, rng: np.random.Generator) -> list[Pose]:
    n = spec.n_frames
    t = np.arange(n)
    s_target = _time_warp(spec, t)
    s_eye = np.maximum(s_target - spec.static_frames, 0.0)
    span = float(s_target.max()) + 2 * spec.waypoint_every
    knots = np.arange(0.0, span + spec.waypoint_every, spec.waypoint_every)
    m = len(knots)
    az = np.radians(rng.uniform(-spec.azimuth_deg, spec.azimuth_deg, m))
    el = np.radians(rng.uniform(-spec.elevation_deg, spec.elevation_deg, m))
    dist = rng.uniform(spec.distance[0], spec.distance[1], m)
    tgt = rng.uniform(-spec.target_jitter, spec.target_jitter, (m, 3))
    az[0] = el[0] = 0.0
    sa, se, sd, st = (CubicSpline(knots, v, bc_type="clamped") for v in (az, el, dist, tgt))
    a, e, d = sa(s_eye), se(s_eye), sd(s_eye)
    eyes = d[:, None] * np.stack([np.sin(a) * np.cos(e), np.sin(e), -np.cos(a) * np.cos(e)], axis=1)
    targets = st(s_target)
    poses = [look_at(eyes[i], targets[i]) for i in range(n)]
    # out-of-view excursions: yaw about the camera's own vertical axis
    for ev in spec.events:
        if ev.kind != "out_of_fov":
            continue
        ramp = max(1, ev.duration // 4)
        for i in range(ev.start, min(ev.start + ev.duration, n)):
            x = i - ev.start
            frac = _smoothstep(x / ramp) if x < ramp else _smoothstep((ev.duration - 1 - x) / ramp)
            yaw = Pose.from_rotvec([0.0, math.radians(ev.angle_deg) * float(frac), 0.0])
            poses[i] = yaw @ poses[i]
    return poses


def organ_trajectory(spec: ScenarioSpec, center: np.ndarray) -> list[Pose]:
    """Organ-to-lab poses; rigid ramps about the organ centroid, held after each event."""
    out = []
    motions = [e for e in spec.events if e.kind == "organ_motion"]
    for i in range(spec.n_frames):
        P = Pose.identity()
        for e in motions:
            f = float(_smoothstep((i - e.start) / e.duration))
            axis = np.asarray(e.axis, dtype=float)
            axis = axis / np.linalg.norm(axis)
            R = so3_exp(axis * math.radians(e.rotation_deg) * f)
            step = Pose.from_rt(R, center - R @ center + f * np.asarray(e.translation, dtype=float))
            P = step @ P
        out.append(P)
    return out


# ---------------------------------------------------------------------------
# generation


def _pick_markers(mesh: TriangleMesh, pose: Pose, k: Intrinsics, rng, count: int) -> np.ndarray:
    cand, _ = sample_surface(mesh, 2000, rng)
    cam = pose.apply(cand)
    uv, front = project_points(pose, k, cand)
    inside = front & k.contains(np.nan_to_num(uv, nan=-1.0))
    inside &= ~raster.points_occluded(pose.apply(mesh.vertices), mesh.faces, k, cam)
    # keep away from the image border and the silhouette
    c = np.array([k.cx, k.cy])
    rad = np.linalg.norm(np.nan_to_num(uv, nan=1e9) - c, axis=1)
    good = np.flatnonzero(inside)
    if len(good) < count:
        raise ScenarioError("not enough visible surface for markers at frame 0")
    good = good[np.argsort(rad[good])[: max(count, len(good) // 2)]]
    chosen = [good[0]]
    for _ in range(1, count):
        d = np.min(np.linalg.norm(uv[good][:, None] - uv[chosen][None], axis=2), axis=1)
        chosen.append(good[int(np.argmax(d))])
    return cand[chosen]


def generate_scenario(spec: ScenarioSpec) -> Scenario:
    rng = np.random.default_rng(spec.seed)
    mesh = build_mesh(spec)
    k = spec.intrinsics
    cams = camera_trajectory(spec, rng)
    organ = organ_trajectory(spec, mesh.centroid)
    rel = [c @ o for c, o in zip(cams, organ)]

    organ_pts, _ = sample_surface(mesh, spec.n_organ_features, rng)
    lo, hi = (np.asarray(v, dtype=float) for v in spec.background_box)
    bg_pts = rng.uniform(lo, hi, (spec.n_background, 3))
    n_all = spec.n_organ_features + spec.n_background
    ids = rng.permutation(n_all).astype(np.int64)
    points = np.vstack([organ_pts, bg_pts]).reshape(-1, 3)
    is_organ = np.arange(n_all) < spec.n_organ_features
    scores = rng.uniform(20.0, 100.0, n_all)
    markers = _pick_markers(mesh, rel[0], k, rng, spec.n_markers)
    truth = GroundTruth(cams, organ, rel, ids, points, is_organ, markers)

    frames = list(_observation_stream(spec, mesh, truth, scores, rng))

    # exact frame-0 correspondences from visible organ features
    vis0 = _visible(mesh, truth, k, 0)
    org = np.flatnonzero(vis0 & is_organ)
    pick = np.sort(rng.choice(org, size=min(spec.n_correspondences, len(org)), replace=False))
    uv0, _ = project_points(rel[0], k, points[pick])
    corrs = [Correspondence(tuple(points[j]), tuple(uv0[n]), int(ids[j])) for n, j in enumerate(pick)]
    return Scenario(spec, mesh, frames, truth, rel[0], corrs)


def _camera_points(truth: GroundTruth, t: int) -> np.ndarray:
    pts = truth.feature_points
    out = np.empty_like(pts)
    out[truth.is_organ] = truth.relative[t].apply(pts[truth.is_organ])
    out[~truth.is_organ] = truth.camera_lab[t].apply(pts[~truth.is_organ])
    return out


def true_pixels(truth: GroundTruth, k: Intrinsics, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free pixels of every feature at frame ``t`` and the in-front flag."""
    pc = _camera_points(truth, t)
    front = pc[:, 2] > 1e-9
    z = np.where(front, pc[:, 2], np.nan)
    uv = np.stack([k.fx * pc[:, 0] / z + k.cx, k.fy * pc[:, 1] / z + k.cy], axis=1)
    return uv, front


def _visible(mesh: TriangleMesh, truth: GroundTruth, k: Intrinsics, t: int) -> np.ndarray:
    pc = _camera_points(truth, t)
    uv, front = true_pixels(truth, k, t)
    inside = front & k.contains(np.nan_to_num(uv, nan=-1.0))
    occ = raster.points_occluded(truth.relative[t].apply(mesh.vertices), mesh.faces, k, pc)
    return inside & ~occ


def _observation_stream(spec, mesh, truth, scores, rng) -> Iterator[FrameObservations]:
    k = spec.intrinsics
    for t in range(spec.n_frames):
        uv, _ = true_pixels(truth, k, t)
        vis = _visible(mesh, truth, k, t)
        idx = np.flatnonzero(vis)
        px = uv[idx] + rng.normal(0.0, spec.noise_px, (len(idx), 2)) if spec.noise_px > 0 else uv[idx].copy()
        keep = rng.random(len(idx)) >= spec.dropout
        outl = rng.random(len(idx)) < spec.outlier_prob
        px[outl] = rng.uniform([0.0, 0.0], [k.width - 1.0, k.height - 1.0], (int(outl.sum()), 2))
        for e in spec.events:
            if e.kind == "occlusion" and e.active(t):
                x0, y0, x1, y1 = e.rect
                inr = (
                    (px[:, 0] >= x0 * k.width) & (px[:, 0] < x1 * k.width)
                    & (px[:, 1] >= y0 * k.height) & (px[:, 1] < y1 * k.height)
                )
                keep &= ~inr
        keep &= k.contains(px)
        sel = idx[keep]
        order = np.argsort(truth.feature_ids[sel], kind="stable")
        sel, px = sel[order], px[keep][order]
        yield FrameObservations(t, t / spec.fps, px, truth.feature_ids[sel], scores[sel], None, "simulator")


def silhouette_visible(mesh: TriangleMesh, truth: GroundTruth, k: Intrinsics, t: int) -> bool:
    """Whether any part of the organ silhouette is inside the image at frame ``t``."""
    return bool(raster.silhouette(truth.relative[t].apply(mesh.vertices), mesh.faces, k).any())


def marker_pixels(truth: GroundTruth, k: Intrinsics, t: int) -> np.ndarray:
    uv, front = project_points(truth.relative[t], k, truth.markers)
    uv[~(front & k.contains(np.nan_to_num(uv, nan=-1.0)))] = np.nan
    return uv


# ---------------------------------------------------------------------------
# rendering


def _background_plane(spec: ScenarioSpec) -> TriangleMesh:
    lo, hi = (np.asarray(v, dtype=float) for v in spec.background_box)
    depth = hi[2] + 1.0
    return grid_plane((0.0, 0.0, depth), (0.0, 0.0, -1.0), 40.0, 96)


def render_synthetic_images(spec: ScenarioSpec, truth: GroundTruth, mesh: Optional[TriangleMesh] = None,
                            frames=None) -> Iterator[np.ndarray]:
    """Lambertian renders of the organ (per-face albedo) over a speckled backdrop plane."""
    rng = np.random.default_rng(spec.seed + 7919)
    mesh = mesh if mesh is not None else build_mesh(spec)
    k = spec.intrinsics
    plane = _background_plane(spec)
    nf = len(mesh.faces)
    if spec.albedo is not None:
        organ_alb = np.full((nf, 3), float(spec.albedo))
    else:
        base = np.array([190.0, 110.0, 100.0])
        organ_alb = np.clip(base * rng.uniform(0.45, 1.25, (nf, 1)) + rng.normal(0, 12, (nf, 3)), 0, 255)
    plane_alb = np.repeat(rng.uniform(30.0, 220.0, (len(plane.faces), 1)), 3, axis=1)
    faces = np.vstack([mesh.faces, plane.faces + len(mesh.vertices)])
    albedo = np.vstack([organ_alb, plane_alb])
    normals_obj = np.vstack([mesh.face_normals, plane.face_normals])
    light = np.array([0.3, -0.4, 1.0])
    light /= np.linalg.norm(light)
    for t in range(spec.n_frames) if frames is None else frames:
        rel, cam = truth.relative[t], truth.camera_lab[t]
        verts = np.vstack([rel.apply(mesh.vertices), cam.apply(plane.vertices)])
        _, fbuf = raster.zbuffer(verts, faces, k)
        img = np.zeros((k.height, k.width, 3))
        hit = fbuf >= 0
        f = fbuf[hit]
        if spec.shading:
            n_cam = np.vstack([normals_obj[:nf] @ rel.rotation.T, normals_obj[nf:] @ cam.rotation.T])
            lam = 0.35 + 0.65 * np.clip(-(n_cam @ light), 0.0, 1.0)
            img[hit] = albedo[f] * lam[f, None]
        else:
            img[hit] = albedo[f]
        yield np.clip(np.rint(img), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# files


def write_observation_log(path, frames: list, k: Intrinsics, fps: float) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# priortrack observation log v1\n")
        fh.write(f"# intrinsics {float(k.fx)!r} {float(k.fy)!r} {float(k.cx)!r} {float(k.cy)!r} {k.width} {k.height}\n")
        fh.write(f"# frames {len(frames)} fps {float(fps)!r}\n")
        w = csv.writer(fh)
        w.writerow(["frame_id", "feature_id", "u", "v", "score"])
        for fr in frames:
            for fid, (u, v), s in zip(fr.feature_ids, fr.pixels, fr.scores):
                w.writerow([fr.frame_id, int(fid), repr(float(u)), repr(float(v)), repr(float(s))])


def read_observation_log(path) -> tuple[list, Intrinsics, float]:
    """Inverse of :func:`write_observation_log`; the score column is optional."""
    k = None
    n_frames = None
    fps = 30.0
    rows: dict[int, list] = {}
    with open(path, newline="") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts and parts[0] == "intrinsics":
                    v = [float(x) for x in parts[1:7]]
                    k = Intrinsics(v[0], v[1], v[2], v[3], int(v[4]), int(v[5]))
                elif parts and parts[0] == "frames":
                    n_frames = int(parts[1])
                    if len(parts) >= 4 and parts[2] == "fps":
                        fps = float(parts[3])
                continue
            if line.startswith("frame_id"):
                continue
            vals = line.split(",")
            if len(vals) < 4:
                raise ValueError(f"{path}:{line_no}: expected frame_id,feature_id,u,v")
            fr, fid = int(vals[0]), int(vals[1])
            score = float(vals[4]) if len(vals) > 4 else 0.0
            rows.setdefault(fr, []).append((fid, float(vals[2]), float(vals[3]), score))
    if k is None:
        raise ValueError(f"{path}: missing intrinsics header")
    n = n_frames if n_frames is not None else (max(rows) + 1 if rows else 0)
    frames = []
    for t in range(n):
        r = rows.get(t, [])
        arr = np.array([x[1:] for x in r], dtype=float).reshape(-1, 3)
        ids = np.array([x[0] for x in r], dtype=np.int64)
        frames.append(FrameObservations(t, t / fps, arr[:, :2], ids, arr[:, 2], None, "simulator"))
    return frames, k, fps


def write_ground_truth(path, truth: GroundTruth, k: Intrinsics) -> None:
    cols = ["frame_id"]
    for prefix in ("rel", "cam", "organ"):
        cols += [f"{prefix}_{i}" for i in range(12)]
    for m in range(len(truth.markers)):
        cols += [f"marker{m}_u", f"marker{m}_v"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for t in range(len(truth.relative)):
            row = [t]
            for P in (truth.relative[t], truth.camera_lab[t], truth.organ_lab[t]):
                row += [repr(float(v)) for v in P.row_major_3x4()]
            row += [repr(float(v)) for v in marker_pixels(truth, k, t).ravel()]
            w.writerow(row)


def write_truth_points(path, truth: GroundTruth) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "id", "x", "y", "z"])
        for n, m in enumerate(truth.markers):
            w.writerow(["marker", n, *(repr(float(v)) for v in m)])
        for fid, p, org in zip(truth.feature_ids, truth.feature_points, truth.is_organ):
            w.writerow(["organ" if org else "background", int(fid), *(repr(float(v)) for v in p)])


def _pose_from_row(vals) -> Pose:
    M = np.eye(4)
    M[:3] = np.asarray(vals, dtype=float).reshape(3, 4)
    return Pose.from_matrix(M)


def read_ground_truth(gt_path, points_path) -> GroundTruth:
    rel, cam, org = [], [], []
    with open(gt_path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            v = [float(x) for x in row[1:37]]
            rel.append(_pose_from_row(v[0:12]))
            cam.append(_pose_from_row(v[12:24]))
            org.append(_pose_from_row(v[24:36]))
    markers, ids, pts, is_org = [], [], [], []
    with open(points_path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            p = [float(x) for x in row[2:5]]
            if row[0] == "marker":
                markers.append(p)
            else:
                ids.append(int(row[1]))
                pts.append(p)
                is_org.append(row[0] == "organ")
    return GroundTruth(cam, org, rel, np.array(ids, dtype=np.int64), np.array(pts).reshape(-1, 3),
                       np.array(is_org, dtype=bool), np.array(markers).reshape(-1, 3))


def save_scenario(scn: Scenario, out_dir, images: bool = False) -> Path:
    """Write the observation log, ground truth, T_init, correspondences and mesh to ``out_dir``."""
    from .mesh import save_obj
    from .registration import write_correspondences, write_pose_file

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_observation_log(out / "observations.csv", scn.frames, scn.k, scn.spec.fps)
    write_ground_truth(out / "ground_truth.csv", scn.truth, scn.k)
    write_truth_points(out / "gt_points.csv", scn.truth)
    write_pose_file(out / "t_init.txt", scn.t_init)
    write_correspondences(
        out / "correspondences.csv",
        np.array([c.point3 for c in scn.correspondences]),
        np.array([c.pixel for c in scn.correspondences]),
    )
    save_obj(scn.mesh, out / "organ.obj")
    (out / "scenario.json").write_text(json.dumps(scn.spec.to_dict(), indent=2, sort_keys=True))
    if images:
        from .features import write_image

        img_dir = out / "images"
        img_dir.mkdir(exist_ok=True)
        for t, img in enumerate(render_synthetic_images(scn.spec, scn.truth, scn.mesh)):
            write_image(img_dir / f"frame_{t:05d}.png", img)
    return out
