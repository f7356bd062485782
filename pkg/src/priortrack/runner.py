"""End-to-end runs: input preparation, the tracking loop, metrics and on-disk artifacts."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .config import ConfigError, RunConfig
from .features import FrameObservations, ImageFrontend, image_sequence
from .geometry import Intrinsics, Pose
from .mesh import TriangleMesh, load_mesh, save_ply
from .metrics import (
    EmptyOverlap,
    MarkerNotVisible,
    MetricsReport,
    compute_traj_error,
    compute_tre,
    markers_visible,
    percentiles,
    sample_tre_frames,
)
from .pipeline import FrameResult, Toggles, Tracker, TrackingState
from .registration import read_correspondences, read_pose_file, solve_initial_registration
from .simulator import (
    GroundTruth,
    builtin_scenario,
    generate_scenario,
    load_scenario_spec,
    read_ground_truth,
    read_observation_log,
    render_synthetic_images,
)

log = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = [
    "frame_id", "state",
    "r00", "r01", "r02", "t0", "r10", "r11", "r12", "t1", "r20", "r21", "r22", "t2",
    "inlier_count", "ms",
]


@dataclass
class RunInput:
    frames: Iterable[FrameObservations]
    mesh: TriangleMesh
    k: Intrinsics
    t_init: Pose
    fps: float
    truth: Optional[GroundTruth] = None
    source: str = ""
    n_frames: Optional[int] = None


@dataclass
class RunOutput:
    report: MetricsReport
    results: list
    tracker: Tracker
    paths: dict = field(default_factory=dict)
    config_hash: str = ""


def _t_init_from(cfg: RunConfig, k: Intrinsics) -> Pose:
    inp = cfg.input
    if inp.t_init:
        return read_pose_file(inp.t_init)
    reg = solve_initial_registration(read_correspondences(inp.correspondences), k)
    log.info("registered T_init from %s (rms %.3f px)", inp.correspondences, reg.rms_px)
    return reg.pose


def _attach_images(frames, images) -> Iterator[FrameObservations]:
    for fr, img in zip(frames, images):
        yield dataclasses.replace(fr, image=img)


def _detector_frames(images, fps: float, budget: int) -> Iterator[FrameObservations]:
    front = ImageFrontend(budget=budget)
    for t, img in images:
        yield front.observe(t, t / fps, img)


def prepare_input(cfg: RunConfig) -> RunInput:
    inp = cfg.input
    src = inp.source()
    if src == "scenario":
        if inp.scenario:
            spec = builtin_scenario(inp.scenario, seed=cfg.seed, **inp.overrides)
        else:
            spec = load_scenario_spec(inp.scenario_file)
            for key, val in inp.overrides.items():
                setattr(spec, key, val)
            spec.seed = cfg.seed
            spec.__post_init__()
        scn = generate_scenario(spec)
        frames: Iterable = scn.frames
        if inp.frontend == "detector":
            imgs = render_synthetic_images(spec, scn.truth, scn.mesh)
            frames = _detector_frames(enumerate(imgs), spec.fps, cfg.tracking.budget)
        elif inp.render_images:
            frames = _attach_images(scn.frames, render_synthetic_images(spec, scn.truth, scn.mesh))
        return RunInput(frames, scn.mesh, scn.k, scn.t_init, spec.fps, scn.truth, f"scenario:{spec.name}", spec.n_frames)
    mesh = load_mesh(inp.mesh)
    truth = None
    if inp.ground_truth:
        if not inp.gt_points:
            raise ConfigError("input.ground_truth needs input.gt_points")
        truth = read_ground_truth(inp.ground_truth, inp.gt_points)
    if src == "observations":
        frames, k, fps = read_observation_log(inp.observations)
        if inp.images:
            frames = list(_attach_images(frames, (img for _, img in image_sequence(inp.images))))
        return RunInput(frames, mesh, k, _t_init_from(cfg, k), fps, truth, "observations", len(frames))
    k = Intrinsics(**inp.intrinsics)
    frames = _detector_frames(image_sequence(inp.images), inp.fps, cfg.tracking.budget)
    return RunInput(frames, mesh, k, _t_init_from(cfg, k), inp.fps, truth, "images")


# ---------------------------------------------------------------------------
# metrics


def organ_diameter(mesh: TriangleMesh) -> float:
    return 2.0 * float(np.max(np.linalg.norm(mesh.vertices - mesh.centroid, axis=1)))


def map_scale_ratio(tracker: Tracker, truth: GroundTruth) -> Optional[float]:
    """RMS distance of organ map points to the organ centroid, estimated over true."""
    if tracker.map is None:
        return None
    index = {int(f): n for n, f in enumerate(truth.feature_ids)}
    est, ref = [], []
    for mp in tracker.map.points.values():
        n = index.get(mp.feature_id)
        if n is None or not truth.is_organ[n]:
            continue
        est.append(mp.position)
        ref.append(truth.feature_points[n])
    if len(est) < 3:
        return None
    c = tracker.mesh.centroid
    est, ref = np.asarray(est), np.asarray(ref)
    return float(np.sqrt(np.mean(np.sum((est - c) ** 2, axis=1))) / np.sqrt(np.mean(np.sum((ref - c) ** 2, axis=1))))


def compute_metrics(cfg: RunConfig, run_in: RunInput, results: list, tracker: Tracker, loop_s: float) -> MetricsReport:
    n = len(results)
    lost = sum(r.state != TrackingState.TRACKING for r in results)
    extra = {
        "init_success": tracker.init_frame is not None,
        "init_frame": tracker.init_frame,
        "init_attempts": tracker.init_attempts,
        "keyframes": len(tracker.map.keyframes) if tracker.map else 0,
        "map_points": len(tracker.map) if tracker.map else 0,
        "transitions": [list(t) for t in tracker.transitions],
        "lost_fraction_per_sequence": [lost / n if n else 0.0],
    }
    tre, traj = {}, {}
    truth = run_in.truth
    if truth is not None and n:
        tracked = [r for r in results if r.pose is not None]
        cand = [r.frame_id for r in tracked if markers_visible(truth.markers, truth.relative[r.frame_id], run_in.k)]
        picked = sample_tre_frames(cand, cfg.tre_frames, cfg.seed)
        by_id = {r.frame_id: r for r in tracked}
        vals = []
        for f in picked:
            try:
                vals.append(compute_tre(truth.markers, by_id[f].pose, truth.relative[f], run_in.k))
            except MarkerNotVisible:
                continue
        if vals:
            tre = {"mean": float(np.mean(vals)), "median": float(np.median(vals)), "max": float(np.max(vals)),
                   "frames": picked}
        est = [r.pose for r in results]
        gt = [truth.relative[r.frame_id] for r in results]
        try:
            tr_rmse, rot_rmse = compute_traj_error(est, gt)
            diam = organ_diameter(run_in.mesh)
            traj = {"translation": tr_rmse, "rotation_deg": float(np.degrees(rot_rmse)),
                    "translation_rel_diameter": tr_rmse / diam, "excluded_frames": lost}
        except EmptyOverlap:
            traj = {"excluded_frames": lost}
        ratio = map_scale_ratio(tracker, truth)
        if ratio is not None:
            extra["map_scale_ratio"] = ratio
            extra["map_scale_error"] = abs(ratio - 1.0)
    stages: dict = {}
    for r in results:
        for key, ms in r.timing.items():
            stages.setdefault(key, []).append(ms)
    timing = {key: percentiles(v) for key, v in sorted(stages.items())}
    if tracker.mapping_ms:
        timing["mapping_worker"] = percentiles(tracker.mapping_ms)
    return MetricsReport(tre, traj, lost / n if n else 0.0, lost, n, n / loop_s if loop_s > 0 else 0.0, timing, extra)


# ---------------------------------------------------------------------------
# artifacts


def _fmt(x: float) -> str:
    return repr(float(x))


def write_trajectory(path, results: list, deterministic: bool) -> None:
    """Per-frame CSV; in deterministic mode the wall-clock column is left empty."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(TRAJECTORY_COLUMNS) + "\n")
        for r in results:
            pose = [_fmt(v) for v in r.pose.row_major_3x4()] if r.pose is not None else [""] * 12
            ms = "" if deterministic else f"{r.timing.get('total', 0.0):.3f}"
            fh.write(",".join([str(r.frame_id), r.state.value, *pose, str(r.inlier_count), ms]) + "\n")


def read_trajectory(path) -> list[tuple[int, str, Optional[Pose], int]]:
    out = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["frame_id", "state"]:
            raise ValueError(f"{path}: not a trajectory CSV")
        for line in fh:
            v = line.rstrip("\n").split(",")
            pose = Pose.from_matrix(np.array([float(x) for x in v[2:14]]).reshape(3, 4)) if v[2] else None
            out.append((int(v[0]), v[1], pose, int(v[14])))
    return out


def write_timing(path, results: list) -> None:
    keys = sorted({k for r in results for k in r.timing})
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["frame_id", *keys]) + "\n")
        for r in results:
            fh.write(",".join([str(r.frame_id)] + [f"{r.timing[k]:.3f}" if k in r.timing else "" for k in keys]) + "\n")


def report_dict(cfg: RunConfig, report: MetricsReport, source: str) -> dict:
    return {
        "config_hash": cfg.config_hash(),
        "toggles": cfg.toggles.as_dict(),
        "metrics": report.metrics_dict(),
        "timing": report.timing_dict(),
        "meta": {"source": source, "seed": cfg.seed, "deterministic": cfg.deterministic},
    }


def write_json(path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# entry points


def track(cfg: RunConfig, run_in: Optional[RunInput] = None, global_ba_at_end: Optional[bool] = None) -> tuple:
    """The tracking loop alone; returns (run input, results, tracker, loop seconds)."""
    run_in = run_in or prepare_input(cfg)
    tcfg = cfg.tracking
    if global_ba_at_end is not None:
        tcfg = dataclasses.replace(tcfg, global_ba_at_end=global_ba_at_end)
    tracker = Tracker(run_in.mesh, run_in.k, tcfg, cfg.optimizer, cfg.toggles, run_in.t_init,
                      parallel=not cfg.deterministic, seed=cfg.seed)
    results: list[FrameResult] = []
    loop_s = 0.0
    for frame in run_in.frames:
        t0 = time.perf_counter()
        results.append(tracker.process_frame(frame))
        loop_s += time.perf_counter() - t0
    t0 = time.perf_counter()
    tracker.finish()
    tracker.finish_ms = (time.perf_counter() - t0) * 1e3
    return run_in, results, tracker, loop_s


def run(cfg: RunConfig, out_dir=None, write: bool = True) -> RunOutput:
    """Full pipeline honoring the toggles; writes trajectory, textured mesh and report."""
    cfg.validate()
    run_in, results, tracker, loop_s = track(cfg)
    report = compute_metrics(cfg, run_in, results, tracker, loop_s)
    report.timing["finish_ms"] = tracker.finish_ms
    out = RunOutput(report, results, tracker, config_hash=cfg.config_hash())
    if write:
        d = Path(out_dir or cfg.out)
        d.mkdir(parents=True, exist_ok=True)
        out.paths = {
            "trajectory": d / "trajectory.csv",
            "timing": d / "timing.csv",
            "textured": d / "textured.ply",
            "report": d / "report.json",
        }
        write_trajectory(out.paths["trajectory"], results, cfg.deterministic)
        write_timing(out.paths["timing"], results)
        save_ply(tracker.textured, out.paths["textured"], with_weights=True)
        write_json(out.paths["report"], report_dict(cfg, report, run_in.source))
    return out


def ablate(cfg: RunConfig, toggle: str, ablated_value: bool = False, out_dir=None, seeds=None, write: bool = True) -> dict:
    """Paired runs differing in exactly one toggle, optionally repeated over several seeds."""
    base = cfg.with_toggle(toggle, not ablated_value)
    abl = cfg.with_toggle(toggle, ablated_value)
    diff = [n for n in Toggles.NAMES if getattr(base.toggles, n) != getattr(abl.toggles, n)]
    assert diff == [toggle], f"ablation must change exactly one toggle, changed {diff}"
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    d = Path(out_dir or cfg.out)
    per_seed = []
    for s in seeds:
        row = {"seed": s}
        for label, c in (("baseline", base), ("ablated", abl)):
            c = dataclasses.replace(c, seed=s)
            sub = d / f"seed{s}" / label if len(seeds) > 1 else d / label
            res = run(c, sub, write)
            row[label] = res.report.metrics_dict()
            row[f"{label}_timing"] = res.report.timing_dict()
        row["lost_fraction_delta"] = row["ablated"]["lost_fraction"] - row["baseline"]["lost_fraction"]
        per_seed.append(row)
    summary = {
        "config_hash": cfg.config_hash(),
        "changed_toggle": toggle,
        "toggles": {"baseline": base.toggles.as_dict(), "ablated": abl.toggles.as_dict()},
        "metrics": {
            "per_seed": [{k: v for k, v in r.items() if not k.endswith("_timing")} for r in per_seed],
            "ablated_more_lost": sum(r["ablated"]["lost_fraction"] > r["baseline"]["lost_fraction"] for r in per_seed),
            "seeds": len(per_seed),
        },
        "timing": {str(r["seed"]): {"baseline": r["baseline_timing"], "ablated": r["ablated_timing"]} for r in per_seed},
    }
    if write:
        d.mkdir(parents=True, exist_ok=True)
        write_json(d / "ablation.json", summary)
    return summary


# ---------------------------------------------------------------------------
# scale-drift experiment for the shape prior


def scale_drift_problem(scn, drift: float = 0.01, n_keyframes: int = 10, stride: int = 100, noise_px: float = 1.0,
                        seed: int = 0, surface=None):
    """Global BA problem built from ground truth, then uniformly rescaled by ``1 + drift``.

    The scaling is about the camera center of the fixed first keyframe, which leaves every
    reprojection unchanged: only the shape prior can tell the drifted map from the true one.
    Returns (problem, true_points).
    """
    from .mesh import build_surface_index
    from .optimizer import BaProblem
    from .simulator import _visible

    truth, k = scn.truth, scn.k
    rng = np.random.default_rng(seed)
    frames = [i * stride for i in range(n_keyframes) if i * stride < len(truth.relative)]
    organ = np.flatnonzero(truth.is_organ)
    seen = [_visible(scn.mesh, truth, k, f)[organ] for f in frames]
    keep = np.sum(seen, axis=0) >= 2
    pts = truth.feature_points[organ[keep]]
    edge_pose, edge_point, edge_pixel = [], [], []
    for j, (f, vis) in enumerate(zip(frames, seen)):
        sel = np.flatnonzero(vis[keep])
        uv = truth.relative[f].apply(pts[sel])
        uv = np.stack([k.fx * uv[:, 0] / uv[:, 2] + k.cx, k.fy * uv[:, 1] / uv[:, 2] + k.cy], axis=1)
        edge_pose += [j] * len(sel)
        edge_point += list(sel)
        edge_pixel.append(uv + rng.normal(0.0, noise_px, uv.shape))
    s = 1.0 + drift
    c0 = truth.relative[frames[0]].inverse().translation
    poses = []
    for f in frames:
        p = truth.relative[f]
        # same rotation, camera center pushed away from c0: R (s (X - c0) + c0) + t' == s (R X + t)
        poses.append(Pose(p.quat, s * p.translation + (s - 1.0) * (p.rotation @ c0)))
    problem = BaProblem(
        k=k,
        poses=poses,
        fixed=np.arange(len(frames)) == 0,
        points=c0 + s * (pts - c0),
        edge_pose=np.array(edge_pose),
        edge_point=np.array(edge_point),
        edge_pixel=np.concatenate(edge_pixel),
        shape_points=np.arange(len(pts)),
        surface=surface if surface is not None else build_surface_index(scn.mesh),
        bbox_diagonal=scn.mesh.bbox_diagonal,
    )
    return problem, pts


def scale_error(points: np.ndarray, true_points: np.ndarray) -> float:
    """|s - 1| for the least-squares scale s mapping centred true points onto centred estimates.

    Unlike a ratio of RMS spreads this is not inflated by per-point noise. Both clouds live in
    the same gauge (first pose held fixed), so no rotation is fitted.
    """
    a = points - points.mean(0)
    b = true_points - true_points.mean(0)
    return abs(float(np.sum(a * b) / np.sum(b * b)) - 1.0)
