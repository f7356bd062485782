import math

import numpy as np
import pytest

from priortrack.geometry import Intrinsics, Pose, look_at, rotation_error
from priortrack.mesh import build_surface_index, icosphere, sample_surface
from priortrack.optimizer import (
    BaProblem,
    OptimizerConfig,
    RobustKernel,
    TooFewObservations,
    ba_cost,
    bundle_adjust,
    local_bundle_adjust,
    optimize_pose,
    project_with_jacobians,
    reprojection_residuals,
    robust_cost,
    shape_residuals,
)
from priortrack.slam_map import SlamMap

from .oracles import HUBER_D3_R5, dense_ba, huber, rodrigues

K = Intrinsics(800.0, 800.0, 320.0, 240.0, 640, 480)
KT = (K.fx, K.fy, K.cx, K.cy)


def _cameras(n, radius=4.0, spread_deg=30.0):
    out = []
    for a in np.linspace(-spread_deg, spread_deg, n):
        th = math.radians(a)
        out.append(look_at([radius * math.sin(th), 0.3 * math.sin(2 * th), -radius * math.cos(th)], [0, 0, 0]))
    return out


def _sphere_points(n, rng):
    pts, _ = sample_surface(icosphere(3), n, rng)
    return pts


def _observations(poses, pts, noise=0.0, rng=None):
    ei, ej, eq = [], [], []
    for i, p in enumerate(poses):
        cam = p.apply(pts)
        # keep the near hemisphere only so every edge is physically visible
        vis = np.sum((pts - p.center()) * pts, axis=1) < 0
        uv = np.stack([K.fx * cam[:, 0] / cam[:, 2] + K.cx, K.fy * cam[:, 1] / cam[:, 2] + K.cy], axis=1)
        for j in np.flatnonzero(vis):
            q = uv[j] + (rng.normal(0, noise, 2) if noise else 0.0)
            ei.append(i)
            ej.append(j)
            eq.append(q)
    return np.array(ei), np.array(ej), np.array(eq)


# --- kernels -------------------------------------------------------------------


def test_huber_examples():
    h = RobustKernel("huber", 3.0)
    assert robust_cost(0.0, h) == 0.0
    assert robust_cost(3.0, h) == 9.0
    assert robust_cost(5.0, h) == HUBER_D3_R5
    assert robust_cost(5.0, RobustKernel("none")) == 25.0


def test_huber_matches_oracle():
    h = RobustKernel("huber", 2.5)
    for r in np.linspace(0, 10, 41):
        assert robust_cost(r, h) == pytest.approx(huber(r, 2.5))


def test_kernel_validation():
    with pytest.raises(ValueError):
        RobustKernel("huber", 0.0)
    with pytest.raises(ValueError):
        RobustKernel("tukey", 1.0)
    with pytest.raises(ValueError):
        robust_cost(-1.0, RobustKernel())
    with pytest.raises(ValueError):
        OptimizerConfig(w_shape=-1)


# --- Jacobians -----------------------------------------------------------------


def test_reprojection_jacobians_match_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(100):
        R = rodrigues(rng.normal(0, 1, 3))
        t = np.array([*rng.normal(0, 0.3, 2), rng.uniform(3, 6)])
        X = rng.normal(0, 0.5, (1, 3))
        uv, Jp, Jx, _ = project_with_jacobians(R, t, X, K)

        def f(dpose=np.zeros(6), dx=np.zeros(3)):
            dR = rodrigues(dpose[:3])
            return project_with_jacobians(dR @ R, dR @ t + dpose[3:], X + dx, K)[0][0]

        num_p = np.stack([(f(dpose=h * e) - f(dpose=-h * e)) / (2 * h) for e in np.eye(6)], axis=1)
        num_x = np.stack([(f(dx=h * e) - f(dx=-h * e)) / (2 * h) for e in np.eye(3)], axis=1)
        assert np.linalg.norm(num_p - Jp[0]) <= 1e-4 * np.linalg.norm(Jp[0])
        assert np.linalg.norm(num_x - Jx[0]) <= 1e-4 * np.linalg.norm(Jx[0])


def test_shape_jacobian_matches_finite_differences():
    rng = np.random.default_rng(1)
    idx = build_surface_index(icosphere(3), density=2000)
    h = 1e-6
    for _ in range(100):
        f = rng.normal(0, 1, 3)
        anchor, _ = idx.closest_points(f[None])
        _, J = shape_residuals(f, anchor)
        num = np.stack(
            [(shape_residuals(f + h * e, anchor)[0][0] - shape_residuals(f - h * e, anchor)[0][0]) / (2 * h) for e in np.eye(3)],
            axis=1,
        )
        assert np.linalg.norm(num - J[0]) <= 1e-4 * np.linalg.norm(J[0])


# --- motion-only ----------------------------------------------------------------


def _pose_problem(rng, n=80):
    truth = Pose.from_rotvec([0.1, -0.2, 0.05], [0.1, 0.0, 4.0])
    pts = rng.uniform(-1, 1, (n, 3))
    cam = truth.apply(pts)
    uv = np.stack([K.fx * cam[:, 0] / cam[:, 2] + K.cx, K.fy * cam[:, 1] / cam[:, 2] + K.cy], axis=1)
    return truth, pts, uv


def _perturb(p: Pose, rng, deg=2.0, depth_frac=0.02):
    axis = rng.normal(0, 1, 3)
    axis /= np.linalg.norm(axis)
    d = Pose.from_rotvec(axis * math.radians(deg), [0, 0, depth_frac * p.translation[2]])
    return d @ p


def test_optimize_pose_recovers_truth():
    rng = np.random.default_rng(2)
    truth, pts, uv = _pose_problem(rng)
    obs = [(j, uv[j]) for j in range(len(pts))]
    pose, inl = optimize_pose(pts, obs, _perturb(truth, rng), OptimizerConfig(), K)
    assert inl.all()
    assert rotation_error(pose, truth) < 1e-6
    assert np.linalg.norm(pose.translation - truth.translation) < 1e-6


def test_optimize_pose_flags_gross_outliers():
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        truth, pts, uv = _pose_problem(rng, 100)
        bad = rng.choice(len(pts), 20, replace=False)
        uv = uv.copy()
        uv[bad] = rng.uniform([0, 0], [K.width, K.height], (20, 2))
        # a "gross" outlier is one that lands well outside the gate; a few random pixels fall near the truth
        true_uv = _pose_problem(np.random.default_rng(100 + seed), 100)[2]
        gross = bad[np.linalg.norm(uv[bad] - true_uv[bad], axis=1) > 20]
        pose, inl = optimize_pose(pts, (np.arange(len(pts)), uv), _perturb(truth, rng), OptimizerConfig(), K)
        assert math.degrees(rotation_error(pose, truth)) < 0.2
        assert not inl[gross].any()


def test_optimize_pose_needs_six():
    rng = np.random.default_rng(3)
    truth, pts, uv = _pose_problem(rng, 5)
    with pytest.raises(TooFewObservations):
        optimize_pose(pts, [(j, uv[j]) for j in range(5)], truth, OptimizerConfig(), K)


# --- bundle adjustment ------------------------------------------------------------


def _ba(n_cams=3, n_pts=60, noise=0.0, seed=0, point_noise=0.0, surface=None):
    rng = np.random.default_rng(seed)
    poses = _cameras(n_cams)
    pts = _sphere_points(n_pts, rng)
    ei, ej, eq = _observations(poses, pts, noise, rng)
    start = pts + rng.normal(0, point_noise, pts.shape) if point_noise else pts.copy()
    fixed = np.zeros(n_cams, bool)
    fixed[0] = True
    shape = np.arange(n_pts) if surface is not None else np.zeros(0, np.int64)
    prob = BaProblem(K, poses, fixed, start, ei, ej, eq, shape, surface, 2 * math.sqrt(3))
    return prob, pts


def test_ba_stationary_at_truth():
    prob, pts = _ba()
    res = bundle_adjust(prob, OptimizerConfig(w_shape=0))
    assert res.final_cost < 1e-16
    assert np.allclose(res.points, pts, atol=1e-9)
    for a, b in zip(res.poses, prob.poses):
        assert np.allclose(a.matrix(), b.matrix(), atol=1e-9)


def test_ba_matches_dense_oracle():
    rng = np.random.default_rng(4)
    poses = _cameras(2, spread_deg=15)
    pts = _sphere_points(12, rng)
    ei, ej, eq = _observations(poses, pts, 1.0, rng)
    start = pts + rng.normal(0, 0.01, pts.shape)
    # start the free pose off the truth as well
    p1 = Pose.from_rotvec([0.01, -0.01, 0.005], [0.01, 0.0, -0.02]) @ poses[1]
    cfg = OptimizerConfig(w_shape=0, robust=False, max_iterations=200, tolerance=1e-15)
    prob = BaProblem(K, [poses[0], p1], [True, False], start, ei, ej, eq)
    res = bundle_adjust(prob, cfg)
    edges = [(int(i), int(j), q) for i, j, q in zip(ei, ej, eq)]
    ref = dense_ba([(p.rotation, p.translation) for p in prob.poses], [True, False], start, edges, KT)
    assert res.final_cost == pytest.approx(ref, rel=1e-8)


def test_ba_cost_monotone_and_gauge_fixed():
    surface = build_surface_index(icosphere(3), density=3000)
    prob, _ = _ba(n_cams=4, noise=1.0, point_noise=0.02, seed=5, surface=surface)
    prob.poses[2] = _perturb(prob.poses[2], np.random.default_rng(6), deg=1.0)
    fixed_before = prob.poses[0].matrix().copy()
    res = bundle_adjust(prob, OptimizerConfig())
    h = res.cost_history
    assert all(b <= a for a, b in zip(h, h[1:]))
    assert res.final_cost <= res.initial_cost
    assert np.array_equal(res.poses[0].matrix(), fixed_before)
    assert res.poses[0] is prob.poses[0] or np.array_equal(res.poses[0].quat, prob.poses[0].quat)


def test_ba_without_shape_edges_equals_w0():
    surface = build_surface_index(icosphere(3), density=3000)
    with_edges, _ = _ba(noise=1.0, point_noise=0.01, seed=7, surface=surface)
    without, _ = _ba(noise=1.0, point_noise=0.01, seed=7)
    a = bundle_adjust(with_edges, OptimizerConfig(w_shape=0))
    b = bundle_adjust(without, OptimizerConfig(w_shape=0))
    assert np.array_equal(a.points, b.points) and a.final_cost == b.final_cost


def test_shape_prior_pulls_points_to_surface():
    surface = build_surface_index(icosphere(4), density=20000)
    for seed in range(10):
        dist = {}
        for w in (0.0, 100.0):
            prob, _ = _ba(n_cams=2, n_pts=80, noise=1.0, point_noise=0.01 * 2, seed=seed, surface=surface)
            res = bundle_adjust(prob, OptimizerConfig(w_shape=w))
            dist[w] = float(np.mean(np.abs(np.linalg.norm(res.points, axis=1) - 1.0)))
        assert dist[100.0] < 0.5 * dist[0.0], (seed, dist)


def test_problem_text_roundtrip():
    prob, _ = _ba(noise=0.5, seed=8)
    back = BaProblem.from_text(prob.to_text())
    assert np.array_equal(back.points, prob.points)
    assert np.array_equal(back.edge_pixel, prob.edge_pixel)
    assert np.array_equal(back.fixed, prob.fixed)
    cfg = OptimizerConfig(w_shape=0)
    assert ba_cost(back, back.poses, back.points, cfg) == ba_cost(prob, prob.poses, prob.points, cfg)


def test_problem_requires_gauge():
    with pytest.raises(ValueError):
        BaProblem(K, [Pose.identity()], [False], np.zeros((1, 3)), [0], [0], [[0, 0]])


def test_reprojection_residuals_zero_at_truth():
    prob, pts = _ba()
    e, z = reprojection_residuals(prob.poses, pts, prob.edge_pose, prob.edge_point, prob.edge_pixel, K)
    assert np.abs(e).max() < 1e-9 and (z > 0).all()


# --- local BA on a map ----------------------------------------------------------------


def _map_from(poses, pts, ei, ej, eq, fixed_first=True):
    m = SlamMap(K, 2 * math.sqrt(3))
    for i, p in enumerate(poses):
        sel = np.flatnonzero(ei == i)
        m.add_keyframe(i, p, eq[sel], ej[sel], fixed=(i == 0 and fixed_first))
    for j, x in enumerate(pts):
        mp = m.add_point(x.copy(), "triangulated", feature_id=j)
        for kf in m.keyframes.values():
            hit = np.flatnonzero(kf.feature_ids == j)
            if len(hit):
                m.add_observation(kf.id, int(hit[0]), mp.id)
    return m


def test_local_ba_fixes_drifted_keyframe():
    rng = np.random.default_rng(9)
    poses = _cameras(5, spread_deg=40)
    pts = _sphere_points(150, rng)
    ei, ej, eq = _observations(poses, pts, 0.0, rng)
    drifted = list(poses)
    drifted[2] = Pose.from_rotvec([0.02, -0.015, 0.01], [0.05, -0.03, 0.04]) @ poses[2]
    m = _map_from(drifted, pts, ei, ej, eq)
    kf = list(m.keyframes.values())[2]
    err = lambda: rotation_error(kf.pose, poses[2]) + np.linalg.norm(kf.pose.center() - poses[2].center())
    before = err()
    local_bundle_adjust(m, kf.id, 5, OptimizerConfig(w_shape=0))
    after = err()
    assert after * 10 <= before


def test_local_ba_single_keyframe_window():
    rng = np.random.default_rng(10)
    poses = _cameras(3)
    pts = _sphere_points(60, rng)
    ei, ej, eq = _observations(poses, pts, 1.0, rng)
    m = _map_from(poses, pts + rng.normal(0, 0.01, pts.shape), ei, ej, eq)
    res = local_bundle_adjust(m, list(m.keyframes)[1], 1, OptimizerConfig(w_shape=0))
    assert res is not None and res.final_cost <= res.initial_cost
