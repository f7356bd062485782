import math

import numpy as np
import pytest

from priortrack.geometry import Intrinsics, Pose, project_points, rotation_error
from priortrack.registration import (
    Correspondence,
    DegenerateConfiguration,
    TooFewPoints,
    octahedral_rotations,
    read_correspondences,
    read_pose_file,
    solve_initial_registration,
    write_correspondences,
    write_pose_file,
)

K = Intrinsics(1000.0, 1000.0, 640.0, 360.0, 1280, 720)
TRUE_POSE = Pose.from_rotvec([0.4, -0.7, 0.2], [0.1, -0.2, 4.0])


def _cloud(n, rng, planar=False):
    X = rng.uniform(-0.8, 0.8, (n, 3))
    if planar:
        X[:, 2] = 0.0
    return X


def _corrs(X, pose=TRUE_POSE, noise=0.0, rng=None):
    uv, front = project_points(pose, K, X)
    assert front.all()
    if noise:
        uv = uv + rng.normal(0, noise, uv.shape)
    return [Correspondence(tuple(p), tuple(q), i) for i, (p, q) in enumerate(zip(X, uv))]


def test_octahedral_group():
    rots = octahedral_rotations()
    assert len(rots) == 24
    assert all(np.allclose(R @ R.T, np.eye(3)) and np.isclose(np.linalg.det(R), 1) for R in rots)
    keys = {tuple(np.round(R).astype(int).ravel()) for R in rots}
    assert len(keys) == 24


def test_noise_free_recovery():
    X = _cloud(20, np.random.default_rng(0))
    res = solve_initial_registration(_corrs(X), K)
    assert rotation_error(res.pose, TRUE_POSE) < 1e-5
    assert np.linalg.norm(res.pose.translation - TRUE_POSE.translation) < 1e-5
    assert res.rms_px < 1e-4


def test_too_few_points():
    X = _cloud(3, np.random.default_rng(0))
    with pytest.raises(TooFewPoints):
        solve_initial_registration(_corrs(X), K)


def test_collinear_points():
    X = np.outer(np.linspace(-0.5, 0.5, 6), [1.0, 0.5, 0.2])
    with pytest.raises(DegenerateConfiguration):
        solve_initial_registration(_corrs(X), K)


def test_noisy_monte_carlo():
    rng = np.random.default_rng(1)
    errs, rms = [], []
    for _ in range(10):
        X = _cloud(20, rng)
        res = solve_initial_registration(_corrs(X, noise=2.0, rng=rng), K)
        errs.append(math.degrees(rotation_error(res.pose, TRUE_POSE)))
        rms.append(res.rms_px)
    assert np.median(errs) < 1.0
    assert all(1.0 <= r <= 4.0 for r in rms)


def test_planar_target():
    X = _cloud(12, np.random.default_rng(2), planar=True)
    res = solve_initial_registration(_corrs(X), K)
    assert rotation_error(res.pose, TRUE_POSE) < 1e-4


def test_winner_is_argmin_of_starts():
    X = _cloud(20, np.random.default_rng(3))
    res = solve_initial_registration(_corrs(X, noise=1.0, rng=np.random.default_rng(4)), K)
    assert len(res.per_start_residuals) == 72
    assert res.rms_px == pytest.approx(min(r for _, r in res.per_start_residuals))


def test_permutation_invariance():
    rng = np.random.default_rng(5)
    corrs = _corrs(_cloud(20, rng), noise=1.0, rng=rng)
    a = solve_initial_registration(corrs, K).pose
    b = solve_initial_registration([corrs[i] for i in rng.permutation(len(corrs))], K).pose
    assert rotation_error(a, b) < 1e-6
    assert np.linalg.norm(a.translation - b.translation) < 1e-6


def test_winner_is_fixed_point():
    rng = np.random.default_rng(6)
    corrs = _corrs(_cloud(20, rng), noise=1.0, rng=rng)
    a = solve_initial_registration(corrs, K).pose
    b = solve_initial_registration(corrs, K, seeds=[a]).pose
    assert rotation_error(a, b) < 1e-6
    assert np.linalg.norm(a.translation - b.translation) < 1e-6


def test_correspondence_and_pose_files(tmp_path):
    rng = np.random.default_rng(7)
    X = _cloud(5, rng)
    uv, _ = project_points(TRUE_POSE, K, X)
    write_correspondences(tmp_path / "c.csv", X, uv)
    back = read_correspondences(tmp_path / "c.csv")
    assert len(back) == 5
    assert np.allclose([c.point3 for c in back], X) and np.allclose([c.pixel for c in back], uv)
    write_pose_file(tmp_path / "p.txt", TRUE_POSE)
    assert np.allclose(read_pose_file(tmp_path / "p.txt").matrix(), TRUE_POSE.matrix())
