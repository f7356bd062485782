import math

import numpy as np
import pytest

from priortrack.geometry import (
    BehindCamera,
    DegenerateParallax,
    Intrinsics,
    PixelOutOfBounds,
    Pose,
    Ray,
    project_point,
    ray_through_pixel,
    ray_triangle_intersect,
    rotation_error,
    triangulate,
)

from .oracles import plane_then_barycentric

K700 = Intrinsics(700.0, 700.0, 480.0, 270.0, 960, 540)


def test_optical_axis_maps_to_principal_point():
    assert np.allclose(project_point(Pose.identity(), K700, [0, 0, 1]), [480, 270])


def test_offset_point_projection():
    assert np.allclose(project_point(Pose.identity(), K700, [1, 0, 1]), [1180, 270])


def test_point_behind_camera():
    with pytest.raises(BehindCamera):
        project_point(Pose.identity(), K700, [0, 0, -1])


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(-1.0, 700.0, 480.0, 270.0, 960, 540)
    with pytest.raises(ValueError):
        Intrinsics(700.0, 700.0, 960.0, 270.0, 960, 540)


def test_center_pixel_ray_is_optical_axis():
    ray = ray_through_pixel(Pose.identity(), K700, [480, 270])
    assert np.allclose(ray.direction, [0, 0, 1])


def test_ray_roundtrip_at_depth():
    pose = Pose.from_rotvec([0.1, -0.2, 0.05], [0.3, 0.1, 2.0])
    ray = ray_through_pixel(pose, K700, [123.25, 401.5])
    assert np.allclose(project_point(pose, K700, ray.at(2.5)), [123.25, 401.5], atol=1e-6)


def test_ray_origin_is_camera_center():
    # camera sitting at (0,0,-5) with identity rotation: world->camera t = (0,0,5)
    pose = Pose(translation=[0, 0, 5])
    assert np.allclose(ray_through_pixel(pose, K700, [10, 10]).origin, [0, 0, -5])
    pose = Pose.from_rotvec([0.3, 0.2, -0.1], [1.0, -2.0, 0.5])
    assert np.allclose(ray_through_pixel(pose, K700, [10, 10]).origin, pose.center())


def test_ray_rejects_out_of_bounds_pixel():
    with pytest.raises(PixelOutOfBounds):
        ray_through_pixel(Pose.identity(), K700, [-1, 5])


def test_axis_aligned_triangle_hit():
    ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]))
    hit = ray_triangle_intersect(ray, (-1, -1, 2), (1, -1, 2), (0, 1, 2))
    assert hit is not None and hit.t == pytest.approx(2.0)


def test_parallel_ray_misses():
    ray = Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]))
    assert ray_triangle_intersect(ray, (-1, -1, 2), (1, -1, 2), (0, 1, 2)) is None


def test_ray_triangle_matches_plane_barycentric_oracle():
    rng = np.random.default_rng(11)
    hits = 0
    for _ in range(1000):
        o = rng.normal(0, 1, 3)
        d = rng.normal(0, 1, 3)
        d /= np.linalg.norm(d)
        tri = rng.normal(0, 1, (3, 3)) + 2 * d + o  # bias triangles into the ray's path
        got = ray_triangle_intersect(Ray(o, d), *tri)
        ref = plane_then_barycentric(o, d, *tri)
        s, u = (ref[1] if ref else (0.5, 0.25))
        # skip cases sitting on an edge within float noise; both answers are acceptable there
        if ref is not None and min(s, u, 1 - s - u) < 1e-9:
            continue
        assert (got is None) == (ref is None)
        if got is not None:
            hits += 1
            assert got.t == pytest.approx(ref[0], abs=1e-9)
            p = o + got.t * d
            n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
            assert abs(n @ (p - tri[0])) / np.linalg.norm(n) < 1e-9
    assert hits > 200


def test_triangulate_noise_free():
    X = np.array([0.2, -0.1, 4.0])
    a = Pose.identity()
    b = Pose(translation=[-0.1, 0, 0])  # camera center at x = 0.1
    p = triangulate(a, b, project_point(a, K700, X), project_point(b, K700, X), K700, min_parallax_deg=0.0)
    assert np.allclose(p.point, X, atol=1e-6)
    assert p.parallax_deg > 0


def test_triangulate_identical_poses():
    with pytest.raises(DegenerateParallax):
        triangulate(Pose.identity(), Pose.identity(), [400, 300], [400, 300], K700)


def test_triangulate_noise_residual_monte_carlo():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        X = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3), rng.uniform(2.0, 3.0)])
        a = Pose.identity()
        b = Pose.from_rotvec([0, 0.1, 0], [-0.4, 0, 0])
        qa = project_point(a, K700, X) + rng.normal(0, 1, 2)
        qb = project_point(b, K700, X) + rng.normal(0, 1, 2)
        p = triangulate(a, b, qa, qb, K700).point
        worst = max(worst, np.linalg.norm(project_point(a, K700, p) - qa), np.linalg.norm(project_point(b, K700, p) - qb))
    assert worst <= 3.0


def test_compose_inverse_identity():
    p = Pose.from_rotvec([0.3, -1.2, 2.0], [1, 2, 3])
    assert np.allclose((p @ p.inverse()).matrix(), np.eye(4), atol=1e-9)
    assert np.allclose((p.inverse() @ p).matrix(), np.eye(4), atol=1e-9)


def test_rotation_is_orthonormal_after_many_compositions():
    p = Pose.identity()
    step = Pose.from_rotvec([0.01, 0.02, -0.03], [0.001, 0, 0])
    for _ in range(10000):
        p = step @ p
    R = p.rotation
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


def test_rotation_error_geodesic():
    a = Pose.identity()
    b = Pose.from_rotvec([0, 0, math.radians(30)])
    assert rotation_error(a, b) == pytest.approx(math.radians(30))
