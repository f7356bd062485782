import math

import numpy as np
import pytest

from priortrack.geometry import Intrinsics, Pose, ray_through_pixel, ray_triangle_intersect, rotation_error
from priortrack.mesh import (
    EmptyMesh,
    MeshParseError,
    TriangleMesh,
    build_surface_index,
    closest_point,
    dilate,
    icosphere,
    load_mesh,
    read_ply_face_colors,
    render_depth,
    render_mask,
    save_obj,
    save_ply,
    texture_update,
)

from priortrack.simulator import _visible, builtin_scenario, generate_scenario, true_pixels

from .oracles import SPHERE_SILHOUETTE_RADIUS_PX, icosphere_area, linear_scan_nearest

K700 = Intrinsics(700.0, 700.0, 640.0, 480.0, 1280, 960)
SPHERE_AT_2 = Pose(translation=[0.0, 0.0, 2.0])  # unit sphere centered 2 units ahead


@pytest.fixture(scope="module")
def sphere():
    return icosphere(5)


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_single_triangle_obj(tmp_path):
    m = load_mesh(_write(tmp_path, "t.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"))
    assert m.vertices.shape == (3, 3) and m.faces.shape == (1, 3)
    assert np.allclose(m.face_normals[0], [0, 0, 1])
    assert m.face_weights[0] == 0


def test_zero_area_face_dropped(tmp_path):
    text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\nf 1 2 3\nf 1 2 4\n"
    m = load_mesh(_write(tmp_path, "d.obj", text))
    assert len(m.faces) == 1 and m.dropped_faces == 1


def test_parse_error_reports_line(tmp_path):
    with pytest.raises(MeshParseError) as exc:
        load_mesh(_write(tmp_path, "bad.obj", "v 0 0 0\nv 1 0 0\nv 0 x 0\nf 1 2 3\n"))
    assert exc.value.line_no == 3


def test_empty_mesh(tmp_path):
    with pytest.raises(EmptyMesh):
        load_mesh(_write(tmp_path, "e.obj", "# nothing\n"))


def test_ply_roundtrip(tmp_path):
    m = icosphere(1)
    m.face_colors[:] = [10, 20, 30]
    save_ply(m, tmp_path / "m.ply")
    back = load_mesh(tmp_path / "m.ply")
    assert np.allclose(back.vertices, m.vertices, atol=1e-7)
    assert np.array_equal(back.faces, m.faces)
    assert np.array_equal(read_ply_face_colors(tmp_path / "m.ply")[0], [10, 20, 30])


def test_icosphere_area(tmp_path):
    save_obj(icosphere(3), tmp_path / "ico.obj")
    m = load_mesh(tmp_path / "ico.obj")
    assert len(m.faces) == 1280
    assert m.total_area == pytest.approx(icosphere_area(3), rel=1e-9)
    assert m.total_area == pytest.approx(4 * math.pi, rel=0.01)


def test_normals_unit_and_outward(sphere):
    assert np.allclose(np.linalg.norm(sphere.face_normals, axis=1), 1.0, atol=1e-9)
    centers = sphere.vertices[sphere.faces].mean(1)
    assert np.all(np.sum(centers * sphere.face_normals, axis=1) > 0)


def _unit_square():
    return TriangleMesh.from_arrays([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])


def test_surface_samples_on_square():
    idx = build_surface_index(_unit_square(), density=1000)
    assert 900 <= len(idx) <= 1100
    assert np.all(idx.samples[:, 2] == 0)
    assert len(build_surface_index(_unit_square(), density=2000)) == pytest.approx(2 * len(idx), rel=0.05)


def test_sphere_samples_centroid():
    idx = build_surface_index(icosphere(3), density=2000)
    assert np.linalg.norm(idx.samples.mean(0)) < 0.05


def test_density_must_be_positive():
    with pytest.raises(ValueError):
        build_surface_index(_unit_square(), density=0)


def test_closest_point_on_sample():
    idx = build_surface_index(icosphere(3), density=500)
    p, d = closest_point(idx, idx.samples[17])
    assert d == 0 and np.array_equal(p, idx.samples[17])


def test_closest_point_from_outside():
    idx = build_surface_index(icosphere(4), density=5000)
    spacing = 1 / math.sqrt(idx.density)
    p, d = closest_point(idx, [0, 0, 2])
    assert np.linalg.norm(p - [0, 0, 1]) < 2 * spacing
    assert abs(d - 1) < 2 * spacing


def test_closest_point_matches_linear_scan_small():
    idx = build_surface_index(icosphere(2), density=300)
    rng = np.random.default_rng(5)
    for q in rng.normal(0, 1.5, (300, 3)):
        i_ref, d_ref = linear_scan_nearest(idx.samples, q)
        ids, d = idx.query(q)
        assert ids[0] == i_ref and d[0] == pytest.approx(d_ref, rel=1e-12)


def test_closest_point_tie_goes_to_lowest_id():
    m = _unit_square()
    idx = build_surface_index(m, density=50)
    # duplicate a sample at a higher id; the lower id must win
    from priortrack.mesh import SurfaceIndex
    from scipy.spatial import cKDTree

    pts = np.vstack([idx.samples, idx.samples[3]])
    dup = SurfaceIndex(pts, cKDTree(pts), idx.density)
    ids, _ = dup.query(pts[3] + [0, 0, 0.1])
    assert ids[0] == 3


def test_mask_empty_behind_camera(sphere):
    assert render_mask(sphere, Pose(translation=[0, 0, -3]), K700, 0).area == 0


def test_mask_sphere_silhouette_area(sphere):
    area = render_mask(sphere, SPHERE_AT_2, K700, 0).area
    assert area == pytest.approx(math.pi * SPHERE_SILHOUETTE_RADIUS_PX**2, rel=0.02)


def test_mask_dilation_superset(sphere):
    a = render_mask(sphere, SPHERE_AT_2, K700, 0).bits
    b = render_mask(sphere, SPHERE_AT_2, K700, 5).bits
    assert np.all(b[a]) and b.sum() > a.sum()


def test_mask_rejects_negative_dilation(sphere):
    with pytest.raises(ValueError):
        render_mask(sphere, SPHERE_AT_2, K700, -1)


def test_depth_center_pixel(sphere):
    assert render_depth(sphere, SPHERE_AT_2, K700, [[640, 480]])[0] == pytest.approx(1.0, abs=1e-6)


def test_depth_outside_silhouette_is_nohit(sphere):
    assert np.isnan(render_depth(sphere, SPHERE_AT_2, K700, [[5, 5]])[0])


def test_depth_matches_brute_force():
    m = icosphere(2)
    rng = np.random.default_rng(2)
    ang = rng.uniform(0, 2 * np.pi, 500)
    rad = np.sqrt(rng.uniform(0, 1, 500)) * 0.95 * SPHERE_SILHOUETTE_RADIUS_PX
    pix = np.stack([640 + rad * np.cos(ang), 480 + rad * np.sin(ang)], axis=1)
    depth = render_depth(m, SPHERE_AT_2, K700, pix)
    R = SPHERE_AT_2.rotation
    for q, z in zip(pix[::5], depth[::5]):
        ray = ray_through_pixel(SPHERE_AT_2, K700, q)
        best = min(
            (h.t for f in m.faces if (h := ray_triangle_intersect(ray, *m.vertices[f])) is not None), default=None
        )
        assert best is not None
        zref = (R @ ray.at(best) + SPHERE_AT_2.translation)[2]
        assert z == pytest.approx(zref, abs=1e-9)


def test_depth_hits_agree_with_mask(sphere):
    pose = Pose.from_rotvec([0.1, 0.2, 0], [0.1, -0.05, 2.5])
    mask = render_mask(sphere, pose, K700, 0).bits
    ys, xs = np.mgrid[0:960:12, 0:1280:12]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    hit = ~np.isnan(render_depth(sphere, pose, K700, pix))
    r, c = pix[:, 1].astype(int), pix[:, 0].astype(int)
    diff = hit != mask[r, c]
    # disagreements may only sit in the 1-px band around the silhouette outline
    band = dilate(mask, 1) & dilate(~mask, 1)
    assert np.all(band[r[diff], c[diff]])
    assert hit.sum() > 1000


def test_mask_contains_next_frame_projections():
    scn = generate_scenario(builtin_scenario("default", seed=0, n_frames=150))
    k, truth = scn.k, scn.truth
    hits = total = pairs = 0
    for i in range(1, len(truth.relative)):
        prev, cur = truth.relative[i - 1], truth.relative[i]
        step = cur @ prev.inverse()
        depth = np.linalg.norm(cur.translation)
        if rotation_error(prev, cur) >= math.radians(2) or np.linalg.norm(step.translation) >= 0.01 * depth:
            continue
        pairs += 1
        vis = _visible(scn.mesh, truth, k, i) & truth.is_organ
        uv, _ = true_pixels(truth, k, i)
        mask = render_mask(scn.mesh, prev, k, 5)
        hits += int(mask.contains(uv[vis]).sum())
        total += int(vis.sum())
    assert pairs > 100
    assert hits / total >= 0.99


def _triangle_facing_camera():
    # CCW seen from the camera at the origin looking down +z: normal points at the camera (-z)
    return TriangleMesh.from_arrays([[-1, -1, 3], [0, 1, 3], [1, -1, 3]], [[0, 1, 2]])


def test_texture_white_image():
    m = _triangle_facing_camera()
    k = Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
    img = np.full((100, 100, 3), 255, dtype=np.uint8)
    upd = texture_update(m, Pose.identity(), img, k)
    assert list(upd) == [0]
    assert np.allclose(m.face_colors[0], 255) and m.face_weights[0] == 1


def test_texture_back_facing_untouched():
    m = TriangleMesh.from_arrays([[-1, -1, 3], [1, -1, 3], [0, 1, 3]], [[0, 1, 2]])
    k = Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
    m.face_colors[0] = [1, 2, 3]
    texture_update(m, Pose.identity(), np.full((100, 100, 3), 255, np.uint8), k)
    assert np.array_equal(m.face_colors[0], [1, 2, 3]) and m.face_weights[0] == 0


def test_texture_running_average_and_cap():
    m = _triangle_facing_camera()
    k = Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
    a = np.full((100, 100, 3), 40, np.uint8)
    b = np.full((100, 100, 3), 100, np.uint8)
    texture_update(m, Pose.identity(), a, k)
    texture_update(m, Pose.identity(), b, k)
    assert np.allclose(m.face_colors[0], 70) and m.face_weights[0] == 2
    for _ in range(9):
        texture_update(m, Pose.identity(), a, k)
    assert m.face_weights[0] == 10
    before = m.face_colors[0].copy()
    texture_update(m, Pose.identity(), b, k)  # 12th update
    assert m.face_weights[0] == 10
    assert np.allclose(m.face_colors[0], (10 * before + 100) / 11)


def test_texture_size_mismatch():
    m = _triangle_facing_camera()
    with pytest.raises(ValueError):
        texture_update(m, Pose.identity(), np.zeros((10, 10, 3)), Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100))


def test_texture_margin_skips_outline_pixels():
    m = _triangle_facing_camera()
    k = Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
    img = np.zeros((100, 100, 3), np.uint8)
    img[20:80, 20:80] = 200  # the triangle's interior; its outline pixels fall on black
    plain = m.copy()
    texture_update(plain, Pose.identity(), img, k)
    texture_update(m, Pose.identity(), img, k, margin_px=3)
    assert plain.face_colors[0, 0] < 200
    assert m.face_colors[0, 0] == pytest.approx(200)


def test_closest_point_matches_linear_scan_10k():
    idx = build_surface_index(icosphere(3), density=200)
    rng = np.random.default_rng(17)
    queries = rng.normal(0, 1.2, (10_000, 3))
    ids, d = idx.query(queries)
    for lo in range(0, 10_000, 2000):
        q = queries[lo : lo + 2000]
        d2 = np.sum((idx.samples[None, :, :] - q[:, None, :]) ** 2, axis=2)
        ref = np.argmin(d2, axis=1)
        assert np.array_equal(ids[lo : lo + 2000], ref)
        assert np.allclose(d[lo : lo + 2000], np.sqrt(d2[np.arange(len(q)), ref]), rtol=1e-12, atol=0)
