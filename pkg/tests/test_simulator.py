import numpy as np
import pytest

from priortrack.features import detect_corners
from priortrack.geometry import Pose, project_point
from priortrack.mesh import dilate, render_mask
from priortrack.simulator import (
    Event,
    ScenarioError,
    ScenarioSpec,
    builtin_scenario,
    camera_trajectory,
    generate_scenario,
    organ_trajectory,
    read_ground_truth,
    read_observation_log,
    render_synthetic_images,
    save_scenario,
    true_pixels,
)


def _noise_free(name="default", **kw):
    return generate_scenario(builtin_scenario(name, seed=0, noise_px=0.0, **kw))


def test_noise_free_pixels_equal_projection():
    scn = _noise_free(n_frames=40, events=[])
    for f in scn.frames[::7]:
        for fid, q in zip(f.feature_ids[:40], f.pixels[:40]):
            n = int(np.flatnonzero(scn.truth.feature_ids == fid)[0])
            X = scn.truth.feature_points[n]
            pose = scn.truth.relative[f.frame_id] if scn.truth.is_organ[n] else scn.truth.camera_lab[f.frame_id]
            assert np.allclose(q, project_point(pose, scn.k, X), atol=1e-9)


@pytest.mark.parametrize("name", ["default", "organ_motion", "out_of_fov", "occlusion", "zero_parallax", "texture"])
def test_ground_truth_self_consistent(name):
    spec = builtin_scenario(name, seed=1, noise_px=0.0, n_frames=60)
    scn = generate_scenario(spec)
    for f in scn.frames[::10]:
        uv, _ = true_pixels(scn.truth, scn.k, f.frame_id)
        lookup = {int(i): n for n, i in enumerate(scn.truth.feature_ids)}
        rows = [lookup[int(i)] for i in f.feature_ids]
        assert np.allclose(f.pixels, uv[rows], atol=1e-9)


def test_dropout_retention_rate():
    spec = builtin_scenario("default", seed=5, dropout=0.3, events=[], n_background=0)
    scn = generate_scenario(spec)
    ref = generate_scenario(builtin_scenario("default", seed=5, dropout=0.0, events=[], n_background=0))
    kept = sum(len(f) for f in scn.frames)
    visible = sum(len(f) for f in ref.frames)
    assert len(scn.frames) == 1000 and spec.n_organ_features == 300
    assert kept / visible == pytest.approx(0.70, abs=0.01)


def test_out_of_fov_has_no_organ_observations():
    scn = generate_scenario(builtin_scenario("out_of_fov", seed=0, n_frames=200))
    ev = scn.spec.events[0]
    # the yaw ramps in over the first quarter; the middle of the event looks fully away
    ramp = ev.duration // 4
    for f in scn.frames[ev.start + ramp : ev.start + ev.duration - ramp]:
        assert not scn.truth.organ_of(f.feature_ids).any()


def test_occlusion_removes_all_features():
    scn = generate_scenario(builtin_scenario("occlusion", seed=0, n_frames=120))
    ev = scn.spec.events[0]
    assert all(len(f) == 0 for f in scn.frames[ev.start : ev.start + ev.duration])
    assert len(scn.frames[ev.start - 1]) > 50


def test_t_init_and_correspondences():
    scn = _noise_free(n_frames=5)
    assert np.array_equal(scn.t_init.matrix(), scn.truth.relative[0].matrix())
    assert len(scn.correspondences) == 20
    for c in scn.correspondences:
        assert np.allclose(project_point(scn.t_init, scn.k, c.point3), c.pixel)


def test_relative_pose_invariant_under_common_rigid_motion():
    spec = builtin_scenario("organ_motion", seed=2, n_frames=120)
    cams = camera_trajectory(spec, np.random.default_rng(spec.seed))
    organ = organ_trajectory(spec, np.zeros(3))
    G = Pose.from_rotvec(np.random.default_rng(3).normal(0, 1, 3), [1.0, -2.0, 0.5])
    for c, o in zip(cams, organ):
        moved = (c @ G.inverse()) @ (G @ o)
        assert np.allclose(moved.matrix(), (c @ o).matrix(), atol=1e-12)


def test_generation_is_deterministic():
    a = generate_scenario(builtin_scenario("default", seed=9, n_frames=30))
    b = generate_scenario(builtin_scenario("default", seed=9, n_frames=30))
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa.pixels, fb.pixels) and np.array_equal(fa.feature_ids, fb.feature_ids)


def test_spec_validation():
    with pytest.raises(ScenarioError):
        ScenarioSpec(dropout=1.5)
    with pytest.raises(ScenarioError):
        ScenarioSpec(fps=0)
    with pytest.raises(ScenarioError):
        Event("earthquake", 0, 5)
    with pytest.raises(ScenarioError):
        builtin_scenario("nope")


def test_files_roundtrip(tmp_path):
    scn = generate_scenario(builtin_scenario("default", seed=0, n_frames=12))
    out = save_scenario(scn, tmp_path / "s")
    frames, k, fps = read_observation_log(out / "observations.csv")
    assert k == scn.k and fps == scn.spec.fps and len(frames) == 12
    for a, b in zip(frames, scn.frames):
        assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.feature_ids, b.feature_ids)
    truth = read_ground_truth(out / "ground_truth.csv", out / "gt_points.csv")
    assert np.allclose(truth.relative[5].matrix(), scn.truth.relative[5].matrix())
    assert np.allclose(truth.markers, scn.truth.markers)


def test_renders_are_deterministic():
    spec = builtin_scenario("default", seed=0, n_frames=2)
    scn = generate_scenario(spec)
    a = list(render_synthetic_images(spec, scn.truth, scn.mesh))
    b = list(render_synthetic_images(spec, scn.truth, scn.mesh))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_detector_finds_corners_on_render():
    spec = builtin_scenario("default", seed=0, n_frames=1)
    scn = generate_scenario(spec)
    img = next(render_synthetic_images(spec, scn.truth, scn.mesh))
    mask = render_mask(scn.mesh, scn.truth.relative[0], scn.k, 0)
    pix, _ = detect_corners(img, 5000, 20)
    assert mask.contains(pix).sum() >= 100


def test_render_silhouette_matches_mask():
    # organ painted white, unshaded; the backdrop never reaches 255
    spec = builtin_scenario("default", seed=0, n_frames=1, albedo=255.0, shading=False)
    scn = generate_scenario(spec)
    img = next(render_synthetic_images(spec, scn.truth, scn.mesh))
    organ = np.all(img == 255, axis=2)
    mask = render_mask(scn.mesh, scn.truth.relative[0], scn.k, 0).bits
    diff = organ ^ mask
    band = dilate(mask, 1) & dilate(~mask, 1)
    assert organ.sum() > 10_000
    assert not np.any(diff & ~band)
