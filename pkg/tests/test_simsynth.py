import dataclasses
import math

import numpy as np
import pytest
from helpers import NADIR_CAMERA

import downvio.simsynth.dataset as dataset_mod
from downvio.geometry import PlaneNormal, WarpParams, build_homography, matrix_to_rodrigues, rodrigues_to_matrix, warp_points
from downvio.imgproc import sample_many
from downvio.simsynth import (
    PRESETS,
    CameraPose,
    Renderer,
    ScenarioSpec,
    SensorNoise,
    SpecError,
    TextureSpec,
    Trajectory,
    camera_pose,
    fraction_on_texture,
    ground_truth,
    load_dataset,
    preset,
    render_frame,
    sample_times,
    spec_from_dict,
    synthesize_dataset,
    synthesize_imu,
    synthesize_range,
    write_dataset,
)
from downvio.simsynth.texture import BACKGROUND, make_texture
from downvio.simsynth.trajectory import Axis


def nadir(height, x=0.0, y=0.0, rot=NADIR_CAMERA):
    return CameraPose(np.array([x, y, height]), np.asarray(rot, dtype=float))


def zero_crossings(row, level):
    s = row - level
    idx = np.flatnonzero(np.sign(s[:-1]) * np.sign(s[1:]) < 0)
    return idx + s[idx] / (s[idx] - s[idx + 1])


# ---------------------------------------------------------------- rendering


@pytest.mark.parametrize("height", [1.5, 2.0, 3.0])
def test_checker_period_follows_similar_triangles(height):
    spec = ScenarioSpec(texture=TextureSpec(kind="checker", checker_period_m=0.2))
    img = render_frame(spec, nadir(height, 0.013, 0.021))
    crossings = zero_crossings(img.data[120], BACKGROUND)
    half_periods = np.diff(crossings)
    expected = spec.camera.fx * 0.2 / height
    assert 2 * half_periods.mean() == pytest.approx(expected, rel=5e-3)


def test_render_is_deterministic(ideal_spec):
    pose = nadir(2.0, 0.4, -0.3)
    a = Renderer(ideal_spec).render(pose)
    b = render_frame(ideal_spec, pose)
    assert np.array_equal(a.data, b.data)


@pytest.mark.parametrize("alpha_deg", [2.0, -5.0, 10.0])
def test_pure_yaw_is_a_rotation_homography(ideal_spec, alpha_deg):
    renderer = Renderer(ideal_spec)
    alpha = math.radians(alpha_deg)
    rz = rodrigues_to_matrix([0.0, 0.0, alpha])
    prev = renderer.render(nadir(2.0, 0.5, 0.5))
    curr = renderer.render(nadir(2.0, 0.5, 0.5, NADIR_CAMERA @ rz))
    k = ideal_spec.camera
    h = k.matrix @ rz @ k.inverse
    ys, xs = np.mgrid[0 : ideal_spec.height, 0 : ideal_spec.width]
    wx, wy = warp_points(h, xs.ravel().astype(float), ys.ravel().astype(float))
    inside = (wx >= 0) & (wx <= ideal_spec.width - 1) & (wy >= 0) & (wy <= ideal_spec.height - 1)
    predicted = sample_many(prev.data, wx[inside], wy[inside])
    err = np.abs(predicted - curr.data.ravel()[inside]).mean()
    assert inside.mean() > 0.7
    assert err < 1e-3


@pytest.mark.parametrize("name", ["p1-ideal", "s1-slope"])
def test_ground_truth_homography_consistency(name):
    spec = preset(name)
    traj = spec.build_trajectory()
    renderer = Renderer(spec)
    times = sample_times(spec.duration, spec.image_rate)
    gt = ground_truth(spec, times, traj)
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width]
    xs, ys = xs.ravel().astype(float), ys.ravel().astype(float)
    for k in range(1, times.size, 211):
        prev = renderer.render(camera_pose(spec, traj.state(float(times[k - 1]))))
        curr = renderer.render(camera_pose(spec, traj.state(float(times[k]))))
        p = WarpParams(t=tuple(gt.rel_translations[k]), r=tuple(matrix_to_rodrigues(gt.rel_rotations[k])))
        h = build_homography(spec.camera, p, PlaneNormal.from_vector(gt.normals[k]))
        wx, wy = warp_points(h, xs, ys)
        inside = (wx >= 0) & (wx <= spec.width - 1) & (wy >= 0) & (wy <= spec.height - 1)
        err = np.abs(sample_many(prev.data, wx[inside], wy[inside]) - curr.data.ravel()[inside]).mean()
        assert err < 2e-3, (k, err)


def test_ground_truth_inter_frame_terms_match_poses(ideal_spec):
    times = sample_times(2.0, ideal_spec.image_rate)
    gt = ground_truth(ideal_spec, times)
    r_ci = ideal_spec.extrinsics.r_ci
    for k in range(1, times.size):
        r_prev = gt.rotations[k - 1] @ r_ci.T
        r_curr = gt.rotations[k] @ r_ci.T
        np.testing.assert_allclose(gt.rel_rotations[k], r_prev.T @ r_curr, atol=1e-12)
        step = r_prev.T @ (gt.positions[k] - gt.positions[k - 1]) / gt.distances[k]
        np.testing.assert_allclose(gt.rel_translations[k], step, atol=1e-12)
        np.testing.assert_allclose(gt.normals[k], r_curr.T @ [0.0, 0.0, -1.0], atol=1e-12)
    np.testing.assert_array_equal(gt.rel_rotations[0], np.eye(3))


def test_horizon_pixels_are_background(ideal_spec):
    # optical axis 80 deg from nadir: the top of the image looks above the horizon
    tilt = NADIR_CAMERA @ rodrigues_to_matrix([math.radians(80.0), 0.0, 0.0])
    img = render_frame(ideal_spec, nadir(2.0, rot=tilt))
    assert np.all(img.data[0] == BACKGROUND)
    assert np.any(img.data != BACKGROUND)


def test_render_refuses_camera_at_ground(ideal_spec):
    with pytest.raises(ValueError):
        render_frame(ideal_spec, nadir(0.05))


def test_contrast_scales_texture():
    full = make_texture(TextureSpec(contrast=1.0)).raster
    low = make_texture(TextureSpec(contrast=0.25)).raster
    unclipped = (full > 0.0) & (full < 1.0)
    np.testing.assert_allclose(low[unclipped] - BACKGROUND, 0.25 * (full[unclipped] - BACKGROUND), atol=1e-12)
    assert np.all(make_texture(TextureSpec(contrast=0.0)).raster == BACKGROUND)


# ---------------------------------------------------------------- IMU, AHRS, range


def test_hover_imu_is_static():
    spec = dataclasses.replace(preset("hover"), duration=1.0)
    imu, ahrs = synthesize_imu(spec)
    for s, a in zip(imu, ahrs):
        np.testing.assert_array_equal(s.f_m, [0.0, 0.0, 9.81])
        np.testing.assert_array_equal(s.omega_m, 0.0)
        np.testing.assert_array_equal(a.rotation, np.eye(3))
    assert len(imu) == 200


def test_circle_shows_centripetal_acceleration():
    radius, period = 2.0, 8.0
    spec = ScenarioSpec(trajectory="circle", trajectory_params=dict(radius=radius, period=period), duration=8.0)
    imu, _ = synthesize_imu(spec)
    f = np.array([s.f_m for s in imu])
    expected = radius * (2 * math.pi / period) ** 2
    np.testing.assert_allclose(np.linalg.norm(f[:, :2], axis=1), expected, rtol=1e-12)
    np.testing.assert_allclose(f[:, 2], 9.81, rtol=1e-12)


def _omega_fd_error(traj, times, h):
    worst = 0.0
    for t in times:
        rel = traj.rotation(t - h).T @ traj.rotation(t + h)
        approx = matrix_to_rodrigues(rel) / (2 * h)
        worst = max(worst, float(np.abs(approx - traj.omega_body(t)).max()))
    return worst


def test_gyro_matches_differentiated_attitude():
    spec = preset("p5-aggressive")
    traj = spec.build_trajectory()
    imu, _ = synthesize_imu(dataclasses.replace(spec, duration=5.0))
    times = [s.timestamp for s in imu[1:-1:37]]
    for s in imu[1:-1:37]:
        rel = traj.rotation(s.timestamp - 0.005).T @ traj.rotation(s.timestamp + 0.005)
        np.testing.assert_allclose(matrix_to_rodrigues(rel) / 0.01, s.omega_m, atol=1e-4)
    coarse = _omega_fd_error(traj, times, 0.01)
    fine = _omega_fd_error(traj, times, 0.005)
    assert 3.0 < coarse / fine < 5.0  # second-order convergence


def test_integrated_imu_reproduces_final_velocity():
    spec = preset("p1-ideal")
    traj = spec.build_trajectory()

    def final_velocity_error(rate):
        s = dataclasses.replace(spec, imu_rate=rate, duration=10.0)
        imu, ahrs = synthesize_imu(s)
        acc = np.array([a.rotation @ m.f_m + [0.0, 0.0, -9.81] for m, a in zip(imu, ahrs)])
        t = np.array([m.timestamp for m in imu])
        v = traj.velocity(t[0]) + np.sum(0.5 * (acc[1:] + acc[:-1]) * np.diff(t)[:, None], axis=0)
        return np.linalg.norm(v - traj.velocity(t[-1]))

    e200, e400 = final_velocity_error(200.0), final_velocity_error(400.0)
    assert e200 < 1e-4
    assert 3.0 < e200 / e400 < 5.0


def test_sensor_streams_are_reproducible():
    spec = dataclasses.replace(preset("p1-noisy"), duration=1.0)
    a_imu, a_ahrs = synthesize_imu(spec)
    b_imu, b_ahrs = synthesize_imu(spec)
    for x, y in zip(a_imu, b_imu):
        assert np.array_equal(x.f_m, y.f_m) and np.array_equal(x.omega_m, y.omega_m)
    for x, y in zip(a_ahrs, b_ahrs):
        assert np.array_equal(x.rotation, y.rotation)
    assert np.array_equal(synthesize_range(spec)[1], synthesize_range(spec)[1])
    other = synthesize_imu(dataclasses.replace(spec, noise=dataclasses.replace(spec.noise, seed=7)))[0]
    assert not np.array_equal(a_imu[0].f_m, other[0].f_m)


def test_range_in_level_hover():
    spec = dataclasses.replace(preset("hover"), duration=0.5)
    _, values = synthesize_range(spec)
    np.testing.assert_array_equal(values, 2.0)


@pytest.mark.parametrize("height", [1.0, 2.5])
def test_range_under_constant_tilt(height):
    traj = Trajectory(z=Axis(offset=height), roll=Axis(offset=math.radians(10.0)))
    spec = ScenarioSpec(trajectory="hover", duration=0.1)
    _, values = synthesize_range(spec, traj)
    np.testing.assert_allclose(values, height / math.cos(math.radians(10.0)), rtol=1e-12)


@pytest.mark.parametrize("name", ["p1-ideal", "p5-aggressive", "s1-slope"])
def test_range_times_normal_is_plane_distance(name):
    spec = dataclasses.replace(preset(name), duration=5.0)
    times, values = synthesize_range(spec)
    gt = ground_truth(spec, times)
    np.testing.assert_allclose(values * gt.normals[:, 2], gt.distances, rtol=1e-12)


def test_range_samples_dropped_when_beam_misses():
    traj = Trajectory(z=Axis(offset=2.0), roll=Axis(terms=((2.0, 2 * math.pi, 0.0),)))
    spec = ScenarioSpec(trajectory="hover", duration=1.0)
    times, values = synthesize_range(spec, traj)
    assert 0 < times.size < 80
    assert np.all(values > 0)


# ---------------------------------------------------------------- datasets


def test_one_second_hover_has_eighty_frames(tmp_path):
    spec = dataclasses.replace(preset("hover"), duration=1.0)
    out = write_dataset(spec, tmp_path / "hover")
    manifest = dataset_mod.read_manifest(out)
    assert len(manifest["frame_files"]) == 80
    assert len(list((out / "frames").glob("*.pgm"))) == 80


def test_dataset_round_trip_is_exact(tmp_path):
    spec = dataclasses.replace(preset("p1-noisy"), duration=0.5)
    ds = synthesize_dataset(spec)
    back = load_dataset(write_dataset(spec, tmp_path / "ds"))
    assert np.array_equal(back.frame_times, ds.frame_times)
    for a, b in zip(ds.frames, back.frames):
        assert np.array_equal(a.data, b.data)
    for a, b in zip(ds.imu, back.imu):
        assert a.timestamp == b.timestamp
        assert np.array_equal(a.f_m, b.f_m) and np.array_equal(a.omega_m, b.omega_m)
    for a, b in zip(ds.ahrs, back.ahrs):
        assert np.array_equal(a.rotation, b.rotation)
    assert np.array_equal(ds.range_times, back.range_times)
    assert np.array_equal(ds.range_values, back.range_values)
    for field in dataclasses.fields(ds.groundtruth):
        assert np.array_equal(getattr(ds.groundtruth, field.name), getattr(back.groundtruth, field.name)), field.name
    assert back.intrinsics == ds.intrinsics
    assert np.array_equal(back.extrinsics.r_ci, ds.extrinsics.r_ci)


def test_dataset_bytes_are_stable(tmp_path):
    spec = dataclasses.replace(preset("p1-noisy"), duration=0.25)
    a = write_dataset(spec, tmp_path / "a")
    b = write_dataset(spec, tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_existing_output_is_protected(tmp_path):
    spec = dataclasses.replace(preset("hover"), duration=0.1)
    out = tmp_path / "ds"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    with pytest.raises(FileExistsError):
        write_dataset(spec, out)
    assert (out / "keep.txt").exists()
    write_dataset(spec, out, overwrite=True)
    assert not (out / "keep.txt").exists()


def test_failed_write_leaves_nothing_behind(tmp_path, monkeypatch):
    calls = []

    def flaky(path, img):
        calls.append(path)
        if len(calls) == 3:
            raise OSError("disk full")
        (path).write_bytes(b"")

    monkeypatch.setattr(dataset_mod, "write_pgm", flaky)
    spec = dataclasses.replace(preset("hover"), duration=0.1)
    with pytest.raises(OSError):
        write_dataset(spec, tmp_path / "ds")
    assert list(tmp_path.iterdir()) == []


def test_figure_eight_stays_on_texture(ideal_spec):
    assert fraction_on_texture(ideal_spec) >= 0.99


def test_low_rate_preset():
    spec = preset("p6-lowhz")
    assert spec.image_rate == 20.0
    assert sample_times(spec.duration, spec.image_rate).size == 600


def test_sample_times_are_exact_multiples():
    t = sample_times(1.0, 80.0)
    assert t.size == 80
    assert np.array_equal(t, np.round(np.arange(80) / 80.0, 9))


# ---------------------------------------------------------------- specs


def test_presets_build():
    for name in PRESETS:
        spec = preset(name)
        spec.build_trajectory()
        assert spec.name == name


def test_unknown_preset_raises_spec_error():
    with pytest.raises(SpecError):
        preset("p9-nonexistent")


@pytest.mark.parametrize(
    "data, field",
    [
        ({"duration": -1.0}, "duration"),
        ({"image_rate": 0.0}, "image_rate"),
        ({"width": 32}, "width"),
        ({"bogus": 1}, "bogus"),
        ({"texture": {"grain": 2}}, "texture.grain"),
        ({"trajectory": {"kind": "spiral"}}, "trajectory"),
        ({"trajectory": {"wingspan": 3}}, "trajectory"),
    ],
)
def test_spec_errors_name_the_field(data, field):
    with pytest.raises(SpecError) as info:
        spec_from_dict(data)
    assert info.value.field == field


def test_spec_overrides_apply_on_top_of_preset():
    spec = spec_from_dict(
        {"preset": "p1-ideal", "duration": 4.0, "texture": {"contrast": 0.5}, "noise": {"accel_bias": [0.1, 0, 0]},
         "trajectory": {"scale": 2.0}}
    )
    assert spec.duration == 4.0
    assert spec.texture.contrast == 0.5
    assert spec.noise.accel_bias == (0.1, 0, 0)
    assert spec.trajectory_params["scale"] == 2.0
    assert spec.trajectory_params["tilt_deg"] == 4.0


def test_noise_free_flag():
    assert SensorNoise().noise_free
    assert not preset("p1-noisy").noise.noise_free
