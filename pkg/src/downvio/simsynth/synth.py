"""Rendering of the textured ground plane and synthesis of the sensor streams."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from downvio.fusion import GRAVITY, AhrsAttitude, ImuSample
from downvio.geometry import rodrigues_to_matrix
from downvio.imgproc import GrayImage
from downvio.simsynth.scenario import ScenarioSpec
from downvio.simsynth.texture import BACKGROUND, Texture, make_texture
from downvio.simsynth.trajectory import KinematicState, Trajectory

_MIN_CLEARANCE = 0.1
_RANGE_MIN_COS = 1e-3
_GRAVITY_WORLD = np.array([0.0, 0.0, -GRAVITY])


def sample_times(duration: float, rate: float) -> np.ndarray:
    """``k / rate`` for every sample in ``[0, duration)``, rounded to 1 ns."""
    count = int(round(duration * rate))
    return np.round(np.arange(count) / rate, 9)


@dataclass(frozen=True)
class CameraPose:
    position: np.ndarray
    rotation: np.ndarray  # camera -> world


def camera_pose(spec: ScenarioSpec, state: KinematicState) -> CameraPose:
    extr = spec.extrinsics
    return CameraPose(
        position=state.position + state.rotation @ extr.p_ic,
        rotation=state.rotation @ extr.r_ci.T,
    )


class Renderer:
    """Ray-casts every pixel onto the ground plane. Deterministic for a spec."""

    def __init__(self, spec: ScenarioSpec, texture: Texture | None = None) -> None:
        self.spec = spec
        self.texture = texture if texture is not None else make_texture(spec.texture)
        k = spec.camera
        us, vs = np.meshgrid(np.arange(spec.width, dtype=np.float64), np.arange(spec.height, dtype=np.float64))
        self.rays = np.stack(
            [(us.ravel() - k.cx) / k.fx, (vs.ravel() - k.cy) / k.fy, np.ones(us.size)]
        )
        self.up = spec.plane_normal_world
        self.e1, self.e2 = spec.plane_basis_world

    def hit_points(self, pose: CameraPose, rays: np.ndarray | None = None):
        """Plane coordinates of the ray hits and a mask of rays that hit in front."""
        rays = self.rays if rays is None else rays
        dirs = pose.rotation @ rays
        height = float(self.up @ pose.position)
        denom = self.up @ dirs
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = -height / denom
        valid = (denom < 0) & np.isfinite(lam) & (lam > 0)
        lam = np.where(valid, lam, 0.0)
        pts = pose.position[:, None] + dirs * lam
        return self.e1 @ pts, self.e2 @ pts, valid

    def render(self, pose: CameraPose, timestamp: float = 0.0) -> GrayImage:
        height = float(self.up @ pose.position)
        if height <= _MIN_CLEARANCE:
            raise ValueError(f"camera only {height:.3f} m above the ground plane")
        a, b, valid = self.hit_points(pose)
        out = np.full(a.shape, BACKGROUND)
        out[valid] = self.texture.sample(a[valid], b[valid])
        return GrayImage(out.reshape(self.spec.height, self.spec.width), timestamp)

    def fully_on_texture(self, pose: CameraPose) -> bool:
        w, h = self.spec.width, self.spec.height
        border = np.concatenate(
            [
                np.stack([np.arange(w), np.zeros(w)], 1),
                np.stack([np.arange(w), np.full(w, h - 1)], 1),
                np.stack([np.zeros(h), np.arange(h)], 1),
                np.stack([np.full(h, w - 1), np.arange(h)], 1),
            ]
        ).astype(np.float64)
        k = self.spec.camera
        rays = np.stack([(border[:, 0] - k.cx) / k.fx, (border[:, 1] - k.cy) / k.fy, np.ones(len(border))])
        a, b, valid = self.hit_points(pose, rays)
        return bool(valid.all() and self.texture.contains(a, b).all())


def render_frame(spec: ScenarioSpec, pose: CameraPose, timestamp: float = 0.0) -> GrayImage:
    return Renderer(spec).render(pose, timestamp)


def _rng(spec: ScenarioSpec, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.noise.seed, stream]))


def synthesize_imu(spec: ScenarioSpec, trajectory: Trajectory | None = None) -> tuple[list[ImuSample], list[AhrsAttitude]]:
    """Accelerometer/gyro samples and AHRS attitudes at the IMU rate.

    ``f_m = R^T (a - g) + bias + noise``, ``omega_m = omega + noise``; the
    AHRS attitude is the true one perturbed by a random small rotation.
    """
    traj = trajectory or spec.build_trajectory()
    noise = spec.noise
    rng_imu = _rng(spec, 1)
    rng_ahrs = _rng(spec, 2)
    bias = np.asarray(noise.accel_bias, dtype=np.float64)
    imu, ahrs = [], []
    for t in sample_times(spec.duration, spec.imu_rate):
        st = traj.state(float(t))
        f = st.rotation.T @ (st.acceleration - _GRAVITY_WORLD) + bias
        w = st.omega_body.copy()
        if noise.accel_sigma:
            f = f + rng_imu.normal(0.0, noise.accel_sigma, 3)
        if noise.gyro_sigma:
            w = w + rng_imu.normal(0.0, noise.gyro_sigma, 3)
        rot = st.rotation
        if noise.ahrs_sigma:
            rot = rot @ rodrigues_to_matrix(rng_ahrs.normal(0.0, noise.ahrs_sigma, 3))
        imu.append(ImuSample(f_m=f, omega_m=w, timestamp=float(t)))
        ahrs.append(AhrsAttitude(rotation=rot, timestamp=float(t)))
    return imu, ahrs


def plane_distance(spec: ScenarioSpec, pose: CameraPose) -> float:
    return float(spec.plane_normal_world @ pose.position)


def camera_plane_normal(spec: ScenarioSpec, pose: CameraPose) -> np.ndarray:
    """True ground normal in the camera frame, pointing at the ground."""
    return pose.rotation.T @ (-spec.plane_normal_world)


def synthesize_range(spec: ScenarioSpec, trajectory: Trajectory | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Rangefinder samples along the camera optical axis.

    Returns ``(timestamps, ranges)``; samples whose beam misses the plane are dropped.
    """
    traj = trajectory or spec.build_trajectory()
    rng = _rng(spec, 3)
    times, values = [], []
    for t in sample_times(spec.duration, spec.range_rate):
        pose = camera_pose(spec, traj.state(float(t)))
        d = plane_distance(spec, pose)
        cos_beam = camera_plane_normal(spec, pose)[2]
        noise = rng.normal(0.0, spec.noise.range_sigma) if spec.noise.range_sigma else 0.0
        if cos_beam < _RANGE_MIN_COS or d <= 0:
            continue
        times.append(float(t))
        values.append(d / cos_beam + noise)
    return np.array(times), np.array(values)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Per-image truth. Inter-frame entries at index ``k`` relate frame ``k`` to ``k-1``
    (identity / zero at ``k = 0``)."""

    times: np.ndarray
    positions: np.ndarray  # IMU origin, world (N, 3)
    rotations: np.ndarray  # body -> world (N, 3, 3)
    velocities_world: np.ndarray
    velocities_body: np.ndarray
    distances: np.ndarray  # camera to plane along the normal
    rel_rotations: np.ndarray  # current camera -> previous camera
    rel_translations: np.ndarray  # unscaled, previous-camera frame
    normals: np.ndarray  # camera frame, current image

    def __len__(self) -> int:
        return self.times.size


def ground_truth(spec: ScenarioSpec, times: np.ndarray, trajectory: Trajectory | None = None) -> GroundTruth:
    traj = trajectory or spec.build_trajectory()
    n = times.size
    pos = np.zeros((n, 3))
    rots = np.zeros((n, 3, 3))
    vw = np.zeros((n, 3))
    vb = np.zeros((n, 3))
    dist = np.zeros(n)
    rel_r = np.tile(np.eye(3), (n, 1, 1))
    rel_t = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    prev_pose = None
    for k, t in enumerate(times):
        st = traj.state(float(t))
        pose = camera_pose(spec, st)
        pos[k], rots[k], vw[k], vb[k] = st.position, st.rotation, st.velocity, st.velocity_body
        dist[k] = plane_distance(spec, pose)
        normals[k] = camera_plane_normal(spec, pose)
        if prev_pose is not None:
            rel_r[k] = prev_pose.rotation.T @ pose.rotation
            rel_t[k] = prev_pose.rotation.T @ (pose.position - prev_pose.position) / dist[k]
        prev_pose = pose
    return GroundTruth(times, pos, rots, vw, vb, dist, rel_r, rel_t, normals)


class RenderedFrames(Sequence[GrayImage]):
    """Lazily rendered, 8-bit quantised frames of a scenario."""

    def __init__(self, spec: ScenarioSpec, times: np.ndarray, trajectory: Trajectory | None = None, quantize: bool = True):
        self.spec = spec
        self.times = times
        self.trajectory = trajectory or spec.build_trajectory()
        self.renderer = Renderer(spec)
        self.quantize = quantize
        self._cache: dict[int, GrayImage] = {}

    def __len__(self) -> int:
        return self.times.size

    def __getitem__(self, k):
        if isinstance(k, slice):
            return [self[i] for i in range(*k.indices(len(self)))]
        if k < 0:
            k += len(self)
        if k in self._cache:
            return self._cache[k]
        t = float(self.times[k])
        img = self.renderer.render(camera_pose(self.spec, self.trajectory.state(t)), t)
        if self.quantize:
            img = GrayImage.from_uint8(img.to_uint8(), t)
        if len(self._cache) >= 2:
            self._cache.pop(next(iter(self._cache)))
        self._cache[k] = img
        return img


def fraction_on_texture(spec: ScenarioSpec, times: np.ndarray | None = None) -> float:
    """Share of image timestamps whose whole field of view lies on the texture."""
    traj = spec.build_trajectory()
    renderer = Renderer(spec)
    times = sample_times(spec.duration, spec.image_rate) if times is None else times
    ok = sum(renderer.fully_on_texture(camera_pose(spec, traj.state(float(t)))) for t in times)
    return ok / len(times)
