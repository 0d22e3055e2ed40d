"""Scenario description and the named presets."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from downvio.fusion import Extrinsics
from downvio.geometry import CameraIntrinsics
from downvio.simsynth.texture import TextureSpec
from downvio.simsynth.trajectory import TRAJECTORY_KINDS, Trajectory, build_trajectory


class SpecError(ValueError):
    """Invalid scenario field; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str) -> None:
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class SensorNoise:
    accel_sigma: float = 0.0
    gyro_sigma: float = 0.0
    ahrs_sigma: float = 0.0
    range_sigma: float = 0.0
    accel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    @property
    def noise_free(self) -> bool:
        return not (self.accel_sigma or self.gyro_sigma or self.ahrs_sigma or self.range_sigma)


#: gyro 0.02 rad/s and accelerometer 1 m/s^2 standard deviations of a real flight IMU
REAL_SENSOR_NOISE = SensorNoise(accel_sigma=1.0, gyro_sigma=0.02, ahrs_sigma=0.002, range_sigma=0.01)


def _default_camera() -> CameraIntrinsics:
    return CameraIntrinsics(fx=300.0, fy=300.0, cx=160.0, cy=120.0)


@dataclass(frozen=True)
class ScenarioSpec:
    name: str = "custom"
    texture: TextureSpec = field(default_factory=TextureSpec)
    trajectory: str = "figure8"
    trajectory_params: Mapping[str, Any] = field(default_factory=dict)
    duration: float = 30.0
    camera: CameraIntrinsics = field(default_factory=_default_camera)
    width: int = 320
    height: int = 240
    image_rate: float = 80.0
    imu_rate: float = 200.0
    range_rate: float = 80.0
    noise: SensorNoise = field(default_factory=SensorNoise)
    slope_deg: float = 0.0
    extrinsics: Extrinsics = field(default_factory=Extrinsics)

    def __post_init__(self) -> None:
        if not self.duration > 0:
            raise SpecError("duration", "must be positive")
        for name in ("image_rate", "imu_rate", "range_rate"):
            if not getattr(self, name) > 0:
                raise SpecError(name, "must be positive")
        if self.width < 64 or self.height < 64:
            raise SpecError("width", "resolution must be at least 64x64")
        if self.trajectory not in TRAJECTORY_KINDS:
            raise SpecError("trajectory", f"unknown kind {self.trajectory!r}")
        if abs(self.slope_deg) >= 60:
            raise SpecError("slope_deg", "must be below 60 degrees")

    def build_trajectory(self) -> Trajectory:
        try:
            return build_trajectory(self.trajectory, **dict(self.trajectory_params))
        except (TypeError, ValueError) as exc:
            raise SpecError("trajectory", str(exc)) from None

    def with_updates(self, **changes) -> ScenarioSpec:
        return dataclasses.replace(self, **changes)

    @property
    def plane_normal_world(self) -> np.ndarray:
        """Upward unit normal of the ground plane (tilted about world y)."""
        s = math.radians(self.slope_deg)
        return np.array([math.sin(s), 0.0, math.cos(s)])

    @property
    def plane_basis_world(self) -> tuple[np.ndarray, np.ndarray]:
        s = math.radians(self.slope_deg)
        return np.array([math.cos(s), 0.0, -math.sin(s)]), np.array([0.0, 1.0, 0.0])


_FIGURE8 = dict(scale=3.0, period=20.0, altitude=2.0, tilt_deg=4.0, yaw_deg=20.0, heave=0.2)


def _p1() -> ScenarioSpec:
    return ScenarioSpec(name="p1-ideal", trajectory="figure8", trajectory_params=dict(_FIGURE8))


def _textured(name: str, contrast: float) -> ScenarioSpec:
    return dataclasses.replace(_p1(), name=name, texture=TextureSpec(contrast=contrast))


PRESETS = {
    "p1-ideal": _p1,
    "p1-noisy": lambda: dataclasses.replace(_p1(), name="p1-noisy", noise=REAL_SENSOR_NOISE),
    "p2-lowtex": lambda: _textured("p2-lowtex", 0.25),
    "p3-notex": lambda: _textured("p3-notex", 0.0),
    "p5-aggressive": lambda: dataclasses.replace(
        _p1(),
        name="p5-aggressive",
        trajectory_params=dict(_FIGURE8, period=10.0, tilt_deg=10.0, wobble_hz=0.6),
    ),
    "p6-lowhz": lambda: dataclasses.replace(_p1(), name="p6-lowhz", image_rate=20.0),
    "s1-slope": lambda: dataclasses.replace(_p1(), name="s1-slope", slope_deg=5.0),
    "bias": lambda: dataclasses.replace(
        _p1(),
        name="bias",
        duration=60.0,
        trajectory_params=dict(_FIGURE8, tilt_deg=8.0, heave=0.4),
        noise=SensorNoise(accel_bias=(0.2, 0.0, 0.0)),
    ),
    "hover": lambda: ScenarioSpec(name="hover", trajectory="hover", trajectory_params=dict(altitude=2.0), duration=10.0),
}


def preset(name: str) -> ScenarioSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise SpecError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _sub(cls, base, data: Mapping[str, Any], section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise SpecError(f"{section}.{sorted(unknown)[0]}", "unknown field")
    values = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        values[key] = value
    try:
        return dataclasses.replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise SpecError(section, str(exc)) from None


def spec_from_dict(data: Mapping[str, Any]) -> ScenarioSpec:
    """Build a spec from a parsed spec file: an optional ``preset`` plus overrides.

    Nested tables ``texture``, ``noise``, ``camera``, ``trajectory`` and
    ``extrinsics`` override the matching parts of the preset.
    """
    data = dict(data)
    base = preset(data.pop("preset", "p1-ideal"))
    changes: dict[str, Any] = {}
    if "texture" in data:
        changes["texture"] = _sub(TextureSpec, base.texture, data.pop("texture"), "texture")
    if "noise" in data:
        changes["noise"] = _sub(SensorNoise, base.noise, data.pop("noise"), "noise")
    if "camera" in data:
        changes["camera"] = _sub(CameraIntrinsics, base.camera, data.pop("camera"), "camera")
    if "trajectory" in data:
        traj = dict(data.pop("trajectory"))
        kind = traj.pop("kind", base.trajectory)
        params = dict(base.trajectory_params) if kind == base.trajectory else {}
        params.update(traj)
        changes["trajectory"] = kind
        changes["trajectory_params"] = params
    if "extrinsics" in data:
        ex = data.pop("extrinsics")
        try:
            changes["extrinsics"] = Extrinsics(
                r_ci=np.array(ex.get("r_ci", base.extrinsics.r_ci), dtype=np.float64),
                p_ic=np.array(ex.get("p_ic", base.extrinsics.p_ic), dtype=np.float64),
            )
        except ValueError as exc:
            raise SpecError("extrinsics", str(exc)) from None
    scalar = {"name", "duration", "width", "height", "image_rate", "imu_rate", "range_rate", "slope_deg"}
    for key in list(data):
        if key not in scalar:
            raise SpecError(key, "unknown field")
        changes[key] = data.pop(key)
    spec = dataclasses.replace(base, **changes)
    spec.build_trajectory()
    return spec
