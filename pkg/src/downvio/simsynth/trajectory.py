"""Analytic vehicle trajectories with closed-form derivatives."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Axis:
    """``offset + rate * t + sum(a * sin(w * t + phase))`` for ``(a, w, phase)`` in ``terms``."""

    offset: float = 0.0
    rate: float = 0.0
    terms: tuple[tuple[float, float, float], ...] = ()

    def value(self, t):
        out = self.offset + self.rate * t
        for a, w, ph in self.terms:
            out = out + a * np.sin(w * t + ph)
        return out

    def d1(self, t):
        out = self.rate + 0.0 * t
        for a, w, ph in self.terms:
            out = out + a * w * np.cos(w * t + ph)
        return out

    def d2(self, t):
        out = 0.0 * t
        for a, w, ph in self.terms:
            out = out - a * w * w * np.sin(w * t + ph)
        return out


def euler_zyx(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """``Rz(yaw) Ry(pitch) Rx(roll)``, mapping body vectors into the world frame."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


@dataclass(frozen=True)
class KinematicState:
    t: float
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    rotation: np.ndarray  # body -> world
    omega_body: np.ndarray

    @property
    def velocity_body(self) -> np.ndarray:
        return self.rotation.T @ self.velocity


@dataclass(frozen=True)
class Trajectory:
    """World z-up; body (IMU) frame x forward, z up. Attitude is ZYX Euler."""

    x: Axis = field(default_factory=Axis)
    y: Axis = field(default_factory=Axis)
    z: Axis = field(default_factory=lambda: Axis(offset=2.0))
    yaw: Axis = field(default_factory=Axis)
    pitch: Axis = field(default_factory=Axis)
    roll: Axis = field(default_factory=Axis)

    def position(self, t: float) -> np.ndarray:
        return np.array([self.x.value(t), self.y.value(t), self.z.value(t)], dtype=np.float64)

    def velocity(self, t: float) -> np.ndarray:
        return np.array([self.x.d1(t), self.y.d1(t), self.z.d1(t)], dtype=np.float64)

    def acceleration(self, t: float) -> np.ndarray:
        return np.array([self.x.d2(t), self.y.d2(t), self.z.d2(t)], dtype=np.float64)

    def rotation(self, t: float) -> np.ndarray:
        return euler_zyx(self.yaw.value(t), self.pitch.value(t), self.roll.value(t))

    def omega_body(self, t: float) -> np.ndarray:
        r, p = self.roll.value(t), self.pitch.value(t)
        dy, dp, dr = self.yaw.d1(t), self.pitch.d1(t), self.roll.d1(t)
        return np.array(
            [
                dr - dy * math.sin(p),
                dp * math.cos(r) + dy * math.sin(r) * math.cos(p),
                -dp * math.sin(r) + dy * math.cos(r) * math.cos(p),
            ]
        )

    def state(self, t: float) -> KinematicState:
        return KinematicState(
            t=t,
            position=self.position(t),
            velocity=self.velocity(t),
            acceleration=self.acceleration(t),
            rotation=self.rotation(t),
            omega_body=self.omega_body(t),
        )


TRAJECTORY_KINDS = ("hover", "line", "circle", "figure8")


def _tilt_terms(amp_deg: float, freq_hz: float, phase: float = 0.0):
    if amp_deg == 0.0:
        return ()
    return ((math.radians(amp_deg), 2.0 * math.pi * freq_hz, phase),)


def build_trajectory(kind: str, **params) -> Trajectory:
    """Construct a built-in path.

    Common parameters: ``altitude`` (m), ``tilt_deg`` roll/pitch wobble
    amplitude, ``yaw_deg`` yaw sweep amplitude, ``heave`` vertical oscillation
    amplitude (m). Path-specific: ``speed`` (line), ``radius`` and ``period``
    (circle), ``scale`` and ``period`` (figure8).
    """
    altitude = float(params.pop("altitude", 2.0))
    tilt = float(params.pop("tilt_deg", 0.0))
    yaw_amp = float(params.pop("yaw_deg", 0.0))
    heave = float(params.pop("heave", 0.0))
    heave_period = float(params.pop("heave_period", 10.0))
    wobble_hz = float(params.pop("wobble_hz", 0.35))
    yaw_period = float(params.pop("yaw_period", 25.0))

    # cosine phase: the path starts at ``altitude`` with zero vertical velocity
    z = Axis(offset=altitude - heave, terms=((heave, 2 * math.pi / heave_period, math.pi / 2),) if heave else ())
    att = dict(
        roll=Axis(terms=_tilt_terms(tilt, wobble_hz)),
        pitch=Axis(terms=_tilt_terms(tilt, wobble_hz * 1.37, 0.7)),
        yaw=Axis(terms=_tilt_terms(yaw_amp, 1.0 / yaw_period)),
    )
    if kind == "hover":
        x, y = Axis(), Axis()
    elif kind == "line":
        speed = float(params.pop("speed", 1.0))
        heading = math.radians(float(params.pop("heading_deg", 0.0)))
        x = Axis(rate=speed * math.cos(heading))
        y = Axis(rate=speed * math.sin(heading))
    elif kind == "circle":
        radius = float(params.pop("radius", 2.0))
        w = 2 * math.pi / float(params.pop("period", 15.0))
        x = Axis(terms=((radius, w, math.pi / 2),), offset=-radius)
        y = Axis(terms=((radius, w, 0.0),))
    elif kind == "figure8":
        scale = float(params.pop("scale", 3.0))
        w = 2 * math.pi / float(params.pop("period", 20.0))
        x = Axis(terms=((scale, w, 0.0),))
        y = Axis(terms=((0.5 * scale, 2 * w, 0.0),))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}; expected one of {TRAJECTORY_KINDS}")
    if params:
        raise ValueError(f"unknown trajectory parameters: {sorted(params)}")
    return Trajectory(x=x, y=y, z=z, **att)
