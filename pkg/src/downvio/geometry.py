"""Pinhole intrinsics, rotation and plane-normal parameterisations, homography warps.

Conventions used throughout the package:

* camera frame: x right, y down, z along the optical axis;
* a homography maps pixels of the *current* image into the *previous* one,
  ``x_prev ~ H x_curr`` with ``H = K (R + t n^T) K^-1`` where ``R`` and the
  unscaled translation ``t = t0 / d`` take current-camera coordinates into
  previous-camera coordinates, and ``n``, ``d`` are the ground-plane normal
  and distance expressed in the current camera frame;
* ``n`` points from the camera towards the ground, so ``d > 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.spatial.transform import Rotation

if TYPE_CHECKING:
    from downvio.fusion import AhrsAttitude, Extrinsics

_SMALL_ANGLE = 1e-8
_DEGENERATE_DET = 1e-12

WORLD_DOWN = np.array([0.0, 0.0, -1.0])


class DegenerateWarpError(ValueError):
    """The homography is (numerically) singular."""


class PointAtInfinityError(ValueError):
    pass


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def scaled(self, factor: float) -> CameraIntrinsics:
        """Intrinsics for an image resampled by ``factor`` (0.5 = half size).

        Uses the pixel-centre convention of 2x2 box downsampling.
        """
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
        )


def wrap_rotvec(r) -> np.ndarray:
    """Return the equivalent rotation vector with magnitude below pi."""
    r = np.asarray(r, dtype=np.float64)
    angle = float(np.linalg.norm(r))
    if angle < math.pi:
        return r.copy()
    axis = r / angle
    wrapped = math.fmod(angle, 2.0 * math.pi)
    if wrapped >= math.pi:
        wrapped -= 2.0 * math.pi
    return axis * wrapped


def rodrigues_to_matrix(r) -> np.ndarray:
    """Rotation matrix of an axis-angle vector via the Rodrigues formula."""
    r = np.asarray(r, dtype=np.float64)
    theta = float(np.linalg.norm(r))
    if theta < _SMALL_ANGLE:
        return np.eye(3) + skew(r)
    k = skew(r / theta)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def rodrigues_derivatives(r) -> np.ndarray:
    """Partial derivatives ``dR/dr_i`` stacked as a ``(3, 3, 3)`` array.

    Uses the closed form of Gallego and Yezzi (2015); near zero the
    second-order expansion of the exponential map is used instead.
    """
    r = np.asarray(r, dtype=np.float64)
    theta2 = float(r @ r)
    out = np.empty((3, 3, 3))
    if theta2 < 1e-12:
        sr = skew(r)
        for i in range(3):
            ei = skew(np.eye(3)[i])
            out[i] = ei + 0.5 * (ei @ sr + sr @ ei)
        return out
    R = rodrigues_to_matrix(r)
    sr = skew(r)
    i_minus_r = np.eye(3) - R
    for i in range(3):
        cross = np.cross(r, i_minus_r[:, i])
        out[i] = (r[i] * sr + skew(cross)) @ R / theta2
    return out


def matrix_to_rodrigues(rot) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(rot, dtype=np.float64)).as_rotvec()


@dataclass(frozen=True)
class PlaneNormal:
    """Unit plane normal as azimuth ``theta`` and elevation ``phi``.

    ``n = (cos phi cos theta, cos phi sin theta, sin phi)``.
    """

    theta: float
    phi: float

    @property
    def vector(self) -> np.ndarray:
        cp = math.cos(self.phi)
        return np.array([cp * math.cos(self.theta), cp * math.sin(self.theta), math.sin(self.phi)])

    @classmethod
    def from_vector(cls, n) -> PlaneNormal:
        n = np.asarray(n, dtype=np.float64)
        n = n / np.linalg.norm(n)
        phi = math.asin(max(-1.0, min(1.0, float(n[2]))))
        theta = math.atan2(float(n[1]), float(n[0]))
        return cls(theta=theta, phi=phi)


NADIR = PlaneNormal(theta=0.0, phi=math.pi / 2)


@dataclass(frozen=True)
class WarpParams:
    """Unscaled translation ``t`` and Rodrigues rotation ``r`` (current -> previous)."""

    t: tuple[float, float, float] = (0.0, 0.0, 0.0)
    r: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        t = tuple(float(v) for v in self.t)
        r = tuple(float(v) for v in wrap_rotvec(np.asarray(self.r, dtype=np.float64)))
        if not all(math.isfinite(v) for v in t + r):
            raise ValueError("warp parameters must be finite")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "r", r)

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.t + self.r)

    @classmethod
    def from_vector(cls, p) -> WarpParams:
        p = np.asarray(p, dtype=np.float64).ravel()
        return cls(t=tuple(p[:3]), r=tuple(p[3:6]))

    def inverse(self, n: PlaneNormal) -> tuple[WarpParams, PlaneNormal]:
        """Parameters and normal of the reverse warp (previous -> current).

        With ``X_prev = R X_curr + t (n . X_curr)`` for points on the plane,
        the reverse map is ``X_curr = R' X_prev + t' (n' . X_prev)`` with
        ``R' = R^T``, ``n' = (R n) / s``, ``t' = -R^T t / s`` and
        ``s = 1 + n . R^T t`` rescaling the plane distance.
        """
        rot = rodrigues_to_matrix(self.r)
        t = np.asarray(self.t)
        nv = n.vector
        s = 1.0 + nv @ (rot.T @ t)
        n_prev = rot @ nv
        t_inv = -(rot.T @ t) / s
        r_inv = matrix_to_rodrigues(rot.T)
        return WarpParams(t=tuple(t_inv), r=tuple(r_inv)), PlaneNormal.from_vector(n_prev)


def homography_matrix(k: CameraIntrinsics, p, n) -> np.ndarray:
    """Unnormalised ``K (R + t n^T) K^-1`` for a raw 6-vector and unit normal."""
    p = np.asarray(p, dtype=np.float64)
    return k.matrix @ (rodrigues_to_matrix(p[3:6]) + np.outer(p[:3], n)) @ k.inverse


def build_homography(k: CameraIntrinsics, p: WarpParams, n: PlaneNormal) -> np.ndarray:
    """Plane-induced homography, scaled so that ``h[2, 2] == 1``.

    Raises
    ------
    DegenerateWarpError
        If the matrix is singular or cannot be normalised.
    """
    h = homography_matrix(k, p.vector, n.vector)
    if abs(h[2, 2]) < _DEGENERATE_DET:
        raise DegenerateWarpError("h[2,2] vanishes; cannot normalise")
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) < _DEGENERATE_DET:
        raise DegenerateWarpError("homography is singular")
    return h


def warp_point(h: np.ndarray, x: float, y: float) -> tuple[float, float]:
    u = h @ np.array([x, y, 1.0])
    if abs(u[2]) < _DEGENERATE_DET:
        raise PointAtInfinityError(f"({x}, {y}) maps to infinity")
    return float(u[0] / u[2]), float(u[1] / u[2])


def warp_points(h: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w = h[2, 0] * xs + h[2, 1] * ys + h[2, 2]
    if np.any(np.abs(w) < _DEGENERATE_DET):
        raise PointAtInfinityError("a point maps to infinity")
    return (h[0, 0] * xs + h[0, 1] * ys + h[0, 2]) / w, (h[1, 0] * xs + h[1, 1] * ys + h[1, 2]) / w


def normal_vector_from_attitude(r_wi: np.ndarray, r_ci: np.ndarray) -> np.ndarray:
    return r_ci @ (r_wi.T @ WORLD_DOWN)


def normal_from_attitude(attitude: AhrsAttitude, extr: Extrinsics) -> PlaneNormal:
    """Normal of a horizontal ground plane in the camera frame.

    The world down axis is rotated into the IMU frame by the attitude and then
    into the camera frame by the extrinsic rotation.
    """
    return PlaneNormal.from_vector(normal_vector_from_attitude(attitude.rotation, extr.r_ci))
