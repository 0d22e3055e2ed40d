"""Discrete-time EKF fusing unscaled visual translation with a rangefinder.

State ``x = [v (camera-frame velocity, 3), d (plane distance), b (IMU-frame
accelerometer bias, 3)]``. The filter predicts with raw IMU samples and
corrects with ``z = [t_m / tau, l_m * n_z]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from downvio.geometry import normal_vector_from_attitude, skew

log = logging.getLogger(__name__)

GRAVITY = 9.81
D_MIN = 0.01
#: chi-square gate for a 4-dof innovation (three-sigma coverage)
DEFAULT_GATE = 16.27
#: distance rate is ``-v . n``: n points at the ground, so moving along n closes the gap
D_RATE_SIGN = -1.0

_PSD_TOL = 1e-10


class StreamError(ValueError):
    """Input streams are not sorted by timestamp."""


@dataclass(frozen=True)
class ImuSample:
    f_m: np.ndarray
    omega_m: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "f_m", np.asarray(self.f_m, dtype=np.float64))
        object.__setattr__(self, "omega_m", np.asarray(self.omega_m, dtype=np.float64))


@dataclass(frozen=True)
class AhrsAttitude:
    """IMU orientation: ``rotation`` maps IMU-frame vectors to world coordinates."""

    rotation: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
            raise ValueError("attitude matrix is not orthonormal")
        object.__setattr__(self, "rotation", rot)

    def gravity_imu(self, g0: float = GRAVITY) -> np.ndarray:
        return self.rotation.T @ np.array([0.0, 0.0, -g0])


@dataclass(frozen=True)
class Extrinsics:
    """Camera mounting: ``r_ci`` maps IMU vectors into the camera frame,
    ``p_ic`` is the IMU-to-camera lever arm in the IMU frame (m)."""

    r_ci: np.ndarray = field(default_factory=lambda: np.diag([1.0, -1.0, -1.0]))
    p_ic: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        r = np.asarray(self.r_ci, dtype=np.float64)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("r_ci is not orthonormal")
        object.__setattr__(self, "r_ci", r)
        object.__setattr__(self, "p_ic", np.asarray(self.p_ic, dtype=np.float64))


@dataclass(frozen=True)
class FusionMeasurement:
    """One frame's worth of measurements. ``t_m`` or ``l_m`` may be ``None``
    when the tracker or the rangefinder produced nothing for the frame."""

    t_m: np.ndarray | None
    l_m: float | None
    n_z: float
    tau: float
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.l_m is not None and self.l_m <= 0:
            raise ValueError("range must be positive")
        if abs(self.n_z) > 1.0 + 1e-12:
            raise ValueError("n_z must lie in [-1, 1]")
        if self.t_m is not None:
            object.__setattr__(self, "t_m", np.asarray(self.t_m, dtype=np.float64))


@dataclass(frozen=True)
class NoiseConfig:
    cov_f: np.ndarray
    cov_omega: np.ndarray
    cov_z: np.ndarray

    def __post_init__(self) -> None:
        for name, shape in (("cov_f", 3), ("cov_omega", 3), ("cov_z", 4)):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.shape != (shape, shape):
                raise ValueError(f"{name} must be {shape}x{shape}")
            if not np.allclose(m, m.T) or np.linalg.eigvalsh(m).min() < -_PSD_TOL:
                raise ValueError(f"{name} must be symmetric positive semidefinite")
            object.__setattr__(self, name, m)

    @classmethod
    def isotropic(
        cls,
        accel_sigma: float,
        gyro_sigma: float,
        flow_sigma: float,
        range_sigma: float,
    ) -> NoiseConfig:
        """``flow_sigma`` is the std of ``t_m / tau`` (1/s), ``range_sigma`` of ``l_m n_z`` (m)."""
        return cls(
            cov_f=np.eye(3) * accel_sigma**2,
            cov_omega=np.eye(3) * gyro_sigma**2,
            cov_z=np.diag([flow_sigma**2] * 3 + [range_sigma**2]),
        )


@dataclass(frozen=True)
class EkfState:
    v: np.ndarray
    d: float
    b: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        v = np.asarray(self.v, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if not (np.isfinite(v).all() and np.isfinite(b).all() and math.isfinite(self.d)):
            raise ValueError("state must be finite")
        if self.d <= 0:
            raise ValueError("plane distance must be positive")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "d", float(self.d))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.v, [self.d], self.b])

    @classmethod
    def from_vector(cls, x) -> EkfState:
        x = np.asarray(x, dtype=np.float64)
        return cls(v=x[:3].copy(), d=float(x[3]), b=x[4:7].copy())


def initial_covariance(sigma_v: float = 0.5, sigma_d: float = 0.1, sigma_b: float = 0.1) -> np.ndarray:
    return np.diag([sigma_v**2] * 3 + [sigma_d**2] + [sigma_b**2] * 3)


def condition_covariance(cov: np.ndarray) -> np.ndarray:
    """Symmetrise and floor any eigenvalue that round-off pushed below zero."""
    cov = 0.5 * (cov + cov.T)
    w, q = np.linalg.eigh(cov)
    if w.min() < -_PSD_TOL * max(1.0, w.max()):
        log.warning("covariance lost positive semidefiniteness (min eig %.3g)", w.min())
    if w.min() < 0.0:
        cov = (q * np.maximum(w, 0.0)) @ q.T
        cov = 0.5 * (cov + cov.T)
    return cov


def velocity_derivative(
    v: np.ndarray,
    b: np.ndarray,
    f_m: np.ndarray,
    omega_m: np.ndarray,
    g_i: np.ndarray,
    extr: Extrinsics,
) -> np.ndarray:
    """Rate of change of the camera-frame velocity.

    ``R_ci (f_m - b + g + [w]x^2 p_ic) - [R_ci w]x v``; the angular
    acceleration term of the exact kinematics is neglected.
    """
    r = extr.r_ci
    w = omega_m
    centripetal = np.cross(w, np.cross(w, extr.p_ic))
    return r @ (f_m - b + g_i + centripetal) - np.cross(r @ w, v)


def propagate_mean(
    x: np.ndarray,
    f_m: np.ndarray,
    omega_m: np.ndarray,
    g_i: np.ndarray,
    n: np.ndarray,
    extr: Extrinsics,
    tau: float,
) -> np.ndarray:
    v, d, b = x[:3], x[3], x[4:7]
    out = x.copy()
    out[:3] = v + tau * velocity_derivative(v, b, f_m, omega_m, g_i, extr)
    out[3] = d + D_RATE_SIGN * tau * (v @ n)
    return out


def transition_jacobians(
    x: np.ndarray,
    omega_m: np.ndarray,
    n: np.ndarray,
    extr: Extrinsics,
    tau: float,
) -> tuple[np.ndarray, np.ndarray]:
    """State Jacobian ``G`` (7x7) and input Jacobian ``V`` (7x6, inputs ``[f_m; omega_m]``)."""
    r = extr.r_ci
    p = extr.p_ic
    w = omega_m
    g = np.eye(7)
    g[:3, :3] -= tau * skew(r @ w)
    g[:3, 4:7] = -tau * r
    g[3, :3] = D_RATE_SIGN * tau * n

    m = (w @ p) * np.eye(3) + np.outer(w, p) - 2.0 * np.outer(p, w)
    v_in = np.zeros((7, 6))
    v_in[:3, :3] = tau * r
    v_in[:3, 3:] = tau * (r @ m + skew(x[:3]) @ r)
    return g, v_in


def predict(
    state: EkfState,
    cov: np.ndarray,
    imu: ImuSample,
    attitude: AhrsAttitude,
    n,
    extr: Extrinsics,
    tau: float,
    noise: NoiseConfig,
) -> tuple[EkfState, np.ndarray, bool]:
    """One prediction step of length ``tau``.

    ``n`` is the camera-frame plane normal (vector or :class:`PlaneNormal`).
    Returns the predicted state, covariance and a flag that is ``True`` when
    the predicted distance had to be clamped to ``D_MIN``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    nv = n.vector if hasattr(n, "vector") else np.asarray(n, dtype=np.float64)
    x = state.to_vector()
    x_new = propagate_mean(x, imu.f_m, imu.omega_m, attitude.gravity_imu(), nv, extr, tau)
    g, v_in = transition_jacobians(x, imu.omega_m, nv, extr, tau)
    q = np.zeros((6, 6))
    q[:3, :3] = noise.cov_f
    q[3:, 3:] = noise.cov_omega
    cov_new = condition_covariance(g @ cov @ g.T + v_in @ q @ v_in.T)
    clamped = x_new[3] <= 0.0
    if clamped:
        log.debug("predicted plane distance %.4g m clamped to %.2g m", x_new[3], D_MIN)
        x_new[3] = D_MIN
    return EkfState.from_vector(x_new), cov_new, bool(clamped)


def chi2_gate(innovation, innovation_cov, threshold: float = DEFAULT_GATE) -> bool:
    """Accept iff the squared Mahalanobis distance is strictly below ``threshold``."""
    innovation = np.asarray(innovation, dtype=np.float64)
    m2 = float(innovation @ np.linalg.solve(innovation_cov, innovation))
    return m2 < threshold


@dataclass(frozen=True)
class UpdateResult:
    state: EkfState
    cov: np.ndarray
    innovation: np.ndarray
    innovation_cov: np.ndarray | None
    accepted: bool


def measurement_model(state: EkfState, with_range: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Predicted measurement ``[v/d; d]`` and its Jacobian with respect to the state."""
    v, d = state.v, state.d
    z = np.concatenate([v / d, [d]])
    jac = np.zeros((4, 7))
    jac[:3, :3] = np.eye(3) / d
    jac[:3, 3] = -v / d**2
    jac[3, 3] = 1.0
    if with_range:
        return z, jac
    return z[:3], jac[:3]


def update(
    state: EkfState,
    cov: np.ndarray,
    meas: FusionMeasurement,
    noise: NoiseConfig,
    gate_threshold: float | None = None,
) -> UpdateResult:
    """EKF correction with the visual flow ``t_m / tau`` and the range ``l_m n_z``.

    Rows whose measurement is absent are dropped from the model. When
    ``gate_threshold`` is given, the chi-square gate can reject the update.
    A singular innovation covariance also rejects it.
    """
    rows = []
    z_parts = []
    if meas.t_m is not None:
        rows += [0, 1, 2]
        z_parts.append(meas.t_m / meas.tau)
    if meas.l_m is not None:
        rows.append(3)
        z_parts.append([meas.l_m * meas.n_z])
    if not rows:
        return UpdateResult(state, cov, np.zeros(0), None, False)

    z_hat, jac = measurement_model(state)
    z_hat, jac = z_hat[rows], jac[rows]
    r = noise.cov_z[np.ix_(rows, rows)]
    innovation = np.concatenate(z_parts) - z_hat
    s = jac @ cov @ jac.T + r
    try:
        chol = np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        log.warning("innovation covariance not positive definite; measurement rejected")
        return UpdateResult(state, cov, innovation, s, False)

    if gate_threshold is not None:
        dof_threshold = gate_threshold if len(rows) == 4 else _scaled_gate(gate_threshold, len(rows))
        if not chi2_gate(innovation, s, dof_threshold):
            return UpdateResult(state, cov, innovation, s, False)

    # K = cov J^T S^-1 via the Cholesky factor
    pjt = cov @ jac.T
    gain = np.linalg.solve(chol.T, np.linalg.solve(chol, pjt.T)).T
    x_new = state.to_vector() + gain @ innovation
    cov_new = condition_covariance((np.eye(7) - gain @ jac) @ cov)
    if x_new[3] <= 0.0:
        x_new[3] = D_MIN
    return UpdateResult(EkfState.from_vector(x_new), cov_new, innovation, s, True)


def _scaled_gate(threshold4: float, dof: int) -> float:
    from scipy.stats import chi2

    return float(chi2.ppf(chi2.cdf(threshold4, 4), dof))


def camera_to_body_velocity(v_c: np.ndarray, omega_i: np.ndarray, extr: Extrinsics) -> np.ndarray:
    """Velocity of the IMU origin in the IMU frame from the camera-frame camera velocity."""
    return extr.r_ci.T @ v_c - np.cross(omega_i, extr.p_ic)


@dataclass(frozen=True)
class FilterOutput:
    timestamp: float
    state: EkfState
    cov: np.ndarray
    accepted: bool
    innovation: np.ndarray | None = None


class VelocityFilter:
    """Sequential EKF driver: predict at IMU rate, correct at image rate.

    Not thread-safe; use one instance per stream.
    """

    def __init__(
        self,
        state: EkfState,
        cov: np.ndarray,
        noise: NoiseConfig,
        extr: Extrinsics,
        t0: float,
        gate_threshold: float | None = DEFAULT_GATE,
    ) -> None:
        self.state = state
        self.cov = np.array(cov, dtype=np.float64)
        self.noise = noise
        self.extr = extr
        self.time = float(t0)
        self.gate_threshold = gate_threshold
        self.clamp_count = 0

    def propagate(self, imu: ImuSample, attitude: AhrsAttitude, until: float) -> None:
        """Hold ``imu`` constant from the current time to ``until``."""
        tau = until - self.time
        if tau < 0:
            raise StreamError(f"cannot propagate backwards ({self.time} -> {until})")
        if tau == 0:
            return
        n = normal_vector_from_attitude(attitude.rotation, self.extr.r_ci)
        self.state, self.cov, clamped = predict(
            self.state, self.cov, imu, attitude, n, self.extr, tau, self.noise
        )
        if clamped and not self.clamp_count:
            log.warning("plane distance clamped to %.2g m at t=%.3f s; further clamps logged at debug level",
                        D_MIN, until)
        self.clamp_count += clamped
        self.time = until

    def correct(self, meas: FusionMeasurement) -> UpdateResult:
        res = update(self.state, self.cov, meas, self.noise, self.gate_threshold)
        if res.accepted:
            self.state, self.cov = res.state, res.cov
        return res


def _check_sorted(times: np.ndarray, name: str) -> None:
    if times.size > 1 and np.any(np.diff(times) <= 0):
        raise StreamError(f"{name} timestamps are not strictly increasing")


def nearest_index(times: np.ndarray, t: float) -> int:
    i = int(np.searchsorted(times, t))
    if i == 0:
        return 0
    if i >= times.size:
        return times.size - 1
    return i if times[i] - t < t - times[i - 1] else i - 1


class StreamPropagator:
    """Walks an IMU/AHRS stream and feeds a :class:`VelocityFilter` up to a time."""

    def __init__(self, filt: VelocityFilter, imu: Sequence[ImuSample], ahrs: Sequence[AhrsAttitude]):
        self.filt = filt
        self.imu = list(imu)
        self.ahrs = list(ahrs)
        self.imu_times = np.array([s.timestamp for s in self.imu])
        self.ahrs_times = np.array([a.timestamp for a in self.ahrs])
        _check_sorted(self.imu_times, "IMU")
        _check_sorted(self.ahrs_times, "AHRS")
        # index of the IMU sample currently held
        self.cursor = max(0, int(np.searchsorted(self.imu_times, filt.time, side="right")) - 1)

    def attitude_at(self, t: float) -> AhrsAttitude:
        return self.ahrs[nearest_index(self.ahrs_times, t)]

    def advance_to(self, t: float) -> None:
        filt = self.filt
        while self.cursor + 1 < len(self.imu) and self.imu_times[self.cursor + 1] <= t:
            nxt = self.imu_times[self.cursor + 1]
            sample = self.imu[self.cursor]
            filt.propagate(sample, self.attitude_at(sample.timestamp), nxt)
            self.cursor += 1
        if t > filt.time and self.imu:
            sample = self.imu[self.cursor]
            filt.propagate(sample, self.attitude_at(sample.timestamp), t)


def run_filter(
    imu_stream: Sequence[ImuSample],
    ahrs_stream: Sequence[AhrsAttitude],
    measurement_stream: Iterable[FusionMeasurement],
    init: EkfState,
    cov0: np.ndarray,
    noise: NoiseConfig,
    extr: Extrinsics,
    t0: float | None = None,
    gate_threshold: float | None = DEFAULT_GATE,
) -> list[FilterOutput]:
    """Run the filter over pre-computed measurements.

    The filter predicts through every IMU sample (zero-order hold) and applies
    each measurement at its timestamp, emitting the posterior there.
    Measurements with neither ``t_m`` nor ``l_m`` just emit the prediction.
    """
    measurements = list(measurement_stream)
    _check_sorted(np.array([m.timestamp for m in measurements]), "measurement")
    if t0 is None:
        t0 = imu_stream[0].timestamp if len(imu_stream) else 0.0
    filt = VelocityFilter(init, cov0, noise, extr, t0, gate_threshold)
    walker = StreamPropagator(filt, imu_stream, ahrs_stream)
    out = []
    for meas in measurements:
        walker.advance_to(meas.timestamp)
        res = filt.correct(meas)
        out.append(FilterOutput(meas.timestamp, filt.state, filt.cov.copy(), res.accepted, res.innovation))
    return out
