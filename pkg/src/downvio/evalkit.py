"""Dead-reckoning and trajectory error metrics (RPE, relative ATE, failure rate)."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from downvio.geometry import matrix_to_rodrigues

log = logging.getLogger(__name__)


class PairingError(ValueError):
    """Timestamps of two series cannot be matched within tolerance."""


class SpanError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TrajectoryTrack:
    """Timestamped poses: ``rotations`` map body vectors to world, velocities are body-frame."""

    times: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray
    velocities: np.ndarray

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=np.float64)
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("track timestamps must be strictly increasing")
        n = times.size
        object.__setattr__(self, "times", times)
        for name, shape in (("positions", (n, 3)), ("rotations", (n, 3, 3)), ("velocities", (n, 3))):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.times.size

    def subset(self, idx) -> TrajectoryTrack:
        return TrajectoryTrack(self.times[idx], self.positions[idx], self.rotations[idx], self.velocities[idx])

    def transformed(self, rot: np.ndarray, trans: np.ndarray) -> TrajectoryTrack:
        """Apply a world-frame rigid transform ``x -> rot x + trans``."""
        return TrajectoryTrack(
            self.times,
            self.positions @ rot.T + trans,
            np.einsum("ij,njk->nik", rot, self.rotations),
            self.velocities,
        )


@dataclass(frozen=True)
class MetricReport:
    rpe_trans_rmse: float
    rpe_rot_rmse: float
    ate_xy_rmse: float
    relative_ate: float
    velocity_rmse: float
    failure_rate: float
    path_length_xy: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def table(self) -> str:
        units = {
            "rpe_trans_rmse": "m",
            "rpe_rot_rmse": "rad",
            "ate_xy_rmse": "m",
            "relative_ate": "",
            "velocity_rmse": "m/s",
            "failure_rate": "",
            "path_length_xy": "m",
        }
        width = max(map(len, units))
        return "\n".join(f"{k:<{width}}  {v:12.6f} {units[k]}" for k, v in self.as_dict().items())


def default_tolerance(times: np.ndarray) -> float:
    """Half the median sampling period."""
    if times.size < 2:
        return math.inf
    return 0.5 * float(np.median(np.diff(times)))


def pair_indices(ref_times: np.ndarray, other_times: np.ndarray, tol: float | None = None) -> np.ndarray:
    """Index into ``other_times`` of the nearest sample for every reference time.

    Entries that have no partner within ``tol`` are -1.
    """
    other_times = np.asarray(other_times, dtype=np.float64)
    if tol is None:
        tol = default_tolerance(other_times)
    idx = np.searchsorted(other_times, ref_times)
    idx = np.clip(idx, 1, max(other_times.size - 1, 1))
    left = np.clip(idx - 1, 0, None)
    right = np.minimum(idx, other_times.size - 1)
    pick = np.where(np.abs(other_times[left] - ref_times) <= np.abs(other_times[right] - ref_times), left, right)
    ok = np.abs(other_times[pick] - ref_times) <= tol + 1e-12
    return np.where(ok, pick, -1)


def dead_reckon(
    times: np.ndarray,
    velocities_body: np.ndarray,
    attitude_times: np.ndarray,
    attitudes: np.ndarray,
    initial_position=(0.0, 0.0, 0.0),
    tol: float | None = None,
) -> TrajectoryTrack:
    """Integrate body velocities, rotated to world by the paired attitude, with the trapezoid rule.

    Raises
    ------
    PairingError
        If some velocity sample has no attitude within ``tol`` (default: half
        the velocity sampling period).
    """
    times = np.asarray(times, dtype=np.float64)
    vb = np.asarray(velocities_body, dtype=np.float64)
    if tol is None:
        tol = default_tolerance(times)
    idx = pair_indices(times, np.asarray(attitude_times, dtype=np.float64), tol)
    if np.any(idx < 0):
        raise PairingError(f"{int(np.sum(idx < 0))} velocity samples have no attitude within {tol:.4g} s")
    rots = np.asarray(attitudes, dtype=np.float64)[idx]
    vw = np.einsum("nij,nj->ni", rots, vb)
    pos = np.empty_like(vw)
    pos[0] = initial_position
    if times.size > 1:
        steps = 0.5 * (vw[1:] + vw[:-1]) * np.diff(times)[:, None]
        pos[1:] = pos[0] + np.cumsum(steps, axis=0)
    return TrajectoryTrack(times, pos, rots, vb)


def _paired(estimate: TrajectoryTrack, truth: TrajectoryTrack) -> tuple[TrajectoryTrack, TrajectoryTrack]:
    idx = pair_indices(estimate.times, truth.times, default_tolerance(estimate.times))
    keep = idx >= 0
    return estimate.subset(keep), truth.subset(idx[keep])


def _rotation_angle(rot: np.ndarray) -> float:
    return float(np.linalg.norm(matrix_to_rodrigues(rot)))


def rpe(estimate: TrajectoryTrack, truth: TrajectoryTrack, interval: float = 1.0) -> tuple[float, float]:
    """Relative pose error RMSE (translation m, rotation rad) over a fixed interval."""
    est, gt = _paired(estimate, truth)
    if est.times.size < 2 or est.times[-1] - est.times[0] < 2 * interval - 1e-9:
        raise SpanError(f"overlap shorter than twice the {interval} s interval")
    tol = default_tolerance(est.times)
    ends = pair_indices(est.times + interval, est.times, tol)
    starts = np.flatnonzero(ends >= 0)
    starts = starts[est.times[ends[starts]] > est.times[starts]]
    trans_err = []
    rot_err = []
    for i in starts:
        j = ends[i]
        d_est_r = est.rotations[i].T @ est.rotations[j]
        d_est_t = est.rotations[i].T @ (est.positions[j] - est.positions[i])
        d_gt_r = gt.rotations[i].T @ gt.rotations[j]
        d_gt_t = gt.rotations[i].T @ (gt.positions[j] - gt.positions[i])
        err_r = d_gt_r.T @ d_est_r
        err_t = d_gt_r.T @ (d_est_t - d_gt_t)
        trans_err.append(err_t @ err_t)
        rot_err.append(_rotation_angle(err_r) ** 2)
    if not trans_err:
        raise SpanError("no sample pair spans the interval")
    return math.sqrt(float(np.mean(trans_err))), math.sqrt(float(np.mean(rot_err)))


def align_xy(est_xy: np.ndarray, gt_xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation about z and xy translation taking ``est_xy`` onto ``gt_xy``."""
    ec = est_xy - est_xy.mean(axis=0)
    gc = gt_xy - gt_xy.mean(axis=0)
    dot = float(np.sum(gc[:, 0] * ec[:, 0] + gc[:, 1] * ec[:, 1]))
    crs = float(np.sum(gc[:, 1] * ec[:, 0] - gc[:, 0] * ec[:, 1]))
    th = math.atan2(crs, dot)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    trans = gt_xy.mean(axis=0) - rot @ est_xy.mean(axis=0)
    return rot, trans


def path_length_xy(truth: TrajectoryTrack, step: float = 1.0) -> float:
    """Horizontal path length with the track sampled every ``step`` seconds."""
    marks = np.arange(truth.times[0], truth.times[-1] + 1e-9, step)
    idx = pair_indices(marks, truth.times, np.inf)
    idx = idx[np.concatenate([[True], np.diff(idx) != 0])]
    xy = truth.positions[idx, :2]
    return float(np.sum(np.linalg.norm(np.diff(xy, axis=0), axis=1)))


def ate_xy(estimate: TrajectoryTrack, truth: TrajectoryTrack) -> float:
    """Horizontal ATE RMSE after rotation about z and xy translation."""
    est, gt = _paired(estimate, truth)
    if est.times.size < 2:
        raise SpanError("fewer than two overlapping samples")
    rot, trans = align_xy(est.positions[:, :2], gt.positions[:, :2])
    aligned = est.positions[:, :2] @ rot.T + trans
    return math.sqrt(float(np.mean(np.sum((aligned - gt.positions[:, :2]) ** 2, axis=1))))


def relative_ate(estimate: TrajectoryTrack, truth: TrajectoryTrack) -> tuple[float, float]:
    """Horizontal ATE RMSE after 4-DoF alignment, and that RMSE over the true path length."""
    ate = ate_xy(estimate, truth)
    length = path_length_xy(truth)
    if length <= 0.0:
        raise UndefinedMetricError("true horizontal path length is zero")
    return ate, ate / length


def velocity_rmse(estimate: TrajectoryTrack, truth: TrajectoryTrack) -> float:
    est, gt = _paired(estimate, truth)
    err = est.velocities - gt.velocities
    return math.sqrt(float(np.mean(np.sum(err * err, axis=1))))


def _is_failure(item) -> bool:
    if isinstance(item, (bool, np.bool_)):
        return not item
    if not getattr(item, "converged", False):
        return True
    return getattr(item, "accepted", True) is False


def failure_rate(diagnostics: Iterable) -> float:
    """Share of frames that failed to converge or whose measurement was rejected.

    Items are alignment results / diagnostic rows (``converged`` and optional
    ``accepted`` attributes) or plain success booleans.
    """
    items = list(diagnostics)
    if not items:
        raise ValueError("need at least one frame")
    return sum(map(_is_failure, items)) / len(items)


def evaluate(
    estimate: TrajectoryTrack,
    truth: TrajectoryTrack,
    diagnostics: Iterable = (),
    interval: float = 1.0,
) -> MetricReport:
    """All metrics at once.

    Metrics that are undefined for the given tracks are reported as NaN with a
    warning: RPE when the overlap is shorter than twice ``interval``, relative
    ATE when the true path has no horizontal length.
    """
    diagnostics = list(diagnostics)
    try:
        trans, rot = rpe(estimate, truth, interval)
    except SpanError as exc:
        log.warning("RPE undefined: %s", exc)
        trans, rot = math.nan, math.nan
    try:
        ate, rel = relative_ate(estimate, truth)
    except UndefinedMetricError:
        log.warning("true path has no horizontal length; relative ATE undefined")
        ate, rel = ate_xy(estimate, truth), math.nan
    return MetricReport(
        rpe_trans_rmse=trans,
        rpe_rot_rmse=rot,
        ate_xy_rmse=ate,
        relative_ate=rel,
        velocity_rmse=velocity_rmse(estimate, truth),
        failure_rate=failure_rate(diagnostics) if diagnostics else 0.0,
        path_length_xy=path_length_xy(truth),
    )
