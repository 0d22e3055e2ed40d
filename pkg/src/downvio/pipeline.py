"""Run configuration and the frame-by-frame tracker: align, filter, dead-reckon, score."""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import tomli

from downvio.align import AlignConfig, AlignResult, gauss_newton_align, prior_from_imu
from downvio.evalkit import MetricReport, TrajectoryTrack, dead_reckon, evaluate, pair_indices
from downvio.fusion import (
    DEFAULT_GATE,
    EkfState,
    Extrinsics,
    FusionMeasurement,
    NoiseConfig,
    StreamPropagator,
    VelocityFilter,
    camera_to_body_velocity,
    initial_covariance,
    nearest_index,
)
from downvio.geometry import normal_from_attitude
from downvio.simsynth.dataset import Dataset, DatasetError, load_dataset


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


@dataclass(frozen=True)
class FilterNoise:
    """Process and measurement standard deviations used to build a :class:`NoiseConfig`."""

    accel_sigma: float = 0.5
    gyro_sigma: float = 0.02
    flow_sigma: float = 0.1
    range_sigma: float = 0.02

    def to_config(self) -> NoiseConfig:
        return NoiseConfig.isotropic(self.accel_sigma, self.gyro_sigma, self.flow_sigma, self.range_sigma)


@dataclass(frozen=True)
class EkfSettings:
    sigma_v: float = 0.5
    sigma_d: float = 0.1
    sigma_b: float = 0.1
    estimate_bias: bool = True
    gate: float | None = DEFAULT_GATE

    def covariance(self) -> np.ndarray:
        return initial_covariance(self.sigma_v, self.sigma_d, self.sigma_b if self.estimate_bias else 0.0)


@dataclass(frozen=True)
class RunConfig:
    dataset: Path
    output: Path = Path("out")
    align: AlignConfig = field(default_factory=AlignConfig)
    noise: FilterNoise = field(default_factory=FilterNoise)
    ekf: EkfSettings = field(default_factory=EkfSettings)
    extrinsics: Extrinsics | None = None  # None: take them from the dataset manifest


def _section(cls, data: Any, name: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def config_from_dict(data: Mapping[str, Any], base_dir: Path = Path(".")) -> RunConfig:
    data = dict(data)
    if "dataset" not in data:
        raise ConfigError("dataset: required key missing")
    dataset = base_dir / str(data.pop("dataset"))
    output = base_dir / str(data.pop("output", "out"))
    align = _section(AlignConfig, data.pop("align", {}), "align")
    noise = _section(FilterNoise, data.pop("noise", {}), "noise")
    ekf_raw = dict(data.pop("ekf", {}))
    if ekf_raw.get("gate") is False:
        ekf_raw["gate"] = None
    ekf = _section(EkfSettings, ekf_raw, "ekf")
    extr = None
    if "extrinsics" in data:
        ex = data.pop("extrinsics")
        try:
            extr = Extrinsics(
                r_ci=np.array(ex.get("r_ci", np.diag([1.0, -1.0, -1.0])), dtype=np.float64),
                p_ic=np.array(ex.get("p_ic", [0.0, 0.0, 0.0]), dtype=np.float64),
            )
        except (ValueError, AttributeError) as exc:
            raise ConfigError(f"[extrinsics] {exc}") from None
    if data:
        raise ConfigError(f"{sorted(data)[0]}: unknown key")
    return RunConfig(dataset=dataset, output=output, align=align, noise=noise, ekf=ekf, extrinsics=extr)


def load_config(path: str | Path) -> RunConfig:
    """Parse a TOML run file; relative paths resolve against its directory."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = config_from_dict(raw, path.parent)
    if not (cfg.dataset / "manifest.toml").is_file():
        raise ConfigError(f"dataset: no manifest.toml in {cfg.dataset}")
    return cfg


@dataclass(frozen=True)
class FrameDiagnostic:
    frame: int
    timestamp: float
    iterations: int
    final_cost: float
    pixels_used: int
    converged: bool
    failure_reason: str
    accepted: bool
    align_seconds: float


@dataclass(frozen=True, eq=False)
class TrackRun:
    """Everything one tracking pass produces.

    ``states`` holds one posterior per frame; frame 0 is the initial state.
    """

    times: np.ndarray
    states: list[EkfState]
    covariances: np.ndarray
    velocities_body: np.ndarray
    diagnostics: list[FrameDiagnostic]
    estimate: TrajectoryTrack
    metrics: MetricReport | None


def _nearest_range(ds: Dataset, t: float) -> float | None:
    if ds.range_times.size == 0:
        return None
    tol = 0.5 / ds.image_rate
    i = pair_indices(np.array([t]), ds.range_times, tol)[0]
    return None if i < 0 else float(ds.range_values[i])


def _initial_state(ds: Dataset, walker: StreamPropagator, extr: Extrinsics) -> EkfState:
    """Zero velocity and bias; distance from the first usable range sample."""
    t0 = float(ds.frame_times[0])
    n_z = normal_from_attitude(walker.attitude_at(t0), extr).vector[2]
    for t, rng in zip(ds.range_times, ds.range_values):
        if t >= t0 - 0.5 / ds.image_rate:
            return EkfState(v=np.zeros(3), d=float(rng * n_z), b=np.zeros(3))
    raise DatasetError("no rangefinder sample to initialise the distance")


def truth_track(ds: Dataset) -> TrajectoryTrack | None:
    gt = ds.groundtruth
    if gt is None:
        return None
    return TrajectoryTrack(gt.times, gt.positions, gt.rotations, gt.velocities_body)


def track_dataset(
    ds: Dataset,
    cfg: RunConfig,
    on_frame: Callable[[int, AlignResult], None] | None = None,
) -> TrackRun:
    """Track every consecutive frame pair and filter the result.

    Frames whose alignment fails leave the filter on IMU prediction alone.
    """
    extr = cfg.extrinsics or ds.extrinsics
    noise = cfg.noise.to_config()
    times = np.asarray(ds.frame_times, dtype=np.float64)
    if times.size < 2:
        raise DatasetError("need at least two frames")
    filt = VelocityFilter(
        EkfState(np.zeros(3), 1.0, np.zeros(3)),
        cfg.ekf.covariance(),
        noise,
        extr,
        float(times[0]),
        cfg.ekf.gate,
    )
    walker = StreamPropagator(filt, ds.imu, ds.ahrs)
    filt.state = _initial_state(ds, walker, extr)
    imu_times = walker.imu_times

    states = [filt.state]
    covs = [filt.cov.copy()]
    diags: list[FrameDiagnostic] = []
    prev_img = ds.frames[0]
    for k in range(1, times.size):
        t_prev, t = float(times[k - 1]), float(times[k])
        tau = t - t_prev
        att_prev, att = walker.attitude_at(t_prev), walker.attitude_at(t)
        prior = prior_from_imu(att_prev, att, filt.state, tau, extr, cfg.align.velocity_prior)
        n = normal_from_attitude(att, extr)
        curr = ds.frames[k]
        start = time.perf_counter()
        res = gauss_newton_align(prev_img, curr, prior, cfg.align, ds.intrinsics, n)
        elapsed = time.perf_counter() - start
        if on_frame is not None:
            on_frame(k, res)

        walker.advance_to(t)
        accepted = False
        if res.converged:
            meas = FusionMeasurement(
                t_m=np.array(res.p.t),
                l_m=_nearest_range(ds, t),
                n_z=float(n.vector[2]),
                tau=tau,
                timestamp=t,
            )
            accepted = filt.correct(meas).accepted
        states.append(filt.state)
        covs.append(filt.cov.copy())
        diags.append(
            FrameDiagnostic(
                frame=k,
                timestamp=t,
                iterations=res.iterations,
                final_cost=res.final_cost,
                pixels_used=res.pixels_used,
                converged=res.converged,
                failure_reason=res.failure_reason.value if res.failure_reason else "",
                accepted=accepted,
                align_seconds=elapsed,
            )
        )
        prev_img = curr

    vb = np.array(
        [
            camera_to_body_velocity(s.v, ds.imu[nearest_index(imu_times, t)].omega_m, extr)
            for s, t in zip(states, times)
        ]
    )
    ahrs_times = walker.ahrs_times
    rots = np.array([a.rotation for a in ds.ahrs])
    truth = truth_track(ds)
    start_pos = truth.positions[0] if truth is not None else np.zeros(3)
    estimate = dead_reckon(times, vb, ahrs_times, rots, start_pos)
    metrics = evaluate(estimate, truth, diags) if truth is not None else None
    return TrackRun(times, states, np.array(covs), vb, diags, estimate, metrics)


def _fmt(x: float) -> str:
    return repr(float(x))


TRACK_COLUMNS = [
    "timestamp", "vcx", "vcy", "vcz", "vbx", "vby", "vbz", "d", "bx", "by", "bz", "cov_trace", "accepted"
]
TRAJECTORY_COLUMNS = ["timestamp", "px", "py", "pz"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + [
    "vbx",
    "vby",
    "vbz",
]
DIAGNOSTIC_COLUMNS = [f.name for f in dataclasses.fields(FrameDiagnostic)]


def write_outputs(run: TrackRun, out_dir: str | Path, include_timing: bool = False) -> dict[str, Path]:
    """Write track.csv, trajectory.csv, diagnostics.csv and (if scored) metrics.csv.

    Wall-clock timing is left out of diagnostics.csv unless ``include_timing``
    so identical runs produce identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in ("track", "trajectory", "diagnostics")}
    with open(paths["track"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_COLUMNS)
        accepted = [False] + [d.accepted for d in run.diagnostics]
        for t, s, c, vb, ok in zip(run.times, run.states, run.covariances, run.velocities_body, accepted):
            w.writerow(
                [f"{t:.9f}", *map(_fmt, s.v), *map(_fmt, vb), _fmt(s.d), *map(_fmt, s.b), _fmt(np.trace(c)), int(ok)]
            )
    est = run.estimate
    with open(paths["trajectory"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for i in range(len(est)):
            w.writerow(
                [f"{est.times[i]:.9f}", *map(_fmt, est.positions[i]), *map(_fmt, est.rotations[i].ravel()),
                 *map(_fmt, est.velocities[i])]
            )
    cols = DIAGNOSTIC_COLUMNS if include_timing else DIAGNOSTIC_COLUMNS[:-1]
    with open(paths["diagnostics"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for d in run.diagnostics:
            row = dataclasses.asdict(d)
            row["timestamp"] = f"{d.timestamp:.9f}"
            row["final_cost"] = _fmt(d.final_cost)
            row["converged"] = int(d.converged)
            row["accepted"] = int(d.accepted)
            w.writerow([row[c] for c in cols])
    if run.metrics is not None:
        paths["metrics"] = write_metrics(run.metrics, out / "metrics.csv")
    return paths


def write_metrics(report: MetricReport, path: str | Path) -> Path:
    path = Path(path)
    values = report.as_dict()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(values))
        w.writerow([_fmt(v) for v in values.values()])
    return path


def read_track_csv(path: str | Path) -> TrajectoryTrack:
    """Read a trajectory.csv or groundtruth.csv into a track (columns matched by name)."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        rows = np.array([[float(v) for v in row] for row in reader], dtype=np.float64)
    col = {name: i for i, name in enumerate(header)}
    rot_names = [f"r{i}{j}" for i in range(3) for j in range(3)]
    need = ["timestamp", "px", "py", "pz", "vbx", "vby", "vbz", *rot_names]
    missing = [c for c in need if c not in col]
    if missing:
        raise DatasetError(f"{path.name}: missing columns {missing}")
    rows = rows.reshape(-1, len(header))
    pick = lambda names: rows[:, [col[c] for c in names]]  # noqa: E731
    return TrajectoryTrack(
        times=rows[:, col["timestamp"]],
        positions=pick(["px", "py", "pz"]),
        rotations=pick(rot_names).reshape(-1, 3, 3),
        velocities=pick(["vbx", "vby", "vbz"]),
    )


def read_diagnostics(path: str | Path) -> list[FrameDiagnostic]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for row in reader:
            out.append(
                FrameDiagnostic(
                    frame=int(row["frame"]),
                    timestamp=float(row["timestamp"]),
                    iterations=int(row["iterations"]),
                    final_cost=float(row["final_cost"]),
                    pixels_used=int(row["pixels_used"]),
                    converged=row["converged"] == "1",
                    failure_reason=row["failure_reason"],
                    accepted=row["accepted"] == "1",
                    align_seconds=float(row.get("align_seconds") or 0.0),
                )
            )
    return out


@dataclass(frozen=True)
class BenchReport:
    """Alignment throughput in frames per second."""

    mean: float
    sigma: float
    min: float
    max: float
    frames: int
    repetitions: int

    def rates(self) -> dict[str, float]:
        return {"mean": self.mean, "sigma": self.sigma, "min": self.min, "max": self.max}


def benchmark(ds: Dataset, cfg: RunConfig, repetitions: int = 3, max_frames: int | None = None) -> BenchReport:
    """Time the alignment stage alone on every consecutive frame pair.

    Frames are decoded before timing starts; the prior is the AHRS rotation
    increment with a zero translation guess so runs do not depend on the filter.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    count = len(ds.frames) if max_frames is None else min(len(ds.frames), max_frames)
    if count < 2:
        raise DatasetError("need at least two frames")
    extr = cfg.extrinsics or ds.extrinsics
    frames = [ds.frames[k] for k in range(count)]
    ahrs_times = np.array([a.timestamp for a in ds.ahrs])
    atts = [ds.ahrs[nearest_index(ahrs_times, float(t))] for t in ds.frame_times[:count]]
    jobs = []
    for k in range(1, count):
        tau = float(ds.frame_times[k] - ds.frame_times[k - 1])
        prior = prior_from_imu(atts[k - 1], atts[k], None, tau, extr)
        jobs.append((frames[k - 1], frames[k], prior, normal_from_attitude(atts[k], extr)))
    rates = []
    for _ in range(repetitions):
        for prev, curr, prior, n in jobs:
            start = time.perf_counter()
            gauss_newton_align(prev, curr, prior, cfg.align, ds.intrinsics, n)
            rates.append(1.0 / max(time.perf_counter() - start, 1e-9))
    arr = np.array(rates)
    return BenchReport(
        mean=float(arr.mean()),
        sigma=float(arr.std()),
        min=float(arr.min()),
        max=float(arr.max()),
        frames=len(jobs),
        repetitions=repetitions,
    )


def run_config(cfg: RunConfig) -> TrackRun:
    return track_dataset(load_dataset(cfg.dataset), cfg)
