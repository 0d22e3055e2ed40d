"""On-disk dataset layout.

::

    <dir>/manifest.toml    intrinsics, extrinsics, rates, stream paths, frame list
    <dir>/frames/%06d.pgm  8-bit binary PGM
    <dir>/imu.csv          timestamp,fx,fy,fz,wx,wy,wz
    <dir>/ahrs.csv         timestamp,r00,r01,r02,r10,r11,r12,r20,r21,r22
    <dir>/range.csv        timestamp,range
    <dir>/groundtruth.csv  see GT_COLUMNS

Timestamps are written with 9 decimals, every other value with the shortest
repr that round-trips, so re-reading reproduces the in-memory streams exactly.
"""

from __future__ import annotations

import csv
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import tomli
import tomli_w

from downvio.fusion import AhrsAttitude, Extrinsics, ImuSample
from downvio.geometry import CameraIntrinsics
from downvio.imgproc import GrayImage, read_pgm, write_pgm
from downvio.simsynth.scenario import ScenarioSpec
from downvio.simsynth.synth import (
    GroundTruth,
    RenderedFrames,
    ground_truth,
    sample_times,
    synthesize_imu,
    synthesize_range,
)

MANIFEST = "manifest.toml"
IMU_COLUMNS = ["timestamp", "fx", "fy", "fz", "wx", "wy", "wz"]
_R9 = [f"r{i}{j}" for i in range(3) for j in range(3)]
AHRS_COLUMNS = ["timestamp"] + _R9
RANGE_COLUMNS = ["timestamp", "range"]
GT_COLUMNS = (
    ["timestamp", "px", "py", "pz"]
    + _R9
    + ["vwx", "vwy", "vwz", "vbx", "vby", "vbz", "d"]
    + [f"rel_r{i}{j}" for i in range(3) for j in range(3)]
    + ["tx", "ty", "tz", "nx", "ny", "nz"]
)


class DatasetError(RuntimeError):
    pass


class PgmFrames(Sequence[GrayImage]):
    def __init__(self, root: Path, files: list[str], times: np.ndarray):
        self.root = root
        self.files = files
        self.times = times

    def __len__(self) -> int:
        return len(self.files)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return [self[i] for i in range(*k.indices(len(self)))]
        return read_pgm(self.root / self.files[k], float(self.times[k]))


@dataclass(eq=False)
class Dataset:
    intrinsics: CameraIntrinsics
    width: int
    height: int
    extrinsics: Extrinsics
    image_rate: float
    imu_rate: float
    range_rate: float
    frames: Sequence[GrayImage]
    frame_times: np.ndarray
    imu: list[ImuSample]
    ahrs: list[AhrsAttitude]
    range_times: np.ndarray
    range_values: np.ndarray
    groundtruth: GroundTruth | None = None
    name: str = "dataset"


def synthesize_dataset(spec: ScenarioSpec) -> Dataset:
    """In-memory dataset; frames are rendered lazily and quantised to 8 bits."""
    traj = spec.build_trajectory()
    times = sample_times(spec.duration, spec.image_rate)
    imu, ahrs = synthesize_imu(spec, traj)
    rt, rv = synthesize_range(spec, traj)
    return Dataset(
        intrinsics=spec.camera,
        width=spec.width,
        height=spec.height,
        extrinsics=spec.extrinsics,
        image_rate=spec.image_rate,
        imu_rate=spec.imu_rate,
        range_rate=spec.range_rate,
        frames=RenderedFrames(spec, times, traj),
        frame_times=times,
        imu=imu,
        ahrs=ahrs,
        range_times=rt,
        range_values=rv,
        groundtruth=ground_truth(spec, times, traj),
        name=spec.name,
    )


def _ts(t: float) -> str:
    return f"{t:.9f}"


def _num(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, values in rows:
            w.writerow([_ts(t)] + [_num(v) for v in values])


def _read_csv(path: Path, header: list[str]) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        found = next(reader)
        if found != header:
            raise DatasetError(f"{path.name}: unexpected columns {found}")
        rows = [[float(v) for v in row] for row in reader]
    return np.array(rows, dtype=np.float64).reshape(-1, len(header))


def save_dataset(ds: Dataset, out_dir: str | Path, overwrite: bool = False) -> Path:
    """Write ``ds`` atomically: everything goes to a scratch directory that is
    renamed into place on success and removed on failure."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not overwrite:
        raise FileExistsError(f"{out_dir} exists and is not empty")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        (tmp / "frames").mkdir()
        files = []
        for k in range(len(ds.frames)):
            rel = f"frames/{k:06d}.pgm"
            write_pgm(tmp / rel, ds.frames[k])
            files.append(rel)
        _write_csv(tmp / "imu.csv", IMU_COLUMNS, ((s.timestamp, [*s.f_m, *s.omega_m]) for s in ds.imu))
        _write_csv(tmp / "ahrs.csv", AHRS_COLUMNS, ((a.timestamp, a.rotation.ravel()) for a in ds.ahrs))
        _write_csv(tmp / "range.csv", RANGE_COLUMNS, zip(ds.range_times, ([v] for v in ds.range_values)))
        gt = ds.groundtruth
        if gt is not None:
            _write_csv(
                tmp / "groundtruth.csv",
                GT_COLUMNS,
                (
                    (
                        gt.times[k],
                        [
                            *gt.positions[k],
                            *gt.rotations[k].ravel(),
                            *gt.velocities_world[k],
                            *gt.velocities_body[k],
                            gt.distances[k],
                            *gt.rel_rotations[k].ravel(),
                            *gt.rel_translations[k],
                            *gt.normals[k],
                        ],
                    )
                    for k in range(len(gt))
                ),
            )
        k = ds.intrinsics
        manifest = {
            "name": ds.name,
            "width": ds.width,
            "height": ds.height,
            "fx": k.fx,
            "fy": k.fy,
            "cx": k.cx,
            "cy": k.cy,
            "image_rate": ds.image_rate,
            "imu_rate": ds.imu_rate,
            "range_rate": ds.range_rate,
            "r_ci": ds.extrinsics.r_ci.tolist(),
            "p_ic": ds.extrinsics.p_ic.tolist(),
            "imu": "imu.csv",
            "ahrs": "ahrs.csv",
            "range": "range.csv",
            "groundtruth": "groundtruth.csv" if gt is not None else "",
            "frame_times": [_ts(t) for t in ds.frame_times],
            "frame_files": files,
        }
        with open(tmp / MANIFEST, "wb") as fh:
            tomli_w.dump(manifest, fh)
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir


def write_dataset(spec: ScenarioSpec, out_dir: str | Path, overwrite: bool = False) -> Path:
    return save_dataset(synthesize_dataset(spec), out_dir, overwrite=overwrite)


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"no {MANIFEST} in {root}") from None
    except tomli.TOMLDecodeError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    m = read_manifest(root)
    try:
        imu_rows = _read_csv(root / m["imu"], IMU_COLUMNS)
        ahrs_rows = _read_csv(root / m["ahrs"], AHRS_COLUMNS)
        range_rows = _read_csv(root / m["range"], RANGE_COLUMNS)
        gt = None
        if m.get("groundtruth") and (root / m["groundtruth"]).exists():
            g = _read_csv(root / m["groundtruth"], GT_COLUMNS)
            gt = GroundTruth(
                times=g[:, 0],
                positions=g[:, 1:4],
                rotations=g[:, 4:13].reshape(-1, 3, 3),
                velocities_world=g[:, 13:16],
                velocities_body=g[:, 16:19],
                distances=g[:, 19],
                rel_rotations=g[:, 20:29].reshape(-1, 3, 3),
                rel_translations=g[:, 29:32],
                normals=g[:, 32:35],
            )
        times = np.array([float(t) for t in m["frame_times"]])
        return Dataset(
            intrinsics=CameraIntrinsics(m["fx"], m["fy"], m["cx"], m["cy"]),
            width=int(m["width"]),
            height=int(m["height"]),
            extrinsics=Extrinsics(r_ci=np.array(m["r_ci"]), p_ic=np.array(m["p_ic"])),
            image_rate=float(m["image_rate"]),
            imu_rate=float(m["imu_rate"]),
            range_rate=float(m["range_rate"]),
            frames=PgmFrames(root, list(m["frame_files"]), times),
            frame_times=times,
            imu=[ImuSample(r[1:4], r[4:7], r[0]) for r in imu_rows],
            ahrs=[AhrsAttitude(r[1:10].reshape(3, 3), r[0]) for r in ahrs_rows],
            range_times=range_rows[:, 0],
            range_values=range_rows[:, 1],
            groundtruth=gt,
            name=m.get("name", root.name),
        )
    except KeyError as exc:
        raise DatasetError(f"manifest is missing key {exc}") from None
