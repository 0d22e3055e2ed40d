"""Command-line entry point: ``downvio {generate,track,bench,metrics}``.

Exit codes: 0 success, 1 runtime or tracking error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import tomli

from downvio.evalkit import evaluate
from downvio.pipeline import (
    ConfigError,
    benchmark,
    load_config,
    read_diagnostics,
    read_track_csv,
    track_dataset,
    write_metrics,
    write_outputs,
)
from downvio.simsynth import SpecError, preset, spec_from_dict, write_dataset
from downvio.simsynth.dataset import DatasetError, load_dataset

log = logging.getLogger("downvio")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _load_spec(source: str):
    path = Path(source)
    if path.suffix == ".toml" or path.is_file():
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except FileNotFoundError:
            raise SpecError("spec", f"{path}: no such file") from None
        except tomli.TOMLDecodeError as exc:
            raise SpecError("spec", f"{path}: {exc}") from None
        return spec_from_dict(data)
    return preset(source)


def cmd_generate(args: argparse.Namespace) -> int:
    spec = _load_spec(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, noise=dataclasses.replace(spec.noise, seed=args.seed))
    out = Path(args.out) if args.out else Path(spec.name)
    write_dataset(spec, out, overwrite=args.overwrite)
    print(f"wrote {spec.name}: {int(round(spec.duration * spec.image_rate))} frames "
          f"{spec.width}x{spec.height} @ {spec.image_rate:g} Hz -> {out}")
    return EXIT_OK


def cmd_track(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg = dataclasses.replace(cfg, output=Path(args.out))
    ds = load_dataset(cfg.dataset)
    run = track_dataset(ds, cfg)
    paths = write_outputs(run, cfg.output)
    for name, path in paths.items():
        log.info("%s -> %s", name, path)
    if run.metrics is None:
        print("no ground truth in dataset; metrics omitted")
    else:
        print(run.metrics.table())
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(cfg.dataset)
    if len(ds.frames) < 100:
        raise ConfigError(f"bench needs at least 100 frames, dataset has {len(ds.frames)}")
    rep = benchmark(ds, cfg, args.reps, args.frames)
    print(f"alignment rate over {rep.frames} frame pairs x {rep.repetitions} repetitions (Hz)")
    print(f"{'mean':>10} {'sigma':>10} {'min':>10} {'max':>10}")
    print(f"{rep.mean:10.2f} {rep.sigma:10.2f} {rep.min:10.2f} {rep.max:10.2f}")
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace) -> int:
    est = read_track_csv(args.estimate)
    truth = read_track_csv(args.truth)
    diags = read_diagnostics(args.diagnostics) if args.diagnostics else []
    report = evaluate(est, truth, diags, args.interval)
    print(report.table())
    if args.out:
        write_metrics(report, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="downvio", description="Downward-camera visual-inertial velocity estimation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset from a preset name or spec file")
    g.add_argument("spec", help="preset name or path to a TOML scenario file")
    g.add_argument("--out", help="output directory (default: scenario name)")
    g.add_argument("--seed", type=int, help="override the sensor-noise seed")
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("track", help="run tracker and filter on a dataset")
    t.add_argument("config", help="TOML run configuration")
    t.add_argument("--out", help="override the output directory")
    t.set_defaults(func=cmd_track)

    b = sub.add_parser("bench", help="time the alignment stage")
    b.add_argument("config")
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--frames", type=int, default=None, help="limit the number of frames used")
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("metrics", help="score an estimated trajectory against ground truth")
    m.add_argument("estimate", help="trajectory.csv from `track`")
    m.add_argument("truth", help="groundtruth.csv of the dataset")
    m.add_argument("--diagnostics", help="diagnostics.csv for the failure rate")
    m.add_argument("--interval", type=float, default=1.0)
    m.add_argument("--out", help="write the single-row metrics CSV here")
    m.set_defaults(func=cmd_metrics)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (SpecError, ConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileExistsError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
