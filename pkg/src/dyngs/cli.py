"""``dyngs`` command line: simulate, reconstruct, evaluate, export, selftest.

Exit codes: 0 success, 1 invalid input, 2 runtime failure, 3 selftest failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cloud import GridSpec, rasterize_to_volume
from .engine import TrainConfig, TrainingDiverged, train
from .evalkit import default_time_samples, evaluate_run, format_report
from .ffd import displacement
from .geometry import GeometryError, make_circular_geometry, view_pose
from .io import (FormatError, MetricsLog, RunConfig, read_cloud, read_json, read_motion, read_projection_set,
                 read_truth_bundle, read_volume, sha256_file, write_cloud, write_json, write_motion,
                 write_projection_set, write_truth_bundle, write_volume)
from .phantom import (NoiseSpec, desk_phantom, desk_truth_motion, make_dataset, mismatch_truth_motion,
                      motion_blurred_volume)
from .splatting import render
from .warp import MotionMode, warp

log = logging.getLogger("dyngs")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3
DISPLAY_WINDOW = (0.0, 0.03)  # mm^-1


class _Invalid(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _Invalid(message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_train_flags(p: argparse.ArgumentParser):
    """One flag per TrainConfig field.  Defaults are ``None`` so precedence can be resolved later."""
    for f in dataclasses.fields(TrainConfig):
        default = f.default
        if isinstance(default, bool):
            p.add_argument(_flag(f.name), action=argparse.BooleanOptionalAction, default=None,
                           help=f"(default: {default})")
        elif isinstance(default, tuple):
            p.add_argument(_flag(f.name), type=float, nargs=2, metavar=("INITIAL", "FINAL"), default=None,
                           help=f"(default: {default[0]:g} {default[1]:g})")
        elif f.name == "mode":
            p.add_argument(_flag(f.name), choices=[m.value for m in MotionMode], default=None,
                           help=f"(default: {default})")
        else:
            p.add_argument(_flag(f.name), type=type(default), default=None, help=f"(default: {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dyngs", description="Dynamic cone-beam CT with deformable Gaussian kernels.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", parents=[common], help="write a synthetic projection set and its ground truth")
    sim.add_argument("--out", type=Path, required=True)
    sim.add_argument("--views", type=int, default=60)
    sim.add_argument("--detector", type=int, nargs=2, default=(128, 128), metavar=("ROWS", "COLS"))
    sim.add_argument("--pixel-pitch", type=float, default=1.6)
    sim.add_argument("--sid", type=float, default=1000.0)
    sim.add_argument("--sdd", type=float, default=1536.0)
    sim.add_argument("--detector-offset", type=float, default=0.0)
    sim.add_argument("--points-per-cycle", type=int, default=15)
    sim.add_argument("--motion", choices=["ffd", "mismatch", "none"], default="ffd")
    sim.add_argument("--noise", action=argparse.BooleanOptionalAction, default=False)
    sim.add_argument("--fluence", type=float, default=1e8)
    sim.add_argument("--electronic-sigma", type=float, default=4.0)
    sim.add_argument("--grid-size", type=int, default=64)
    sim.add_argument("--voxel-size", type=float, default=1.6)
    sim.add_argument("--seed", type=int, default=0)

    rec = sub.add_parser("reconstruct", parents=[common], help="fit kernels and motion to a projection set")
    rec.add_argument("--config", type=Path, default=None, help="JSON run config; flags override it")
    for key in ("data_dir", "out_dir", "init_volume", "truth_dir", "checkpoint_dir"):
        rec.add_argument(_flag(key), default=None)
    _add_train_flags(rec)

    ev = sub.add_parser("evaluate", parents=[common], help="score a reconstruction against its ground truth")
    ev.add_argument("--run-dir", type=Path, required=True)
    ev.add_argument("--truth-dir", type=Path, default=None)
    ev.add_argument("--times", default="default", help="'default', 'all', or comma-separated indices")
    ev.add_argument("--n-samples", type=int, default=10)
    ev.add_argument("--out", type=Path, default=None, help="report path (default: RUN_DIR/report.json)")
    ev.add_argument("--slices", type=Path, default=None, help="directory for central-slice dumps")

    ex = sub.add_parser("export", parents=[common], help="write volumes, DVF grids and rendered projections")
    ex.add_argument("--run-dir", type=Path, required=True)
    ex.add_argument("--out", type=Path, required=True)
    ex.add_argument("--times", required=True, help="comma-separated time indices")
    ex.add_argument("--what", nargs="+", choices=["volume", "dvf", "projection", "slices"],
                    default=["volume", "slices"])
    ex.add_argument("--window", type=float, nargs=2, default=DISPLAY_WINDOW, metavar=("LO", "HI"))

    st = sub.add_parser("selftest", parents=[common], help="run gradient, oracle and invariant checks")
    st.add_argument("--quick", action="store_true", help="fewer random scenes")
    return parser


# helpers

def _parse_times(spec: str, n_t: int, n_samples: int = 10) -> list[int]:
    if spec == "default":
        return default_time_samples(n_t, n_samples)
    if spec == "all":
        return list(range(n_t))
    times = [int(s) for s in spec.split(",") if s.strip()]
    bad = [t for t in times if not 0 <= t < n_t]
    if not times or bad:
        raise ValueError(f"time indices must lie in [0, {n_t - 1}]: {spec}")
    return times


def _write_pgm(path: Path, image, window):
    lo, hi = window
    if not hi > lo:
        raise ValueError("display window must have HI > LO")
    scaled = np.clip((np.asarray(image, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    pix = np.round(scaled * 65535).astype(">u2")
    rows, cols = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode())
        fh.write(pix.tobytes())


def _dump_slices(directory: Path, stem: str, volume, window):
    """Central axial, coronal and sagittal slices as PGM plus raw little-endian float32."""
    directory.mkdir(parents=True, exist_ok=True)
    nx, ny, nz = volume.shape
    planes = {"axial": volume[:, :, nz // 2].T, "coronal": volume[:, ny // 2, :].T,
              "sagittal": volume[nx // 2, :, :].T}
    for name, img in planes.items():
        img = img[::-1] if name != "axial" else img  # superior at the top
        _write_pgm(directory / f"{stem}_{name}.pgm", img, window)
        np.ascontiguousarray(img, dtype="<f4").tofile(directory / f"{stem}_{name}.raw")


def _load_run(run_dir: Path):
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no run manifest in {run_dir}")
    manifest = read_json(manifest_path)
    cloud_path = run_dir / manifest["final_cloud"]
    motion_path = run_dir / manifest["final_motion"]
    for p in (cloud_path, motion_path):
        if not p.exists():
            raise FileNotFoundError(f"missing checkpoint {p}")
    grid = GridSpec.from_dict(manifest["grid"])
    return manifest, read_cloud(cloud_path), read_motion(motion_path), grid


# commands

def cmd_simulate(args) -> int:
    if args.views < 1:
        raise ValueError("--views must be >= 1")
    geom = make_circular_geometry(args.sid, args.sdd, args.views, tuple(args.detector), args.pixel_pitch,
                                  args.detector_offset)
    seeds = np.random.SeedSequence(args.seed).spawn(3)
    phantom_seed, motion_seed, noise_seed = (int(s.generate_state(1)[0]) for s in seeds)
    extent = args.grid_size * args.voxel_size
    phantom = desk_phantom(extent=extent, seed=phantom_seed)
    if args.motion == "ffd":
        motion = desk_truth_motion(args.views, args.points_per_cycle, extent=extent, seed=motion_seed)
    elif args.motion == "mismatch":
        motion = mismatch_truth_motion(phantom, args.views, args.points_per_cycle, seed=motion_seed)
    else:
        motion = None
    noise = NoiseSpec(args.fluence, args.electronic_sigma, noise_seed) if args.noise else None
    projections, truth = make_dataset(phantom, motion, geom, noise)

    out = args.out
    write_projection_set(out / "projections", projections)
    write_truth_bundle(out / "truth", truth)
    grid = GridSpec.centered(args.grid_size, args.voxel_size)
    init = motion_blurred_volume(truth, grid)
    write_volume(out / "init_volume", init, grid, extra={"kind": "time-averaged truth, 1-voxel blur"})
    manifest = {
        "command": "simulate",
        "version": __version__,
        "seed": args.seed,
        "streams": {"phantom": phantom_seed, "motion": motion_seed, "noise": noise_seed},
        "motion": args.motion,
        "noise": None if noise is None else dataclasses.asdict(noise),
        "n_views": args.views,
        "grid": grid.to_dict(),
        "files": {p.relative_to(out).as_posix(): sha256_file(p)
                  for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"},
    }
    write_json(out / "manifest.json", manifest)
    print(f"wrote {args.views} views to {out}")
    return EXIT_OK


def _cli_overrides(args) -> dict:
    keys = RunConfig.known_keys()
    return {k: v for k, v in vars(args).items() if k in keys and v is not None}


def cmd_reconstruct(args) -> int:
    cfg = RunConfig.load(args.config, _cli_overrides(args))
    paths = cfg.paths
    if not paths["data_dir"]:
        raise ValueError("--data-dir is required (flag or config file)")
    data_dir = Path(paths["data_dir"])
    init_path = Path(paths["init_volume"]) if paths["init_volume"] else data_dir / "init_volume.json"
    if not init_path.with_suffix(".json").exists():
        raise FileNotFoundError(f"initial volume not found: {init_path}")
    projections = read_projection_set(data_dir / "projections")
    init, grid, _ = read_volume(init_path)
    out = Path(paths["out_dir"])
    ckpt_dir = Path(paths["checkpoint_dir"]) if paths["checkpoint_dir"] else out
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "run_config.json")

    def on_checkpoint(it, cloud, model):
        write_cloud(ckpt_dir / f"cloud_{it:07d}.bin", cloud)
        write_motion(ckpt_dir / f"motion_{it:07d}.bin", model)

    with MetricsLog(out / "metrics.jsonl") as metrics:
        def on_log(rec):
            metrics.write(rec)
            log.info("iter %d loss %.4g kernels %d", rec["iteration"], rec["loss"], rec["kernels"])

        result = train(cfg.train, projections, init.astype(np.float64), grid,
                       on_checkpoint=on_checkpoint, on_log=on_log)
        metrics.write({"final_projection_loss": result.final_loss})

    final_cloud, final_motion = out / "cloud_final.bin", out / "motion_final.bin"
    write_cloud(final_cloud, result.cloud)
    write_motion(final_motion, result.model)
    manifest = {
        "command": "reconstruct",
        "version": __version__,
        "seed": cfg.train.seed,
        "streams": ["init", "loop", "density_control"],
        "mode": cfg.train.mode,
        "data_dir": str(data_dir),
        "truth_dir": paths["truth_dir"] or str(data_dir / "truth"),
        "grid": grid.to_dict(),
        "final_cloud": final_cloud.name,
        "final_motion": final_motion.name,
        "final_projection_loss": result.final_loss,
        "kernels": len(result.cloud),
        "folds": result.folds,
        "checksums": {p.name: sha256_file(p) for p in (final_cloud, final_motion)},
    }
    write_json(out / "manifest.json", manifest)
    print(f"final projection loss {result.final_loss:.6g}; checkpoints in {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest, cloud, model, grid = _load_run(args.run_dir)
    truth_dir = args.truth_dir or Path(manifest["truth_dir"])
    truth = read_truth_bundle(truth_dir)
    projections = read_projection_set(Path(manifest["data_dir"]) / "projections", verify=False)
    times = _parse_times(args.times, projections.n_t, args.n_samples)
    report = evaluate_run(cloud, model, manifest["mode"], truth, grid, projections.geometry, times)
    out = args.out or args.run_dir / "report.json"
    out.write_text(format_report(report) + "\n")
    if args.slices is not None:
        for t in times:
            vol = _volume_at(cloud, model, manifest["mode"], grid, t)
            _dump_slices(args.slices, f"recon_t{t:04d}", vol, DISPLAY_WINDOW)
            _dump_slices(args.slices, f"truth_t{t:04d}", truth.volume(grid, t), DISPLAY_WINDOW)
    print(f"mean PSNR {report['mean_psnr']:.3f} dB, mean RMSE {report['mean_rmse']:.4g}; report at {out}")
    return EXIT_OK


def _volume_at(cloud, model, mode, grid, t):
    return rasterize_to_volume(warp(cloud, model, t, mode), grid)


def cmd_export(args) -> int:
    manifest, cloud, model, grid = _load_run(args.run_dir)
    projections = read_projection_set(Path(manifest["data_dir"]) / "projections", verify=False)
    geom = projections.geometry
    times = _parse_times(args.times, projections.n_t)
    mode = MotionMode(manifest["mode"])
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    for t in times:
        if "volume" in args.what or "slices" in args.what:
            vol = _volume_at(cloud, model, mode, grid, t)
            if "volume" in args.what:
                write_volume(out / f"volume_t{t:04d}", vol, grid, extra={"time_index": t})
            if "slices" in args.what:
                _dump_slices(out, f"volume_t{t:04d}", vol, tuple(args.window))
        if "dvf" in args.what:
            if mode is MotionMode.PER_GAUSSIAN:
                raise ValueError("per-Gaussian runs have no spatial DVF to export")
            pts = grid.points().reshape(-1, 3)
            dvf = (displacement(model, pts, t) - pts).reshape(tuple(grid.dims) + (3,))
            write_volume(out / f"dvf_t{t:04d}", dvf, grid, components=3, extra={"time_index": t})
        if "projection" in args.what:
            for v in np.flatnonzero(projections.time_indices == t):
                img = render(warp(cloud, model, t, mode), view_pose(geom, int(v), t), geom)
                np.ascontiguousarray(img, dtype="<f4").tofile(out / f"projection_v{int(v):04d}_t{t:04d}.raw")
    print(f"exported {len(times)} time point(s) to {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest(quick=args.quick, stream=sys.stdout)
    return EXIT_OK if ok else EXIT_SELFTEST


_COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct, "evaluate": cmd_evaluate,
             "export": cmd_export, "selftest": cmd_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _Invalid as exc:
        print(f"dyngs: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, FormatError, GeometryError, KeyError) as exc:
        print(f"dyngs: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDiverged as exc:
        print(f"dyngs: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, FloatingPointError) as exc:
        print(f"dyngs: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
