"""Command-line entry points: ``drrpose <command> [options]``.

Every command writes into its ``--out`` run directory and finishes with a
``manifest.json`` listing the arguments, seed, output files with SHA-256
digests and wall time. The first printed line names the command and seed.

Exit codes: 0 success, 2 usage or configuration error, 3 file error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import PhantomSpec, SequenceSpec, generate_phantom, simulate_sequence
from .experiments import (DEFAULT_TARGETS, RESULT_COLUMNS, SWEEP_COLUMNS, TIMING_COLUMNS,
                          ExperimentConfig, count_sign_changes, init_pose_for, plot_sweep,
                          read_csv, run_experiment, standard_geometry, sweep_losses,
                          target_image, write_csv, write_report)
from .geometry import Pose, angle_error, save_poses
from .io import (FormatError, load_grid, load_mask, load_mlp, save_grid, save_image_raw,
                 save_mask, save_mlp, save_pgm)
from .losses import LOSS_NAMES
from .optim import PoseOptConfig, TrainConfig, estimate_pose, mean_psnr, train_field
from .render import drr_image, render_drr
from .scene import DensityMLP, MNeRFField, NeTTField, build_mask, mm_to_extent_units

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
ALGO_NAMES = {"raycast": "ray_cast", "volume": "volume"}
MASK_THRESHOLD = 0.05
MASK_DILATION_MM = 3.0


class UsageError(ValueError):
    """Bad flag combination detected after parsing."""


# ---------------------------------------------------------------- helpers

def parse_pose(text: str) -> Pose:
    """``"ty,tx,tz[,ux,uy,uz]"`` in degrees and NDC units."""
    try:
        vals = [float(v) for v in text.replace(" ", "").split(",") if v != ""]
    except ValueError:
        raise UsageError(f"cannot parse pose {text!r}") from None
    if len(vals) not in (3, 6):
        raise UsageError(f"pose needs 3 or 6 numbers, got {len(vals)} in {text!r}")
    return Pose(tuple(vals[:3]), tuple(vals[3:]) if len(vals) == 6 else (0.0, 0.0, 0.0))


def parse_ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip() != "")
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def parse_floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip() != "")
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def load_phantom(ref: str):
    """``default``, a phantom spec ``.json`` or a saved ``.grid`` file."""
    if ref == "default":
        return generate_phantom(PhantomSpec()), "default", PhantomSpec()
    path = Path(ref)
    if path.suffix == ".json":
        spec = PhantomSpec.from_dict(json.loads(path.read_text()))
        return generate_phantom(spec), path.stem, spec
    return load_grid(path), path.stem, None


def mask_for(grid, spec):
    """Anatomy mask dilated by 3 mm, and never by less than one voxel."""
    size_mm = spec.physical_size_mm if spec is not None else PhantomSpec().physical_size_mm
    extent = float(np.ptp(grid.extent[0]))
    dilation = max(mm_to_extent_units(MASK_DILATION_MM, size_mm, extent), float(grid.spacing.max()))
    return build_mask(grid, MASK_THRESHOLD, dilation)


def load_scene(kind: str, grid, weights: str | None):
    """The field rendered for ``kind``; networks come from a ``train`` run directory."""
    if kind == "grid":
        return grid
    if weights is None:
        raise UsageError(f"scene {kind!r} needs --weights pointing at a train run")
    path = Path(weights)
    run = path if path.is_dir() else path.parent
    net = load_mlp(run / "weights.json" if path.is_dir() else path)
    if kind == "nett":
        return NeTTField(grid, net)
    return MNeRFField(net, load_mask(run / "mask.mask"))


def parse_weights(items) -> dict:
    out = {}
    for item in items or []:
        if "=" in item:
            kind, path = item.split("=", 1)
            out[kind] = path
        else:
            out["*"] = item
    return out


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, args, t0: float, extra=None) -> None:
    files = {p.relative_to(out).as_posix(): sha256(p)
             for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"}
    argv = {k: v for k, v in vars(args).items() if k != "func"}
    doc = dict(command=args.command, seed=args.seed, version=__version__,
               python=platform.python_version(), torch=torch.__version__, args=argv,
               files=files, wall_time_s=time.perf_counter() - t0)
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _geometry(args, grid):
    return standard_geometry(grid, args.size, args.samples)


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- commands

def cmd_phantom(args, out: Path) -> dict:
    spec = PhantomSpec(dims=(args.dims,) * 3, seed=args.seed) if args.spec is None else \
        PhantomSpec.from_dict(json.loads(Path(args.spec).read_text()))
    grid = generate_phantom(spec)
    save_grid(out / "phantom.grid", grid)
    (out / "phantom.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    print(f"phantom {grid.dims} -> {out / 'phantom.grid'}")
    return {}


def cmd_render(args, out: Path) -> dict:
    grid, pid, spec = load_phantom(args.phantom)
    geom = _geometry(args, grid)
    field_ = load_scene(args.scene, grid, parse_weights(args.weights).get("*"))
    field_.eval()
    pose = parse_pose(args.pose)
    algos = ["raycast", "volume"] if args.algo == "both" else [args.algo]
    meta = dict(phantom=pid, scene=args.scene, pose=list(pose.as_vector()),
                geometry=dict(sod=geom.sod, sid=geom.sid, width=geom.width, height=geom.height,
                              n_samples=geom.n_samples, norm_scale=geom.norm_scale),
                images={})
    for name in algos:
        algo = ALGO_NAMES[name]
        output = "absorbance" if algo == "ray_cast" else "intensity"
        with torch.no_grad():
            raw = render_drr(field_, pose, geom, algo, output)
            img = drr_image(field_, pose, geom, algo)
        save_image_raw(out / f"{name}.img", raw)
        save_pgm(out / f"{name}.pgm", img.numpy(), 16)
        digest = hashlib.sha256(raw.numpy().tobytes()).hexdigest()
        meta["images"][name] = dict(raw=f"{name}.img", preview=f"{name}.pgm", output=output,
                                    sha256=digest)
        print(f"{name}: {out / (name + '.img')} sha256={digest}")
    (out / "render.json").write_text(json.dumps(meta, indent=2) + "\n")
    return {}


def cmd_sweep_loss(args, out: Path) -> dict:
    grid, _, _ = load_phantom(args.phantom)
    geom = _geometry(args, grid)
    field_ = load_scene(args.scene, grid, parse_weights(args.weights).get("*"))
    algo = ALGO_NAMES[args.algo]
    target = target_image(grid, parse_pose(args.target), geom, args.target_style)
    rows = sweep_losses(field_, geom, target, args.loss or LOSS_NAMES, args.range[0],
                        args.range[1], args.step, algo)
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    changes = count_sign_changes(rows)
    write_csv(out / "sign_changes.csv", ("dof", "loss", "sign_changes"),
              [dict(dof=d, loss=k, sign_changes=n) for (d, k), n in changes.items()])
    if not args.no_plots:
        plot_sweep(rows, out / "sweep.png")
    for (d, k), n in changes.items():
        print(f"{d:8s} {k:5s} sign changes: {n}")
    return {}


def cmd_estimate(args, out: Path) -> dict:
    grid, _, _ = load_phantom(args.phantom)
    geom = _geometry(args, grid)
    field_ = load_scene(args.scene, grid, parse_weights(args.weights).get("*"))
    truth = parse_pose(args.target)
    init = parse_pose(args.init) if args.init else init_pose_for(truth, args.seed, 0, 0)
    target = target_image(grid, truth, geom, args.target_style)
    cfg = PoseOptConfig(loss=args.loss, algorithm=ALGO_NAMES[args.algo], max_iter=args.max_iter,
                        plateau=args.plateau)
    trace = estimate_pose(target, field_, geom, init, cfg)
    err = angle_error(trace.best_pose.theta, truth.theta)
    record = dict(seed=args.seed, loss=args.loss, scene=args.scene, algo=args.algo,
                  target_pose=list(truth.as_vector()), init_pose=list(init.as_vector()),
                  final_pose=list(trace.best_pose.as_vector()), best_loss=trace.best_loss,
                  angle_error=err, iterations=trace.iterations, reason=trace.reason)
    (out / "result.json").write_text(json.dumps(record, indent=2) + "\n")
    save_poses(out / "trace_poses.txt", trace.poses)
    write_csv(out / "trace.csv", ("iteration", "loss"),
              [dict(iteration=i, loss=v) for i, v in enumerate(trace.losses)])
    print("final pose  " + " ".join(f"{v:.4f}" for v in trace.best_pose.as_vector()))
    print(f"angle error {err:.4f} deg  iterations {trace.iterations} ({trace.reason})")
    print(f"wall time   {trace.wall_time:.2f} s")
    return dict(wall_time_estimate_s=trace.wall_time)


def cmd_train(args, out: Path) -> dict:
    grid, _, spec = load_phantom(args.phantom)
    geom = _geometry(args, grid)
    rng = _seed_everything(args.seed)
    algo = ALGO_NAMES[args.algo]
    seq = simulate_sequence(grid, SequenceSpec(n_views=args.views, step=args.view_step), geom,
                            scale=geom.norm_scale)
    views = list(seq)
    if args.scene == "nett":
        net = DensityMLP.identity() if args.hidden is None else DensityMLP.nett(
            parse_ints(args.hidden), parse_ints(args.skips))
        field_ = NeTTField(grid, net)
    elif args.scene == "mnerf":
        mask = mask_for(grid, spec)
        save_mask(out / "mask.mask", mask)
        hidden = parse_ints(args.hidden) if args.hidden else (64, 64, 64, 64)
        field_ = MNeRFField(DensityMLP.mnerf(hidden, parse_ints(args.skips)), mask)
    else:
        raise UsageError("train needs --scene nett or --scene mnerf")
    before = mean_psnr(field_, views, geom, algo)
    cfg = TrainConfig(lr=args.lr, patience=args.patience, max_epochs=args.epochs, algorithm=algo)
    net, log = train_field(field_, views, geom, cfg, rng)
    save_mlp(out / "weights.json", net)
    write_csv(out / "train_log.csv", ("epoch", "psnr", "mse", "ffl", "ssim", "loss"), log.epochs)
    after = mean_psnr(field_, views, geom, algo)
    summary = dict(scene=args.scene, algo=args.algo, views=len(views), initial_psnr=before,
                   final_psnr=after, best_epoch=log.best_epoch, epochs=len(log.epochs),
                   reason=log.reason, norm_scale=geom.norm_scale)
    (out / "train.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"PSNR {before:.2f} -> {after:.2f} dB after {len(log.epochs)} epochs ({log.reason})")
    return {}


def cmd_experiment(args, out: Path) -> dict:
    grid, pid, _ = load_phantom(args.phantom)
    geom = _geometry(args, grid)
    weights = parse_weights(args.weights)
    scenes = tuple(args.scene or ("grid",))
    fields = {s: load_scene(s, grid, weights.get(s, weights.get("*"))) for s in scenes}
    cfg = ExperimentConfig(scenes=scenes, losses=tuple(args.loss or ("mi",)),
                           algorithm=ALGO_NAMES[args.algo], targets=tuple(args.targets),
                           trials=args.trials, seed=args.seed, target_style=args.target_style,
                           phantom_id=pid,
                           pose=PoseOptConfig(max_iter=args.max_iter, plateau=args.plateau))

    def progress(row):
        print(f"{row['id']:24s} error {float(row['angle_error']):8.3f} deg  {row['status']}",
              flush=True)

    rows, timings = run_experiment(fields, grid, geom, cfg, progress=progress)
    write_csv(out / "results.csv", RESULT_COLUMNS, rows)
    write_csv(out / "timing.csv", TIMING_COLUMNS, timings)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} trials, {failed} failed -> {out / 'results.csv'}")
    return dict(failed_trials=failed)


def cmd_report(args, out: Path) -> dict:
    rows = []
    for path in args.results:
        rows += read_csv(path)
    if not rows:
        raise UsageError("no result rows to report")
    rep = write_report(rows, out)
    for s in rep["summary"]:
        print(f"{s['scene']:6s} {s['loss']:5s} n={s['n']:4d} mean {s['mean']:.3f} "
              f"std {s['std']:.3f} q90 {s['q90']:.3f} failed {s['failed']}")
    return {}


# ---------------------------------------------------------------- parser

def _common(p, geometry=True):
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("--out", required=True, help="run directory; created if missing")
    if geometry:
        p.add_argument("--phantom", default="default",
                       help="'default', a phantom spec .json or a .grid file")
        p.add_argument("--size", type=int, default=64, help="detector size in pixels")
        p.add_argument("--samples", type=int, default=64, help="samples per ray")


def _scene(p, multi=False, both=False):
    p.add_argument("--scene", choices=("grid", "nett", "mnerf"), default=None if multi else "grid",
                   action="append" if multi else "store")
    p.add_argument("--weights", action="append",
                   help="train run directory (or weights.json); KIND=PATH with several scenes")
    p.add_argument("--algo", choices=(*ALGO_NAMES, "both") if both else tuple(ALGO_NAMES),
                   default="raycast")


def _pose_opts(p):
    p.add_argument("--target-style", choices=("xray", "drr"), default="xray")
    p.add_argument("--max-iter", type=int, default=300)
    p.add_argument("--plateau", type=int, default=50)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drrpose", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"drrpose {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate and save a synthetic skull phantom")
    _common(p, geometry=False)
    p.add_argument("--spec", help="phantom spec .json (default: the standard phantom)")
    p.add_argument("--dims", type=int, default=64)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("render", help="render DRRs with a metadata sidecar")
    _common(p)
    _scene(p, both=True)
    p.set_defaults(func=cmd_render)
    p.add_argument("--pose", default="0,0,0", help="ty,tx,tz[,ux,uy,uz]")

    p = sub.add_parser("sweep-loss", help="loss against each rotational DoF")
    _common(p)
    _scene(p)
    p.add_argument("--loss", action="append", choices=LOSS_NAMES)
    p.add_argument("--target", default="0,0,0")
    p.add_argument("--target-style", choices=("xray", "drr"), default="drr")
    p.add_argument("--range", type=float, nargs=2, default=(-30.0, 30.0), metavar=("LO", "HI"))
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_sweep_loss)

    p = sub.add_parser("estimate", help="estimate one pose")
    _common(p)
    _scene(p)
    _pose_opts(p)
    p.add_argument("--loss", choices=LOSS_NAMES, default="mi")
    p.add_argument("--target", default="0,0,0", help="ground-truth pose")
    p.add_argument("--init", help="initial pose (default: seeded random draw)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("train", help="train a NeTT or mNeRF field on a simulated sequence")
    _common(p)
    _scene(p)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--views", type=int, default=133)
    p.add_argument("--view-step", type=float, default=1.5)
    p.add_argument("--hidden", help="hidden widths, e.g. 64,64,64,64 (NeTT default: identity)")
    p.add_argument("--skips", default="2")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="scene x loss x target x trial pose experiment")
    _common(p)
    _scene(p, multi=True)
    _pose_opts(p)
    p.add_argument("--loss", action="append", choices=LOSS_NAMES)
    p.add_argument("--targets", type=parse_floats, default=DEFAULT_TARGETS,
                   help="principal angles, e.g. -90,-45,0,45,90")
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="summaries, box-plot data and plots from results CSVs")
    _common(p, geometry=False)
    p.add_argument("results", nargs="+", help="results.csv files")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    print(f"drrpose {args.command} seed={args.seed}", flush=True)
    torch.manual_seed(args.seed)
    t0 = time.perf_counter()
    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        extra = args.func(args, out)
        write_manifest(out, args, t0, extra)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
