"""Experiment drivers: loss sweeps, pooled pose-estimation trials and reports.

Everything here is deterministic given a seed. Trial ``(target, trial)`` draws
its initial pose from ``default_rng([seed, target_index, trial])``, so every
scene and loss in a run starts from the same initial poses. Wall-clock times
are kept apart from the result tables so that reruns give byte-identical CSVs.
"""
from __future__ import annotations

import csv
import io as _io
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import SequenceSpec, preprocess_image, simulate_sequence
from .geometry import DTYPE, Pose, RenderGeometry, angle_error
from .losses import LOSS_NAMES, image_loss
from .optim import OptimizationError, PoseOptConfig, estimate_pose, random_init_pose
from .render import drr_image, render_drr

DEFAULT_TARGETS = (-90.0, -45.0, 0.0, 45.0, 90.0)
SCENE_KINDS = ("grid", "nett", "mnerf")
WORKERS_ENV = "DRRPOSE_WORKERS"
SWEEP_DOFS = ("theta_y", "theta_x", "theta_z")
POSE_FIELDS = ("theta_y", "theta_x", "theta_z", "u_x", "u_y", "u_z")
RESULT_COLUMNS = (["id", "phantom", "target_id", "target_angle", "trial", "loss", "scene", "algo"]
                  + [f"init_{k}" for k in POSE_FIELDS] + [f"final_{k}" for k in POSE_FIELDS]
                  + ["angle_error", "iterations", "reason", "status"])
TIMING_COLUMNS = ("id", "wall_time_s")
SWEEP_COLUMNS = ("dof", "angle_deg", "loss", "value", "derivative")


def worker_count() -> int:
    """Number of trial workers from ``DRRPOSE_WORKERS`` (default 1)."""
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return n


def fmt(x) -> str:
    """Shortest text that reads back to the same float (``repr``)."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c, "")) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- geometry

def standard_geometry(grid, size: int = 64, n_samples: int = 64, angles=DEFAULT_TARGETS
                      ) -> RenderGeometry:
    """Desk-scale imaging setup with a frozen normalisation constant.

    SOD and SID follow the scaled clinical pair (7.8125, 6 * size) so the
    field of view matches at every detector size. ``norm_scale`` is the 99.9th
    percentile of ray-cast absorbance over the views at ``angles``.
    """
    geom = RenderGeometry(7.8125, 6.0 * size, size, size, n_samples=n_samples)
    seq = simulate_sequence(grid, SequenceSpec.explicit(angles), geom)
    return geom.with_(norm_scale=seq.scale)


def target_image(grid, pose: Pose, geom: RenderGeometry, style: str = "xray") -> torch.Tensor:
    """Ground-truth image of ``grid`` at ``pose``.

    ``"xray"`` renders the intensity ``exp(-A)`` and sends it through the
    radiograph preprocessing chain; ``"drr"`` is the normalised ray-cast
    image, i.e. exactly what the optimiser renders.
    """
    with torch.no_grad():
        if style == "xray":
            raw = render_drr(grid, pose, geom, output="intensity")
            return torch.as_tensor(preprocess_image(raw), dtype=DTYPE)
        if style == "drr":
            return drr_image(grid, pose, geom)
    raise ValueError(f"unknown target style {style!r}; use 'xray' or 'drr'")


# ---------------------------------------------------------------- sweeps

def sweep_losses(field_, geom: RenderGeometry, target, losses=LOSS_NAMES, lo: float = -30.0,
                 hi: float = 30.0, step: float = 1.0, algorithm: str = "ray_cast",
                 dofs=SWEEP_DOFS) -> list[dict]:
    """Loss against each rotational DoF with the others held at zero.

    Values are shifted so that the 0 degree row is exactly zero. The
    derivative column is the backward difference ``(v[i] - v[i-1]) / step``
    and is empty on the first row of each sweep.
    """
    n = int(round((hi - lo) / step))
    if n < 1 or abs(lo + n * step - hi) > 1e-9:
        raise ValueError("sweep range must be a whole number of steps")
    angles = lo + step * np.arange(n + 1)
    if not np.any(np.abs(angles) < 1e-12):
        raise ValueError("sweep grid must contain 0 degrees")
    target = torch.as_tensor(target, dtype=DTYPE)
    rows = []
    field_.eval()
    for d, dof in enumerate(dofs):
        values = {k: [] for k in losses}
        with torch.no_grad():
            for a in angles:
                theta = [0.0, 0.0, 0.0]
                theta[d] = float(a)
                img = drr_image(field_, Pose(tuple(theta)), geom, algorithm)
                for k in losses:
                    values[k].append(float(image_loss(k, img, target)))
        zero = int(np.argmin(np.abs(angles)))
        for k in losses:
            v = np.asarray(values[k]) - values[k][zero]
            for i, a in enumerate(angles):
                rows.append(dict(dof=dof, angle_deg=float(a), loss=k, value=float(v[i]),
                                 derivative="" if i == 0 else float((v[i] - v[i - 1]) / step)))
    return rows


def sign_changes(derivative) -> int:
    """Sign flips in a derivative series; zeros and blanks are skipped."""
    vals = [float(d) for d in derivative if d != ""]
    s = np.sign(vals)
    s = s[s != 0]
    return int(np.sum(s[1:] != s[:-1]))


def count_sign_changes(rows) -> dict:
    """``{(dof, loss): count}`` for sweep rows."""
    series = {}
    for r in rows:
        series.setdefault((r["dof"], r["loss"]), []).append(r["derivative"])
    return {k: sign_changes(v) for k, v in series.items()}


# ---------------------------------------------------------------- trials

@dataclass
class ExperimentConfig:
    scenes: tuple = ("grid",)
    losses: tuple = ("mi",)
    algorithm: str = "ray_cast"
    targets: tuple = DEFAULT_TARGETS
    trials: int = 5
    seed: int = 0
    target_style: str = "xray"
    phantom_id: str = "phantom"
    pose: PoseOptConfig = field(default_factory=PoseOptConfig)

    def __post_init__(self):
        if not self.scenes or not self.losses:
            raise ValueError("need at least one scene kind and one loss")
        for s in self.scenes:
            if s not in SCENE_KINDS:
                raise ValueError(f"unknown scene {s!r}; choose from {SCENE_KINDS}")
        for k in self.losses:
            if k not in LOSS_NAMES:
                raise ValueError(f"unknown loss {k!r}; choose from {LOSS_NAMES}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.seed is None:
            raise ValueError("a seed is required")


def init_pose_for(truth: Pose, seed: int, target_id: int, trial: int, half_range=None) -> Pose:
    rng = np.random.default_rng([seed, target_id, trial])
    if half_range is None:
        return random_init_pose(truth, rng)
    return random_init_pose(truth, rng, half_range)


def _units(cfg: ExperimentConfig):
    for scene in cfg.scenes:
        for loss in cfg.losses:
            for t, angle in enumerate(cfg.targets):
                for trial in range(cfg.trials):
                    yield scene, loss, t, float(angle), trial


def run_experiment(fields: dict, ground_truth, geom: RenderGeometry, cfg: ExperimentConfig,
                   workers: int | None = None, progress=None):
    """Run the scene x loss x target x trial cross-product.

    ``fields`` maps each scene kind to the field the optimiser renders and
    ``ground_truth`` is the grid that produces the target images. Returns
    ``(rows, timings)``; rows are sorted by unit and failed units carry
    their error message in ``status``.
    """
    missing = [s for s in cfg.scenes if s not in fields]
    if missing:
        raise ValueError(f"no field supplied for scene(s) {missing}")
    targets = [target_image(ground_truth, Pose((a, 0.0, 0.0)), geom, cfg.target_style)
               for a in cfg.targets]
    units = list(_units(cfg))

    def run(unit):
        scene, loss, t, angle, trial = unit
        truth = Pose((angle, 0.0, 0.0))
        init = init_pose_for(truth, cfg.seed, t, trial, cfg.pose.half_range)
        row = dict(id=f"{scene}-{loss}-t{t}-r{trial}", phantom=cfg.phantom_id, target_id=t,
                   target_angle=angle, trial=trial, loss=loss, scene=scene, algo=cfg.algorithm)
        row.update({f"init_{k}": v for k, v in zip(POSE_FIELDS, init.as_vector())})
        pcfg = PoseOptConfig(**{**cfg.pose.__dict__, "loss": loss, "algorithm": cfg.algorithm})
        t0 = time.perf_counter()
        try:
            trace = estimate_pose(targets[t], fields[scene], geom, init, pcfg)
        except (OptimizationError, FloatingPointError, RuntimeError, ValueError) as exc:
            row.update({f"final_{k}": math.nan for k in POSE_FIELDS})
            row.update(angle_error=math.nan, iterations=0, reason="error",
                       status=f"error: {type(exc).__name__}: {exc}")
        else:
            row.update({f"final_{k}": v for k, v in zip(POSE_FIELDS, trace.best_pose.as_vector())})
            row.update(angle_error=angle_error(trace.best_pose.theta, truth.theta),
                       iterations=trace.iterations, reason=trace.reason, status="ok")
        wall = time.perf_counter() - t0
        if progress is not None:
            progress(row)
        return row, dict(id=row["id"], wall_time_s=wall)

    n = worker_count() if workers is None else workers
    if n == 1:
        out = [run(u) for u in units]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            out = list(pool.map(run, units))
    order = {u: i for i, u in enumerate(units)}
    out.sort(key=lambda pair: order[(pair[0]["scene"], pair[0]["loss"], pair[0]["target_id"],
                                     pair[0]["target_angle"], pair[0]["trial"])])
    return [r for r, _ in out], [t for _, t in out]


# ---------------------------------------------------------------- reports

def nearest_rank(values, q: float) -> float:
    """Nearest-rank quantile: the ``ceil(q * n)``-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        return math.nan
    if not 0 < q <= 1:
        raise ValueError("quantile must lie in (0, 1]")
    return float(v[max(1, math.ceil(q * v.size - 1e-12)) - 1])


def _errors(rows) -> np.ndarray:
    return np.asarray([float(r["angle_error"]) for r in rows
                       if r["status"] == "ok" and math.isfinite(float(r["angle_error"]))])


def _group(rows, keys):
    groups = {}
    for r in rows:
        groups.setdefault(tuple(str(r[k]) for k in keys), []).append(r)
    return groups


def summarize(rows, by=("scene", "loss")) -> list[dict]:
    """Mean, sample std, median and nearest-rank 90% quantile of angle error."""
    out = []
    for key, group in _group(rows, by).items():
        e = _errors(group)
        n = e.size
        out.append(dict(zip(by, key), n=n, failed=len(group) - n,
                        mean=float(e.mean()) if n else math.nan,
                        std=float(e.std(ddof=1)) if n > 1 else math.nan,
                        median=float(np.median(e)) if n else math.nan,
                        q90=nearest_rank(e, 0.9)))
    return out


def boxplot_data(rows) -> list[dict]:
    """Per scene, loss and target: quartiles, whisker ends and count."""
    out = []
    for (scene, loss, target), group in _group(rows, ("scene", "loss", "target_angle")).items():
        e = _errors(group)
        if e.size == 0:
            continue
        q1, med, q3 = np.percentile(e, [25, 50, 75])
        iqr = q3 - q1
        inside = e[(e >= q1 - 1.5 * iqr) & (e <= q3 + 1.5 * iqr)]
        out.append(dict(scene=scene, loss=loss, target_angle=float(target), n=e.size,
                        whisker_low=float(inside.min()), q1=float(q1), median=float(med),
                        q3=float(q3), whisker_high=float(inside.max()),
                        outliers=int(e.size - inside.size)))
    return out


def _pm(s) -> str:
    return f"{s['mean']:.2f} ± {s['std']:.2f}" if s["n"] > 1 else f"{s['mean']:.2f}"


def table1_text(summary) -> str:
    """One row per scene and loss."""
    lines = ["| scene | loss | n | 3D angle error (deg) | 90% quantile |",
             "|---|---|---|---|---|"]
    for s in summary:
        lines.append(f"| {s['scene']} | {s['loss']} | {s['n']} | {_pm(s)} | {s['q90']:.2f} |")
    return "\n".join(lines) + "\n"


def table_s1_text(summary, algo: str) -> str:
    """One row per scene kind, one column per loss."""
    losses = list(dict.fromkeys(s["loss"] for s in summary))
    scenes = list(dict.fromkeys(s["scene"] for s in summary))
    cell = {(s["scene"], s["loss"]): _pm(s) for s in summary}
    lines = [f"| scene ({algo}) | " + " | ".join(losses) + " |",
             "|---" * (len(losses) + 1) + "|"]
    for sc in scenes:
        lines.append(f"| {sc} | " + " | ".join(cell.get((sc, k), "") for k in losses) + " |")
    return "\n".join(lines) + "\n"


def plot_sweep(rows, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    dofs = list(dict.fromkeys(r["dof"] for r in rows))
    fig, axes = plt.subplots(1, len(dofs), figsize=(4 * len(dofs), 3.2), squeeze=False)
    for ax, dof in zip(axes[0], dofs):
        for (d, loss), group in _group(rows, ("dof", "loss")).items():
            if d != dof:
                continue
            ax.plot([float(r["angle_deg"]) for r in group], [float(r["value"]) for r in group],
                    label=loss)
        ax.set_title(dof)
        ax.set_xlabel("angle (deg)")
    axes[0][0].set_ylabel("loss - loss(0)")
    axes[0][-1].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_boxes(rows, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = _group(rows, ("scene", "loss"))
    fig, axes = plt.subplots(1, len(groups), figsize=(4 * len(groups), 3.2), squeeze=False)
    for ax, ((scene, loss), group) in zip(axes[0], groups.items()):
        by_target = _group(group, ("target_angle",))
        labels = sorted(by_target, key=lambda k: float(k[0]))
        ax.boxplot([_errors(by_target[k]) for k in labels],
                   tick_labels=[f"{float(k[0]):g}" for k in labels])
        ax.set_title(f"{scene} / {loss}")
        ax.set_xlabel("target angle (deg)")
    axes[0][0].set_ylabel("3D angle error (deg)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def csv_text(columns, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def write_report(rows, out_dir, algo: str | None = None) -> dict:
    """Summary CSVs, Markdown tables, box-plot data and a box plot."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(rows)
    cols = ("scene", "loss", "n", "failed", "mean", "std", "median", "q90")
    write_csv(out / "summary.csv", cols, summary)
    box = boxplot_data(rows)
    write_csv(out / "boxplot.csv", ("scene", "loss", "target_angle", "n", "whisker_low", "q1",
                                    "median", "q3", "whisker_high", "outliers"), box)
    algo = algo or (rows[0].get("algo", "") if rows else "")
    (out / "table1.md").write_text(table1_text(summary))
    (out / "table_s1.md").write_text(table_s1_text(summary, algo))
    if box:
        plot_boxes(rows, out / "boxplot.png")
    return dict(summary=summary, boxplot=box)
