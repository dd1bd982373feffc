"""DRR synthesis by Beer-Lambert ray casting or NeRF-style volume rendering.

Every field exposing ``sample(points)`` can be rendered; gradients flow back
to the pose (when it is a tensor requiring grad) and to network weights.

Sampling uses ``n_samples`` equal bins on ``[near, far]``. ``midpoint`` puts
one sample at each bin centre, ``stratified`` one uniform draw per bin. The
spacing attached to every sample is the bin width, so the absorbance sum is
a midpoint (or Monte Carlo) quadrature of the line integral.

Images compared by the losses are normalised absorbance maps: ``A`` divided by
the geometry's frozen ``norm_scale`` and clamped to ``[0, 1]`` (bone bright,
like an inverted radiograph). The volume-rendered luminance is bone-bright as
well and goes through the same normalisation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import (DTYPE, ObjectPose, RenderGeometry, local_directions,
                       object_transform, pose_to_rays, slab_bounds)

ALGORITHMS = ("ray_cast", "volume")
MAX_CHUNK_SAMPLES = 1 << 21


@dataclass
class RaySamples:
    t: torch.Tensor       # (..., Ns)
    delta: torch.Tensor   # (..., Ns)
    sigma: torch.Tensor   # (..., Ns)


def sample_positions(near, far, n_samples: int, mode: str = "midpoint", rng=None):
    """Sample parameters ``t`` and spacings ``delta`` for rays on ``[near, far]``."""
    near = torch.as_tensor(near, dtype=DTYPE)
    far = torch.as_tensor(far, dtype=DTYPE)
    if torch.any(far <= near):
        raise ValueError("every ray needs near < far")
    width = (far - near) / n_samples
    if mode == "midpoint":
        offsets = torch.arange(n_samples, dtype=DTYPE) + 0.5
        offsets = offsets.expand(*near.shape, n_samples)
    elif mode == "stratified":
        rng = np.random.default_rng() if rng is None else rng
        jitter = torch.from_numpy(rng.random(tuple(near.shape) + (n_samples,)))
        offsets = torch.arange(n_samples, dtype=DTYPE) + jitter
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    t = near[..., None] + offsets * width[..., None]
    delta = width[..., None].expand_as(t)
    return t, delta


def sample_along_ray(field, rays, n_samples: int, mode: str = "midpoint", rng=None) -> RaySamples:
    """Densities of ``field`` along each ray of ``rays``."""
    t, delta = sample_positions(rays.near, rays.far, n_samples, mode, rng)
    points = rays.origin + t[..., None] * rays.directions[..., None, :]
    return RaySamples(t=t, delta=delta, sigma=field.sample(points))


def ray_cast_absorbance(samples: RaySamples) -> torch.Tensor:
    return (samples.sigma * samples.delta).sum(dim=-1)


def absorbance_to_intensity(a, i0: float = 1.0):
    if i0 <= 0:
        raise ValueError("emitted intensity must be positive")
    return i0 * torch.exp(-torch.as_tensor(a, dtype=DTYPE))


def volume_render_intensity(samples: RaySamples) -> torch.Tensor:
    """``sum_i alpha_i T_i sigma_i`` with exclusive transmittance ``T_1 = 1``."""
    tau = samples.sigma * samples.delta
    alpha = 1.0 - torch.exp(-tau)
    acc = torch.cumsum(tau, dim=-1) - tau
    trans = torch.exp(-acc)
    return (alpha * trans * samples.sigma).sum(dim=-1)


def _integrate(samples: RaySamples, algorithm: str, output: str) -> torch.Tensor:
    if algorithm == "ray_cast":
        a = ray_cast_absorbance(samples)
        return a if output == "absorbance" else absorbance_to_intensity(a)
    return volume_render_intensity(samples)


def _check_args(algorithm, output):
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    if output not in ("absorbance", "intensity"):
        raise ValueError(f"unknown output {output!r}")
    if algorithm == "volume" and output != "intensity":
        raise ValueError("volume rendering yields luminance; use output='intensity'")


def _render_points(field, origin, directions, near, far, n_samples, algorithm, output,
                   mode, rng, warp=None):
    """Integrate rays, chunking over rows when no graph has to be kept."""
    chunked = (not torch.is_grad_enabled() and not getattr(field, "training", False)
               and mode == "midpoint")
    rows = directions.shape[0]
    per_row = directions[0].numel() // 3 * n_samples
    step = max(1, MAX_CHUNK_SAMPLES // max(per_row, 1)) if chunked else rows
    out = []
    for r0 in range(0, rows, step):
        sl = slice(r0, r0 + step)
        t, delta = sample_positions(near[sl], far[sl], n_samples, mode, rng)
        points = origin + t[..., None] * directions[sl][..., None, :]
        if warp is not None:
            points = warp(points)
        samples = RaySamples(t=t, delta=delta, sigma=field.sample(points))
        out.append(_integrate(samples, algorithm, output))
    return out[0] if len(out) == 1 else torch.cat(out, dim=0)


def render_drr(field, pose, geom: RenderGeometry, algorithm: str = "ray_cast",
               output: str = "absorbance", mode: str = "midpoint", rng=None) -> torch.Tensor:
    """Raw DRR of shape (height, width) from a posed (moving) source.

    ``pose`` may be a :class:`~drrpose.geometry.Pose` or a (6,) tensor; pass a
    tensor that requires grad to differentiate with respect to the pose.
    """
    _check_args(algorithm, output)
    if not geom.sid > geom.sod:
        raise ValueError("degenerate geometry: sid must exceed sod")
    rays = pose_to_rays(pose, geom)
    return _render_points(field, rays.origin, rays.directions, rays.near, rays.far,
                          geom.n_samples, algorithm, output, mode, rng)


def render_object_drr(field, obj: ObjectPose, geom: RenderGeometry, algorithm: str = "ray_cast",
                      output: str = "absorbance", mode: str = "midpoint", rng=None) -> torch.Tensor:
    """DRR from the stationary identity source with the object moved by ``obj``."""
    _check_args(algorithm, output)
    m, v = object_transform(obj)
    d_loc, cos_axis = local_directions(geom)
    origin = torch.tensor([0.0, 0.0, geom.sod], dtype=DTYPE)
    # depth of the moved object centre along the viewing axis
    near, far = slab_bounds(geom.sod - v[2], cos_axis, geom.half_extent)

    def to_object(points):
        return (points - v) @ m  # row-vector form of m.T @ (p - v)

    return _render_points(field, origin, d_loc, near, far, geom.n_samples, algorithm,
                          output, mode, rng, warp=to_object)


def normalize_image(raw: torch.Tensor, scale: float) -> torch.Tensor:
    return torch.clamp(raw / scale, 0.0, 1.0)


def drr_image(field, pose, geom: RenderGeometry, algorithm: str = "ray_cast",
              mode: str = "midpoint", rng=None) -> torch.Tensor:
    """Normalised bone-bright image in ``[0, 1]`` used by losses and training."""
    output = "absorbance" if algorithm == "ray_cast" else "intensity"
    raw = render_drr(field, pose, geom, algorithm, output, mode, rng)
    return normalize_image(raw, geom.norm_scale)


def absorbance_scale(raw_images, percentile: float = 99.9) -> float:
    """Normalisation constant: the given percentile of all raw pixel values."""
    vals = np.concatenate([np.asarray(torch.as_tensor(im).detach()).ravel() for im in raw_images])
    scale = float(np.percentile(vals, percentile))
    if not scale > 0:
        raise ValueError("ground-truth sequence is empty (all-zero absorbance)")
    return scale
