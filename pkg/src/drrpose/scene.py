"""Density fields sampled by the renderer.

Three interchangeable representations share one method, ``sample(points)``:

* :class:`DenseGrid` - a voxel grid (the CBCT stand-in), trilinear lookup.
* :class:`NeTTField` - grid densities re-mapped by an MLP on an encoding of
  the density value; zero densities bypass the network.
* :class:`MNeRFField` - an MLP on encoded coordinates, forced to zero outside
  a dilated anatomy mask (``mask=None`` gives the unconstrained NeRF).

Grids are cell-centred: with ``n`` voxels over ``[lo, hi]`` voxel ``k`` sits at
``lo + (k + 0.5) * (hi - lo) / n``. Arrays are stored as ``data[iz, iy, ix]``
so that x is the fastest-varying axis in memory.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .geometry import DTYPE

N_FREQ = 6
DENSITY_ENC_WIDTH = 1 + 2 * N_FREQ
POSITION_ENC_WIDTH = 3 + 2 * 3 * N_FREQ


class ConfigurationError(ValueError):
    pass


def _extent_array(extent, ndim=3) -> np.ndarray:
    ext = np.asarray(extent, dtype=np.float64)
    if ext.shape == (2,):
        ext = np.tile(ext, (ndim, 1))
    if ext.shape != (ndim, 2) or np.any(ext[:, 1] <= ext[:, 0]):
        raise ValueError(f"bad extent {extent!r}; need (lo, hi) per axis with lo < hi")
    return ext


class DenseGrid:
    """Voxel densities in ``[0, 1]`` over an axis-aligned box.

    Parameters
    ----------
    data : array_like, shape (nz, ny, nx)
        Stored as float32, the on-disk precision.
    extent : ((xlo, xhi), (ylo, yhi), (zlo, zhi)) or (lo, hi)
    value_scale : float
        Physical density per unit of stored value; metadata only.
    """

    def __init__(self, data, extent=(-1.0, 1.0), value_scale: float = 1.0):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"grid data must be 3-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min(initial=0) < 0 or arr.max(initial=0) > 1:
            raise ValueError("grid densities must be finite and within [0, 1]")
        self.data = arr
        self.extent = _extent_array(extent)
        self.value_scale = float(value_scale)
        self._tensor = None

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def spacing(self) -> np.ndarray:
        return (self.extent[:, 1] - self.extent[:, 0]) / np.array(self.dims)

    def voxel_centers(self) -> np.ndarray:
        """Centres as an array of shape (nz, ny, nx, 3) holding (x, y, z)."""
        axes = [lo + (np.arange(n) + 0.5) * (hi - lo) / n
                for (lo, hi), n in zip(self.extent, self.dims)]
        zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return np.stack([xx, yy, zz], axis=-1)

    def tensor(self) -> torch.Tensor:
        if self._tensor is None:
            self._tensor = torch.from_numpy(self.data.astype(np.float64))[None, None]
        return self._tensor

    def inside(self, points: torch.Tensor) -> torch.Tensor:
        lo = torch.as_tensor(self.extent[:, 0], dtype=points.dtype)
        hi = torch.as_tensor(self.extent[:, 1], dtype=points.dtype)
        return ((points >= lo) & (points <= hi)).all(dim=-1)

    def sample(self, points: torch.Tensor) -> torch.Tensor:
        """Trilinear density at ``points`` (..., 3); exactly 0 outside the box."""
        shape = points.shape[:-1]
        lo = torch.as_tensor(self.extent[:, 0], dtype=points.dtype)
        hi = torch.as_tensor(self.extent[:, 1], dtype=points.dtype)
        norm = (2 * points - (lo + hi)) / (hi - lo)
        vals = F.grid_sample(self.tensor().to(points.dtype), norm.reshape(1, 1, 1, -1, 3),
                             mode="bilinear", padding_mode="zeros", align_corners=False)
        vals = vals.reshape(shape)
        return torch.where(self.inside(points), vals, torch.zeros_like(vals))

    def train(self, mode: bool = True):
        return self

    def eval(self):
        return self


def sample_grid(grid: DenseGrid, p) -> float:
    """Scalar convenience wrapper around :meth:`DenseGrid.sample`."""
    with torch.no_grad():
        return float(grid.sample(torch.as_tensor(np.asarray(p, dtype=np.float64)).reshape(1, 3))[0])


def encode_density(sigma: torch.Tensor) -> torch.Tensor:
    """``[s, sin(2^0 s), cos(2^0 s), ..., sin(2^5 s), cos(2^5 s)]`` per value."""
    sigma = torch.as_tensor(sigma, dtype=DTYPE) if not isinstance(sigma, torch.Tensor) else sigma
    s = sigma[..., None]
    freqs = 2.0 ** torch.arange(N_FREQ, dtype=s.dtype)
    ang = s * freqs
    bands = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)
    return torch.cat([s, bands], dim=-1)


def encode_position(p: torch.Tensor) -> torch.Tensor:
    """``[x, y, z, sin(2^i x), sin(2^i y), sin(2^i z), cos(2^i x), ...]`` for i = 0..5."""
    p = torch.as_tensor(p, dtype=DTYPE) if not isinstance(p, torch.Tensor) else p
    freqs = 2.0 ** torch.arange(N_FREQ, dtype=p.dtype)
    ang = p[..., None, :] * freqs[:, None]  # (..., band, xyz)
    bands = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)
    return torch.cat([p, bands], dim=-1)


class DensityMLP(nn.Module):
    """Dense + ReLU + BatchNorm blocks with encoding skips and a Dense + ReLU head.

    ``skips`` lists the (0-based) hidden layers whose input is concatenated
    with the raw encoding. With ``hidden=()`` the network is a single
    Dense + ReLU layer.
    """

    def __init__(self, in_width: int, hidden=(64, 64, 64, 64), skips=(3,), norm: bool = True):
        super().__init__()
        hidden, skips = tuple(int(h) for h in hidden), tuple(int(s) for s in skips)
        if any(not 0 < s < len(hidden) for s in skips):
            raise ConfigurationError(f"skip indices {skips} must point at hidden layers 1..{len(hidden) - 1}")
        self.in_width, self.hidden, self.skips, self.norm = in_width, hidden, skips, norm
        self.layers = nn.ModuleList()
        self.norms = nn.ModuleList()
        width = in_width
        for k, h in enumerate(hidden):
            if k in skips:
                width += in_width
            self.layers.append(nn.Linear(width, h))
            if norm:
                self.norms.append(nn.BatchNorm1d(h))
            width = h
        self.head = nn.Linear(width, 1)
        self.to(DTYPE)

    @classmethod
    def nett(cls, hidden=(64, 64, 64, 64), skips=(3,), norm=True):
        return cls(DENSITY_ENC_WIDTH, hidden, skips, norm)

    @classmethod
    def mnerf(cls, hidden=(128,) * 6, skips=(2, 4), norm=True):
        return cls(POSITION_ENC_WIDTH, hidden, skips, norm)

    @classmethod
    def identity(cls, in_width: int = DENSITY_ENC_WIDTH) -> "DensityMLP":
        """Single layer returning ``relu(x[0])``."""
        net = cls(in_width, hidden=(), skips=())
        with torch.no_grad():
            net.head.weight.zero_()
            net.head.weight[0, 0] = 1.0
            net.head.bias.zero_()
        return net

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_width:
            raise ConfigurationError(f"input width {x.shape[-1]} != {self.in_width}")
        enc = x = x.reshape(-1, self.in_width)
        # batch statistics need more than one sample
        use_batch_stats = self.training and x.shape[0] > 1
        for k, layer in enumerate(self.layers):
            if k in self.skips:
                x = torch.cat([x, enc], dim=-1)
            x = torch.relu(layer(x))
            if self.norm:
                bn = self.norms[k]
                x = F.batch_norm(x, bn.running_mean, bn.running_var, bn.weight, bn.bias,
                                 training=use_batch_stats, momentum=bn.momentum, eps=bn.eps)
        return torch.relu(self.head(x))[:, 0]

    def flat_parameters(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def set_flat_parameters(self, flat) -> None:
        flat = torch.as_tensor(flat, dtype=DTYPE)
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(flat[offset:offset + n].reshape(p.shape))
                offset += n


def mlp_forward(w: DensityMLP, x: torch.Tensor, mode: str = "infer") -> torch.Tensor:
    """Run the network in ``"train"`` (batch stats) or ``"infer"`` mode."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    w.train(mode == "train")
    return w(x)


class NeTTField(nn.Module):
    """Grid densities tuned by an MLP; exact zeros are passed through untouched."""

    def __init__(self, grid: DenseGrid, mlp: DensityMLP):
        super().__init__()
        if mlp.in_width != DENSITY_ENC_WIDTH:
            raise ConfigurationError("NeTT network must take the 13-wide density encoding")
        self.grid = grid
        self.mlp = mlp

    def sample(self, points: torch.Tensor) -> torch.Tensor:
        sigma = self.grid.sample(points)
        nonzero = sigma != 0
        out = torch.zeros_like(sigma)
        if nonzero.any():
            out = out.masked_scatter(nonzero, self.mlp(encode_density(sigma[nonzero])))
        return out


def nett_sample(grid: DenseGrid, w: DensityMLP, p) -> float:
    with torch.no_grad():
        pts = torch.as_tensor(np.asarray(p, dtype=np.float64)).reshape(1, 3)
        return float(NeTTField(grid, w).sample(pts)[0])


class Mask3D:
    """Boolean occupancy aligned with a grid; lookups use the containing voxel."""

    def __init__(self, data, extent=(-1.0, 1.0), dilation: float = 0.0):
        arr = np.ascontiguousarray(data, dtype=bool)
        if arr.ndim != 3:
            raise ValueError("mask must be 3-D")
        self.data = arr
        self.extent = _extent_array(extent)
        self.dilation = float(dilation)
        self._tensor = torch.from_numpy(arr.reshape(-1).copy())

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    def lookup(self, points: torch.Tensor) -> torch.Tensor:
        pts = points.detach()
        lo = torch.as_tensor(self.extent[:, 0], dtype=pts.dtype)
        hi = torch.as_tensor(self.extent[:, 1], dtype=pts.dtype)
        n = torch.as_tensor(self.dims, dtype=pts.dtype)
        idx = torch.floor((pts - lo) / (hi - lo) * n).long()
        nl = torch.as_tensor(self.dims)
        inside = ((pts >= lo) & (pts <= hi)).all(-1)
        idx = torch.minimum(idx.clamp_min(0), nl - 1)  # p == hi belongs to the last voxel
        flat = (idx[..., 2] * nl[1] + idx[..., 1]) * nl[0] + idx[..., 0]
        return inside & self._tensor[flat]


def build_mask(grid: DenseGrid, threshold: float = 0.05, dilation: float = 0.0) -> Mask3D:
    """Threshold the grid and dilate by a ball of radius ``dilation`` (extent units)."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    core = grid.data > threshold
    if dilation > 0:
        sp = grid.spacing  # (x, y, z)
        reach = np.floor(dilation / sp).astype(int)
        oz, oy, ox = np.meshgrid(*(np.arange(-r, r + 1) for r in reach[::-1]), indexing="ij")
        ball = (ox * sp[0]) ** 2 + (oy * sp[1]) ** 2 + (oz * sp[2]) ** 2 <= dilation ** 2 + 1e-12
        core = ndimage.binary_dilation(core, structure=ball) if ball.size > 1 else core
    return Mask3D(core, grid.extent, dilation)


class MNeRFField(nn.Module):
    """Coordinate network whose output is zero outside ``mask``."""

    def __init__(self, mlp: DensityMLP, mask: Mask3D | None):
        super().__init__()
        if mlp.in_width != POSITION_ENC_WIDTH:
            raise ConfigurationError("mNeRF network must take the 39-wide positional encoding")
        self.mlp = mlp
        self.mask = mask

    def sample(self, points: torch.Tensor) -> torch.Tensor:
        if self.mask is None:
            flat = points.reshape(-1, 3)
            return self.mlp(encode_position(flat)).reshape(points.shape[:-1])
        keep = self.mask.lookup(points)
        out = torch.zeros(points.shape[:-1], dtype=points.dtype)
        if keep.any():
            out = out.masked_scatter(keep, self.mlp(encode_position(points[keep])))
        return out


def mnerf_sample(w: DensityMLP, mask: Mask3D | None, p) -> float:
    with torch.no_grad():
        pts = torch.as_tensor(np.asarray(p, dtype=np.float64)).reshape(1, 3)
        return float(MNeRFField(w, mask).sample(pts)[0])


def mm_to_extent_units(length_mm: float, physical_size_mm: float, extent_size: float = 2.0) -> float:
    """Convert a physical length into the grid's extent units."""
    return length_mm * extent_size / physical_size_mm
