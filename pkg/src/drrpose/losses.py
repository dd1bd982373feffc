"""Differentiable image losses on 2-D tensors with values in ``[0, 1]``.

All losses are "lower is better"; similarity measures are complemented or
negated. Every function accepts torch tensors (gradients flow through both
arguments) or array-likes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .geometry import DTYPE

LOSS_NAMES = ("l1", "mse", "ssim", "dice", "mi")


def _pair(a, b):
    a = a if isinstance(a, torch.Tensor) else torch.as_tensor(a, dtype=DTYPE)
    b = b if isinstance(b, torch.Tensor) else torch.as_tensor(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def pixel_loss(kind: str, a, b) -> torch.Tensor:
    a, b = _pair(a, b)
    if kind == "l1":
        return (a - b).abs().mean()
    if kind == "mse":
        return ((a - b) ** 2).mean()
    raise ValueError(f"unknown pixel loss {kind!r}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=DTYPE) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_map(a, b, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03):
    """Local SSIM over the valid region (no padding), data range 1."""
    a, b = _pair(a, b)
    if min(a.shape[-2:]) < size:
        raise ValueError(f"images smaller than the {size}-tap window")
    g = gaussian_window(size, sigma).to(a.dtype)
    win = (g[:, None] * g[None, :])[None, None]

    def filt(x):
        return F.conv2d(x[None, None], win)[0, 0]

    c1, c2 = k1 ** 2, k2 ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim_loss(a, b) -> torch.Tensor:
    return 1.0 - ssim_map(a, b).mean()


def soft_dice_loss(a, b, eps: float = 1e-6) -> torch.Tensor:
    a, b = _pair(a, b)
    return 1.0 - (2 * (a * b).sum() + eps) / ((a * a).sum() + (b * b).sum() + eps)


@dataclass(frozen=True)
class MiConfig:
    bins: int = 32
    bandwidth: float = 1.0 / 32

    def __post_init__(self):
        if self.bins < 2 or not self.bandwidth > 0:
            raise ValueError("MI needs bins >= 2 and a positive bandwidth")


def parzen_weights(x: torch.Tensor, cfg: MiConfig) -> torch.Tensor:
    """Per-pixel Gaussian bin memberships, each row summing to one."""
    centers = (torch.arange(cfg.bins, dtype=x.dtype) + 0.5) / cfg.bins
    z = (x.reshape(-1, 1) - centers) / cfg.bandwidth
    w = torch.exp(-0.5 * z ** 2)
    return w / w.sum(dim=1, keepdim=True)


def joint_histogram(a, b, cfg: MiConfig = MiConfig()) -> torch.Tensor:
    a, b = _pair(a, b)
    wa, wb = parzen_weights(a, cfg), parzen_weights(b, cfg)
    return wa.T @ wb / wa.shape[0]


_TINY = 1e-300


def mutual_information(a, b, cfg: MiConfig = MiConfig()) -> torch.Tensor:
    p = joint_histogram(a, b, cfg)
    pa = p.sum(dim=1, keepdim=True)
    pb = p.sum(dim=0, keepdim=True)
    return (p * (torch.log(p.clamp_min(_TINY)) - torch.log((pa * pb).clamp_min(_TINY)))).sum()


def mutual_information_loss(a, b, cfg: MiConfig = MiConfig()) -> torch.Tensor:
    return -mutual_information(a, b, cfg)


def focal_frequency_loss(a, b, alpha: float = 1.0) -> torch.Tensor:
    """Spectral squared distance weighted by its own normalised magnitude.

    Uses orthonormal 2-D DFTs. The focal weight is kept inside the graph, so
    the returned gradient is the true gradient of the returned value.
    """
    a, b = _pair(a, b)
    h, w = a.shape[-2:]
    if h & (h - 1) or w & (w - 1):
        raise ValueError(f"focal frequency loss needs power-of-two sizes, got {h}x{w}")
    diff = torch.fft.fft2(a, norm="ortho") - torch.fft.fft2(b, norm="ortho")
    dist = diff.real ** 2 + diff.imag ** 2
    mag = torch.sqrt(dist.clamp_min(_TINY)) ** alpha
    top = mag.max()
    weight = mag / top if float(top.detach()) > 0 else torch.zeros_like(mag)
    return (weight * dist).mean()


def training_loss(a, b, weights=(1.0, 1.0, 0.1)) -> torch.Tensor:
    """Weighted MSE + focal frequency + SSIM loss."""
    w1, w2, w3 = (float(w) for w in weights)
    if min(w1, w2, w3) < 0:
        raise ValueError("loss weights must be non-negative")
    total = w1 * pixel_loss("mse", a, b)
    if w2:
        total = total + w2 * focal_frequency_loss(a, b)
    if w3:
        total = total + w3 * ssim_loss(a, b)
    return total


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for range-1 images (``inf`` if identical)."""
    with torch.no_grad():
        mse = float(pixel_loss("mse", a, b))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def image_loss(name: str, a, b, mi_cfg: MiConfig = MiConfig()) -> torch.Tensor:
    """Dispatch on the short loss names used by the CLI and experiments."""
    if name in ("l1", "mse"):
        return pixel_loss(name, a, b)
    if name == "ssim":
        return ssim_loss(a, b)
    if name == "dice":
        return soft_dice_loss(a, b)
    if name == "mi":
        return mutual_information_loss(a, b, mi_cfg)
    raise ValueError(f"unknown loss {name!r}; choose from {LOSS_NAMES}")
