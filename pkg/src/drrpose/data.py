"""Synthetic phantoms, tomographic sequences and radiograph preprocessing."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .geometry import Pose, RenderGeometry, euler_yxz_to_matrix
from .render import absorbance_scale, normalize_image, render_drr
from .scene import DenseGrid

PRIMITIVE_KINDS = ("ellipsoid", "box", "rod")


@dataclass
class Primitive:
    """A solid shape painted into the phantom.

    ``size`` holds radii (ellipsoid), half-extents (box) or
    ``(radius, half_length, unused)`` for a rod along its local Y axis.
    ``shell > 0`` hollows an ellipsoid to that wall thickness. ``mode="set"``
    overwrites what is underneath, ``"add"`` accumulates.
    """

    kind: str
    center: tuple
    size: tuple
    density: float
    rotation: tuple = (0.0, 0.0, 0.0)
    shell: float = 0.0
    mode: str = "set"

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.mode not in ("set", "add"):
            raise ValueError(f"unknown paint mode {self.mode!r}")

    def inside(self, pts: np.ndarray) -> np.ndarray:
        rot = euler_yxz_to_matrix(self.rotation)
        q = (pts - np.asarray(self.center, dtype=np.float64)) @ rot  # into local frame
        s = np.asarray(self.size, dtype=np.float64)
        if self.kind == "ellipsoid":
            hit = np.sum((q / s) ** 2, axis=-1) <= 1.0
            if self.shell > 0:
                inner = np.maximum(s - self.shell, 1e-9)
                hit &= np.sum((q / inner) ** 2, axis=-1) > 1.0
            return hit
        if self.kind == "box":
            return np.all(np.abs(q) <= s, axis=-1)
        radius, half_length = s[0], s[1]
        return (q[..., 0] ** 2 + q[..., 2] ** 2 <= radius ** 2) & (np.abs(q[..., 1]) <= half_length)


def skull_primitives() -> list[Primitive]:
    """Skull-like default: bone shell, brain, cavities, face, spine, ridges.

    Sized like an adult head inside a 256 mm cube (about 140 mm wide), so
    the frontal field of view is filled and slightly cropped.
    """
    E, R = "ellipsoid", "rod"
    return [
        Primitive(E, (0.0, 0.104, 0.0), (0.546, 0.598, 0.65), 0.22),                    # brain
        Primitive(E, (0.0, 0.104, 0.0), (0.546, 0.598, 0.65), 0.85, shell=0.078),       # calvarium
        Primitive(E, (-0.117, 0.156, -0.026), (0.065, 0.13, 0.208), 0.06),              # ventricles
        Primitive(E, (0.117, 0.156, -0.026), (0.065, 0.13, 0.208), 0.06),
        Primitive(E, (0.0, -0.364, 0.286), (0.39, 0.208, 0.312), 0.70, shell=0.065),    # face
        Primitive(E, (0.0, -0.546, 0.234), (0.351, 0.104, 0.286), 0.80, shell=0.058),   # mandible
        Primitive(E, (-0.195, -0.026, 0.52), (0.104, 0.091, 0.091), 0.04),              # orbits
        Primitive(E, (0.195, -0.026, 0.52), (0.104, 0.091, 0.091), 0.04),
        Primitive(R, (0.0, -0.26, 0.611), (0.046, 0.13, 0.0), 0.55, rotation=(0, -25, 0)),   # nasal
        Primitive(R, (0.0, -0.65, -0.156), (0.104, 0.286, 0.0), 0.80),                       # spine
        Primitive(R, (-0.26, -0.156, -0.065), (0.046, 0.208, 0.0), 0.90, rotation=(35, 0, 90)),  # petrous
        Primitive(R, (0.26, -0.156, -0.065), (0.046, 0.208, 0.0), 0.90, rotation=(-35, 0, 90)),
    ]


def marker_primitives() -> list[Primitive]:
    """Off-sagittal features that differ between the left and right sides."""
    return [
        Primitive("ellipsoid", (0.364, 0.364, 0.156), (0.078, 0.078, 0.078), 1.0),
        Primitive("rod", (-0.39, -0.065, -0.286), (0.046, 0.156, 0.0), 1.0, rotation=(0, 90, 0)),
        Primitive("box", (-0.156, 0.39, -0.39), (0.065, 0.052, 0.091), 0.95, rotation=(20, 0, 0)),
    ]


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    extent: tuple = (-1.0, 1.0)
    physical_size_mm: float = 256.0
    primitives: list = field(default_factory=skull_primitives)
    markers: bool = True
    n_blobs: int = 6
    seed: int = 0
    supersample: int = 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["primitives"] = [asdict(p) for p in self.primitives]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        prims = [Primitive(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in p.items()})
                 for p in d.pop("primitives", [])]
        for key in ("dims", "extent"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(primitives=prims, **d)

    @classmethod
    def empty(cls, **kw) -> "PhantomSpec":
        """No skull, markers or blobs; pass ``primitives=`` to paint your own."""
        kw.setdefault("primitives", [])
        return cls(markers=False, n_blobs=0, **kw)


def _blobs(rng, n) -> list[Primitive]:
    out = []
    for _ in range(n):
        c = rng.uniform(-1, 1, 3) * np.array([0.33, 0.33, 0.39]) + np.array([0.0, 0.1, 0.0])
        r = rng.uniform(0.05, 0.1, 3)
        out.append(Primitive("ellipsoid", tuple(c), tuple(r), float(rng.uniform(0.05, 0.12)),
                             rotation=tuple(rng.uniform(-90, 90, 3)), mode="add"))
    return out


def generate_phantom(spec: PhantomSpec) -> DenseGrid:
    """Paint the primitives into a grid with ``supersample^3`` coverage sampling."""
    nx, ny, nz = spec.dims
    ext = np.asarray(spec.extent, dtype=np.float64)
    ext = np.tile(ext, (3, 1)) if ext.shape == (2,) else ext
    ss = max(1, int(spec.supersample))
    axes = []
    for (lo, hi), n in zip(ext, (nx, ny, nz)):
        h = (hi - lo) / n
        axes.append(lo + (np.arange(n * ss) + 0.5) * h / ss)
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1)

    prims = list(spec.primitives)
    if spec.markers:
        prims += marker_primitives()
    prims += _blobs(np.random.default_rng(spec.seed), spec.n_blobs)

    vol = np.zeros(pts.shape[:-1])
    lo, hi = ext[:, 0], ext[:, 1]
    for p in prims:
        reach = np.asarray(p.center) + np.max(p.size) * np.array([-1, 1])[:, None]
        if np.any(reach[0] < lo) or np.any(reach[1] > hi):
            warnings.warn(f"{p.kind} at {p.center} extends past the grid; clipped", stacklevel=2)
        hit = p.inside(pts)
        if p.mode == "set":
            vol[hit] = p.density
        else:
            vol[hit] += p.density
    vol = np.clip(vol, 0.0, 1.0)
    vol = vol.reshape(nz, ss, ny, ss, nx, ss).mean(axis=(1, 3, 5))
    return DenseGrid(vol, ext)


@dataclass
class SequenceSpec:
    """Principal-angle sweep about Y; angles ``center + (k - (n-1)/2) * step``."""

    start: float = -100.0
    end: float = 100.0
    step: float = 1.5
    n_views: int = 133

    def __post_init__(self):
        if self.n_views < 1 or self.step <= 0:
            raise ValueError("need n_views >= 1 and a positive step")
        if (self.n_views - 1) * self.step > self.end - self.start + 1e-9:
            raise ValueError("requested views do not fit inside [start, end]")

    def angles(self) -> np.ndarray:
        center = 0.5 * (self.start + self.end)
        k = np.arange(self.n_views, dtype=np.float64)
        return center + (k - (self.n_views - 1) / 2.0) * self.step

    @classmethod
    def explicit(cls, angles) -> "ExplicitSequence":
        return ExplicitSequence(tuple(float(a) for a in angles))


@dataclass
class ExplicitSequence:
    values: tuple

    def angles(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


class Sequence(list):
    """List of ``(image, pose)`` pairs plus the normalisation constant used."""

    def __init__(self, views, scale: float):
        super().__init__(views)
        self.scale = scale

    @property
    def poses(self) -> list:
        return [p for _, p in self]

    @property
    def images(self) -> list:
        return [im for im, _ in self]


def simulate_sequence(field_, spec, geom: RenderGeometry, scale: float | None = None,
                      algorithm: str = "ray_cast") -> Sequence:
    """Render one view per principal angle with every other DoF at zero.

    Images are normalised by ``scale``; when omitted it is the 99.9th
    percentile of the sequence's own raw absorbance.
    """
    poses = [Pose((a, 0.0, 0.0)) for a in spec.angles()]
    output = "absorbance" if algorithm == "ray_cast" else "intensity"
    with torch.no_grad():
        raws = [render_drr(field_, p, geom, algorithm, output) for p in poses]
    if scale is None:
        scale = absorbance_scale(raws)
    return Sequence([(normalize_image(r, scale), p) for r, p in zip(raws, poses)], scale)


def _area_resize(img: np.ndarray, shape) -> np.ndarray:
    h, w = img.shape
    th, tw = shape
    if h % th or w % tw:
        raise ValueError(f"area resize needs integer factors: {img.shape} -> {tuple(shape)}")
    return img.reshape(th, h // th, tw, w // tw).mean(axis=(1, 3))


def equalize_histogram(x: np.ndarray, levels: int = 256) -> np.ndarray:
    """Classic CDF remap of ``x`` (already in ``[0, 1]``) quantised to ``levels``."""
    q = np.clip(np.rint(x * (levels - 1)), 0, levels - 1).astype(np.int64)
    cdf = np.cumsum(np.bincount(q.ravel(), minlength=levels))
    cdf_min = cdf[cdf > 0][0]
    n = q.size
    if n == cdf_min:
        return np.zeros_like(x, dtype=np.float64)
    return (cdf[q] - cdf_min) / (n - cdf_min)


def preprocess_image(raw, out_shape=None, levels: int = 256) -> np.ndarray:
    """Equalise, invert, rescale to ``[0, 1]`` and area-resize a raw radiograph."""
    img = np.asarray(torch.as_tensor(raw).detach() if isinstance(raw, torch.Tensor) else raw,
                     dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("raw image has non-finite pixels")
    out_shape = img.shape if out_shape is None else tuple(out_shape)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return _area_resize(np.clip(1.0 - img, 0.0, 1.0), out_shape)
    eq = equalize_histogram((img - lo) / (hi - lo), levels)
    inv = 1.0 - eq
    lo, hi = inv.min(), inv.max()
    inv = (inv - lo) / (hi - lo) if hi > lo else inv
    return _area_resize(inv, out_shape)
