"""Pose representation, rotation algebra and projection geometry.

Conventions (frozen; every other module inherits them)
------------------------------------------------------
* World frame is right-handed with the origin at the isocenter. The
  density volume lives in the NDC cube ``[-1, 1]^3``.
* At the identity pose the source sits at ``(0, 0, +sod)`` and looks
  down ``-Z``; the intensifier plane is at distance ``sid`` from the source.
* Pose angles ``(theta_y, theta_x, theta_z)`` are intrinsic Euler angles in
  degrees, applied Y then X then Z, so ``R = Ry(theta_y) @ Rx(theta_x) @
  Rz(theta_z)``. Positive angles follow the right-hand rule about the
  respective axis; ``Ry(90)`` carries ``+Z`` onto ``+X``.
* The source is moved first by the translation ``u`` (expressed in the
  source frame) and then rotated about the isocenter: a point ``q`` given in
  source-local coordinates ends up at ``R @ (u + q)``.
* ``sid`` is a focal length measured in detector pixels. Pixel ``(0, 0)`` is
  the top-left pixel, images are row-major, rows run towards ``-Y``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

DTYPE = torch.float64

ARCCOS_CLAMP_TOL = 1e-9


@dataclass(frozen=True)
class Pose:
    """6DoF source pose: YXZ intrinsic angles (degrees) and NDC translations."""

    theta: tuple[float, float, float] = (0.0, 0.0, 0.0)
    u: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "theta", tuple(float(v) for v in self.theta))
        object.__setattr__(self, "u", tuple(float(v) for v in self.u))
        if len(self.theta) != 3 or len(self.u) != 3:
            raise ValueError("Pose needs three angles and three translations")

    @classmethod
    def from_vector(cls, vec) -> "Pose":
        vec = np.asarray(vec, dtype=np.float64).reshape(6)
        return cls(tuple(vec[:3]), tuple(vec[3:]))

    def as_vector(self) -> np.ndarray:
        return np.array(self.theta + self.u, dtype=np.float64)


@dataclass(frozen=True)
class ObjectPose:
    """Object motion under a stationary source.

    Same six numbers as :class:`Pose`, read in the fixed-source convention:
    extrinsic ``y, x, z`` rotations about the isocenter and a translation,
    both measured in left-handed frames (all axes flipped).
    """

    theta: tuple[float, float, float] = (0.0, 0.0, 0.0)
    u: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def as_vector(self) -> np.ndarray:
        return np.array(tuple(self.theta) + tuple(self.u), dtype=np.float64)


@dataclass(frozen=True)
class RenderGeometry:
    """Imaging configuration in NDC units.

    ``half_extent`` bounds the sampled slab along the viewing axis and
    ``norm_scale`` is the frozen absorbance constant that maps rendered
    images onto ``[0, 1]``.
    """

    sod: float
    sid: float
    width: int
    height: int
    n_samples: int = 64
    half_extent: float = 1.0
    norm_scale: float = 1.0

    def __post_init__(self):
        if not (self.sod > 0 and self.sid > self.sod):
            raise ValueError(f"need 0 < sod < sid, got sod={self.sod}, sid={self.sid}")
        if self.width < 1 or self.height < 1 or self.n_samples < 2:
            raise ValueError("image dims must be >= 1 and n_samples >= 2")
        if self.half_extent <= 0 or self.norm_scale <= 0:
            raise ValueError("half_extent and norm_scale must be positive")
        if self.width != self.height:
            warnings.warn(f"non-square detector {self.width}x{self.height}", stacklevel=2)

    def with_(self, **changes) -> "RenderGeometry":
        params = {k: getattr(self, k) for k in self.__dataclass_fields__}
        params.update(changes)
        return RenderGeometry(**params)


@dataclass
class RayBundle:
    """Rays of one view, all tensors float64.

    ``origin`` has shape (3,), ``directions`` (H, W, 3), ``near``/``far``
    (H, W). ``local_*`` hold the same quantities in the source frame before
    rotation, which the object-frame renderer reuses.
    """

    origin: torch.Tensor
    directions: torch.Tensor
    near: torch.Tensor
    far: torch.Tensor
    rotation: torch.Tensor = field(repr=False)
    local_origin: torch.Tensor = field(repr=False)
    local_directions: torch.Tensor = field(repr=False)


def scale_geometry(sod_physical, sid_physical, volume_extent_physical, ndc_extent,
                   image_px_src, image_px_dst):
    """Map physical SOD/SID onto the NDC rendering configuration.

    The SOD scales with the volume size and the SID (a focal length in
    pixels) with the image size, which keeps the imaged geometry unchanged.

    Returns
    -------
    (sod_ndc, sid_ndc) : tuple of float
    """
    args = dict(sod_physical=sod_physical, sid_physical=sid_physical,
                volume_extent_physical=volume_extent_physical, ndc_extent=ndc_extent,
                image_px_src=image_px_src, image_px_dst=image_px_dst)
    for name, value in args.items():
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")
    sod_ndc = sod_physical * ndc_extent / volume_extent_physical
    sid_ndc = sid_physical * image_px_dst / image_px_src
    return float(sod_ndc), float(sid_ndc)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _axis_rotation(angle: torch.Tensor, axis: int) -> torch.Tensor:
    c, s = torch.cos(angle), torch.sin(angle)
    one, zero = torch.ones_like(c), torch.zeros_like(c)
    if axis == 0:
        rows = [[one, zero, zero], [zero, c, -s], [zero, s, c]]
    elif axis == 1:
        rows = [[c, zero, s], [zero, one, zero], [-s, zero, c]]
    else:
        rows = [[c, -s, zero], [s, c, zero], [zero, zero, one]]
    return torch.stack([torch.stack(r) for r in rows])


def rotation_matrix(theta_deg) -> torch.Tensor:
    """Differentiable ``Ry @ Rx @ Rz`` from a (3,) tensor of degrees."""
    theta = torch.deg2rad(_as_tensor(theta_deg))
    return _axis_rotation(theta[0], 1) @ _axis_rotation(theta[1], 0) @ _axis_rotation(theta[2], 2)


def euler_yxz_to_matrix(theta) -> np.ndarray:
    """Rotation matrix for intrinsic YXZ angles given in degrees."""
    with torch.no_grad():
        return rotation_matrix(theta).numpy()


def angle_error(theta_est, theta_true) -> float:
    """Axis-angle magnitude (degrees) of ``R_est @ R_true.T``.

    This is ``arccos((tr R - 1) / 2)`` evaluated as ``atan2(sin, cos)`` with
    the sine taken from the skew-symmetric part of ``R``, which keeps full
    precision near 0 and 180 degrees where the arccos form loses half the
    significant digits.
    """
    rel = euler_yxz_to_matrix(theta_est) @ euler_yxz_to_matrix(theta_true).T
    c = (np.trace(rel) - 1.0) / 2.0
    if abs(c) > 1.0 + ARCCOS_CLAMP_TOL:
        raise ArithmeticError(f"trace outside rotation range: cos={c}")
    axis = np.array([rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]])
    s = 0.5 * np.linalg.norm(axis)
    return float(np.degrees(np.arctan2(s, c)))


def pose_tensor(pose) -> torch.Tensor:
    """Accept a :class:`Pose`, a 6-vector or a (6,) tensor; return a tensor."""
    if isinstance(pose, (Pose, ObjectPose)):
        return torch.as_tensor(pose.as_vector())
    t = _as_tensor(pose)
    if t.shape != (6,):
        raise ValueError(f"pose vector must have shape (6,), got {tuple(t.shape)}")
    return t


def local_directions(geom: RenderGeometry) -> tuple[torch.Tensor, torch.Tensor]:
    """Unit ray directions in the source frame plus their axial cosines."""
    cols = torch.arange(geom.width, dtype=DTYPE) + 0.5 - geom.width / 2
    rows = torch.arange(geom.height, dtype=DTYPE) + 0.5 - geom.height / 2
    yy, xx = torch.meshgrid(-rows, cols, indexing="ij")
    d = torch.stack([xx, yy, torch.full_like(xx, -geom.sid)], dim=-1)
    norm = d.norm(dim=-1, keepdim=True)
    d = d / norm
    return d, geom.sid / norm[..., 0]


def slab_bounds(depth_center, cos_axis, half_extent):
    """Ray parameters where a ray meets the planes ``depth_center -/+ half_extent``."""
    near = (depth_center - half_extent) / cos_axis
    far = (depth_center + half_extent) / cos_axis
    return near, far


def pose_to_rays(pose, geom: RenderGeometry) -> RayBundle:
    """One ray per pixel from the posed source.

    Near/far bound the slab perpendicular to the viewing axis that holds the
    NDC cube, centred on the isocenter's depth ``sod + u_z``.
    """
    p = pose_tensor(pose)
    rot = rotation_matrix(p[:3])
    s0 = torch.zeros(3, dtype=DTYPE)
    s0[2] = geom.sod
    local_origin = p[3:] + s0
    d_loc, cos_axis = local_directions(geom)
    near, far = slab_bounds(geom.sod + p[5], cos_axis, geom.half_extent)
    return RayBundle(
        origin=rot @ local_origin,
        directions=d_loc @ rot.T,
        near=near,
        far=far,
        rotation=rot,
        local_origin=local_origin,
        local_directions=d_loc,
    )


def source_to_object_frame(pose) -> ObjectPose:
    """Equivalent object motion for a stationary source (same six numbers)."""
    if isinstance(pose, Pose):
        return ObjectPose(pose.theta, pose.u)
    vec = np.asarray(pose, dtype=np.float64).reshape(6)
    return ObjectPose(tuple(vec[:3]), tuple(vec[3:]))


_FLIP = -torch.eye(3, dtype=DTYPE)


def _flipped_axis_rotation(angle_deg, axis: int) -> torch.Tensor:
    # positive rotation about the flipped (left-handed) axis -e_k
    c = math.cos(math.radians(angle_deg))
    s = math.sin(math.radians(angle_deg))
    k = _FLIP[axis]
    kx = torch.tensor([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]], dtype=DTYPE)
    return torch.eye(3, dtype=DTYPE) * c + s * kx + (1 - c) * torch.outer(k, k)


def object_transform(obj: ObjectPose) -> tuple[torch.Tensor, torch.Tensor]:
    """World-space map ``x -> M @ x + v`` moving the object.

    Rotations are extrinsic ``y``, then ``x``, then ``z`` about the flipped
    axes at the isocenter; the translation is measured along the flipped
    axes of the source-anchored frame.
    """
    ay, ax, az = obj.theta
    m = (_flipped_axis_rotation(az, 2) @ _flipped_axis_rotation(ax, 0)
         @ _flipped_axis_rotation(ay, 1))
    v = _FLIP @ torch.tensor(obj.u, dtype=DTYPE)
    return m, v


POSE_HEADER = "# theta_y theta_x theta_z u_x u_y u_z  (degrees, NDC)"


def save_poses(path, poses) -> None:
    """Write one pose per line; floats use ``repr`` so reloads are exact."""
    lines = [POSE_HEADER]
    for p in poses:
        lines.append(" ".join(repr(float(v)) for v in p.as_vector()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_poses(path) -> list[Pose]:
    poses = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 6:
            raise ValueError(f"{path}:{n}: expected 6 numbers, got {len(fields)}")
        poses.append(Pose.from_vector([float(f) for f in fields]))
    return poses
