"""Adam, pose estimation by gradient descent and density-field training."""
from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .geometry import DTYPE, Pose, RenderGeometry
from .losses import MiConfig, image_loss, pixel_loss, focal_frequency_loss, ssim_loss, training_loss
from .render import drr_image

INIT_HALF_RANGE = (30.0, 30.0, 30.0, 0.2, 0.2, 0.2)


class OptimizationError(FloatingPointError):
    """Non-finite gradient or loss during optimisation."""


def _finite(x) -> bool:
    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return bool(np.all(np.isfinite(x)))


def _sqrt(x):
    return torch.sqrt(x) if isinstance(x, torch.Tensor) else np.sqrt(x)


@dataclass
class AdamState:
    lr: float = 0.03
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = None
    v: list = None


def adam_step(state: AdamState, grads, params):
    """One bias-corrected Adam update; returns ``(new_state, new_params)``.

    ``grads`` and ``params`` are matching sequences of numpy arrays or torch
    tensors (a single array is also accepted). Inputs are not modified.
    """
    single = not isinstance(params, (list, tuple))
    if single:
        grads, params = [grads], [params]
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient and parameter shapes differ")
    for k, g in enumerate(grads):
        if not _finite(g):
            raise OptimizationError(f"non-finite gradient in parameter block {k} at step {state.step + 1}")
    m = state.m or [g * 0 for g in grads]
    v = state.v or [g * 0 for g in grads]
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_m, new_v, new_p = [], [], []
    for g, p, mk, vk in zip(grads, params, m, v):
        mk = state.beta1 * mk + (1.0 - state.beta1) * g
        vk = state.beta2 * vk + (1.0 - state.beta2) * (g * g)
        new_p.append(p - state.lr * (mk / bc1) / (_sqrt(vk / bc2) + state.eps))
        new_m.append(mk)
        new_v.append(vk)
    new_state = replace(state, step=t, m=new_m, v=new_v)
    return new_state, (new_p[0] if single else new_p)


def random_init_pose(target: Pose, rng, half_range=INIT_HALF_RANGE) -> Pose:
    """Uniform perturbation of ``target`` within ``+/- half_range`` per DoF."""
    hr = np.asarray(half_range, dtype=np.float64)
    delta = rng.uniform(-1.0, 1.0, size=6) * hr
    return Pose.from_vector(target.as_vector() + delta)


def pose_box(center: Pose, half_range=INIT_HALF_RANGE) -> np.ndarray:
    """(6, 2) array of per-DoF ``(lo, hi)`` centred on ``center``."""
    c = center.as_vector()
    hr = np.asarray(half_range, dtype=np.float64)
    return np.stack([c - hr, c + hr], axis=1)


def normalize_pose(pose, box) -> np.ndarray:
    """Affine map of each DoF onto ``[0, 1]``; values outside the box are kept."""
    box = np.asarray(box, dtype=np.float64)
    if np.any(box[:, 1] <= box[:, 0]):
        raise ValueError("pose box needs lo < hi for every DoF")
    vec = pose.as_vector() if isinstance(pose, Pose) else np.asarray(pose, dtype=np.float64)
    return (vec - box[:, 0]) / (box[:, 1] - box[:, 0])


def denormalize_pose(x, box):
    """Inverse of :func:`normalize_pose`; works on numpy arrays and tensors."""
    box = np.asarray(box, dtype=np.float64)
    lo, width = box[:, 0], box[:, 1] - box[:, 0]
    if isinstance(x, torch.Tensor):
        return torch.as_tensor(lo, dtype=x.dtype) + x * torch.as_tensor(width, dtype=x.dtype)
    return lo + np.asarray(x, dtype=np.float64) * width


def outside_box(x) -> bool:
    x = np.asarray(x)
    return bool(np.any((x < 0) | (x > 1)))


@dataclass
class PoseOptConfig:
    lr: float = 0.03
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    max_iter: int = 300
    plateau: int = 50
    min_delta: float = 1e-6
    loss: str = "mi"
    algorithm: str = "ray_cast"
    half_range: tuple = INIT_HALF_RANGE
    mi: MiConfig = field(default_factory=MiConfig)

    def __post_init__(self):
        if not 0 < self.plateau < self.max_iter:
            raise ValueError("plateau window must be positive and below max_iter")


@dataclass
class PoseTrace:
    poses: list
    losses: list
    best_pose: Pose
    best_loss: float
    reason: str
    wall_time: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.losses)


def run_plateau_descent(objective, x0, cfg: PoseOptConfig):
    """Adam on ``objective(x) -> (loss, grad)`` with plateau termination.

    Iteration ``k`` evaluates the objective at the current point, records it
    and then steps. The loop stops once ``plateau`` consecutive evaluations
    fail to beat the reference loss by more than ``min_delta``.
    """
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    x = np.asarray(x0, dtype=np.float64)
    xs, losses = [], []
    ref, wait, reason = math.inf, 0, "max_iter"
    for _ in range(cfg.max_iter):
        loss, grad = objective(x)
        if not math.isfinite(loss):
            reason = "nan"
            break
        xs.append(x.copy())
        losses.append(loss)
        if loss < ref - cfg.min_delta:
            ref, wait = loss, 0
        else:
            wait += 1
            if wait >= cfg.plateau:
                reason = "plateau"
                break
        state, x = adam_step(state, grad, x)
    return xs, losses, reason


def estimate_pose(target_image, field_, geom: RenderGeometry, init: Pose,
                  cfg: PoseOptConfig = PoseOptConfig()) -> PoseTrace:
    """Minimise ``loss(DRR(p), target)`` over the pose, starting at ``init``.

    Optimisation runs in the normalised space of the box ``init +/-
    half_range``; the returned trace holds denormalised poses.
    """
    target = torch.as_tensor(target_image, dtype=DTYPE).detach()
    if tuple(target.shape) != (geom.height, geom.width):
        raise ValueError(f"target image {tuple(target.shape)} does not match geometry "
                         f"{(geom.height, geom.width)}")
    box = pose_box(init, cfg.half_range)
    field_.eval()

    def objective(x):
        xt = torch.tensor(x, dtype=DTYPE, requires_grad=True)
        img = drr_image(field_, denormalize_pose(xt, box), geom, cfg.algorithm)
        loss = image_loss(cfg.loss, img, target, cfg.mi)
        if not torch.isfinite(loss):
            return math.nan, None
        loss.backward()
        return float(loss.detach()), xt.grad.numpy().copy()

    t0 = time.perf_counter()
    xs, losses, reason = run_plateau_descent(objective, normalize_pose(init, box), cfg)
    if not losses:
        raise OptimizationError("loss was non-finite at the initial pose")
    poses = [Pose.from_vector(denormalize_pose(x, box)) for x in xs]
    best = int(np.argmin(losses))
    return PoseTrace(poses=poses, losses=losses, best_pose=poses[best], best_loss=losses[best],
                     reason=reason, wall_time=time.perf_counter() - t0)


@dataclass
class TrainConfig:
    lr: float = 5e-4
    patience: int = 10
    min_delta: float = 1e-5
    max_epochs: int = 200
    loss_weights: tuple = (1.0, 1.0, 0.1)
    algorithm: str = "ray_cast"
    sampling: str = "midpoint"

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # dicts: epoch, psnr, mse, ffl, ssim, loss
    best_epoch: int = -1
    best_psnr: float = -math.inf
    reason: str = ""


def train_field(field_, views, geom: RenderGeometry, cfg: TrainConfig = TrainConfig(),
                rng=None):
    """Fit the network inside ``field_`` (NeTT or mNeRF) to posed views.

    Each epoch visits the views in a fresh random order with one Adam step
    per view. Training stops when the epoch-mean PSNR has not improved by
    ``min_delta`` for ``patience`` epochs; the best-PSNR weights are restored.
    """
    if len(views) == 0:
        raise ValueError("need at least one training view")
    rng = np.random.default_rng(0) if rng is None else rng
    net = field_.mlp
    params = list(net.parameters())
    state = AdamState(lr=cfg.lr, beta1=0.9, beta2=0.999, eps=1e-8)
    log = TrainLog()
    best_state = copy.deepcopy(net.state_dict())
    wait = 0
    for epoch in range(cfg.max_epochs):
        field_.train()
        rows = []
        for k in rng.permutation(len(views)):
            target, pose = views[k]
            target = torch.as_tensor(target, dtype=DTYPE)
            img = drr_image(field_, pose, geom, cfg.algorithm, mode=cfg.sampling, rng=rng)
            loss = training_loss(img, target, cfg.loss_weights)
            if not torch.isfinite(loss):
                raise OptimizationError(f"non-finite training loss at epoch {epoch}")
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            grads = [torch.zeros_like(p) if g is None else g for g, p in zip(grads, params)]
            with torch.no_grad():
                state, new = adam_step(state, grads, [p.detach() for p in params])
                for p, q in zip(params, new):
                    p.copy_(q)
                mse = float(pixel_loss("mse", img, target))
                rows.append((mse, float(focal_frequency_loss(img, target)),
                             float(ssim_loss(img, target)), float(loss)))
        arr = np.asarray(rows)
        psnrs = [math.inf if r[0] == 0 else 10 * math.log10(1 / r[0]) for r in rows]
        mean_psnr = float(np.mean(psnrs))
        log.epochs.append(dict(epoch=epoch, psnr=mean_psnr, mse=float(arr[:, 0].mean()),
                               ffl=float(arr[:, 1].mean()), ssim=float(arr[:, 2].mean()),
                               loss=float(arr[:, 3].mean())))
        if mean_psnr > log.best_psnr + cfg.min_delta:
            log.best_psnr, log.best_epoch, wait = mean_psnr, epoch, 0
            best_state = copy.deepcopy(net.state_dict())
        else:
            wait += 1
            if wait >= cfg.patience:
                log.reason = "plateau"
                break
    else:
        log.reason = "max_epochs"
    net.load_state_dict(best_state)
    field_.eval()
    return net, log


def mean_psnr(field_, views, geom: RenderGeometry, algorithm: str = "ray_cast") -> float:
    """Mean PSNR of eval-mode renders against the view images."""
    from .losses import psnr
    field_.eval()
    with torch.no_grad():
        vals = [psnr(drr_image(field_, pose, geom, algorithm), torch.as_tensor(img, dtype=DTYPE))
                for img, pose in views]
    return float(np.mean(vals))
