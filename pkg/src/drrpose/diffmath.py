"""Gradient recording and finite-difference verification.

Reverse-mode accumulation is delegated to torch autograd: a computation is
any function of a float64 parameter tensor built from torch primitives, and
one backward sweep returns the gradient for every parameter at once.
:func:`check_gradient` is the independent route: it only ever evaluates the
computation forward, with recording disabled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.overrides import TorchFunctionMode

from .geometry import DTYPE

REL_EPS = 1e-8


class UnsupportedPrimitiveError(TypeError):
    """The computation left the recorded graph (numpy, python floats, ...)."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN during a recorded forward pass."""

    def __init__(self, primitive: str):
        super().__init__(f"NaN produced by primitive {primitive!r}")
        self.primitive = primitive


class _NanGuard(TorchFunctionMode):
    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        if isinstance(out, torch.Tensor) and out.is_floating_point() and out.numel():
            if torch.isnan(out).any():
                raise NonFiniteError(getattr(func, "__name__", repr(func)))
        return out


def maximum(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise max; the gradient goes to the attained argument, ties to ``a``."""
    return torch.where(a >= b, a, b)


def minimum(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise min; the gradient goes to the attained argument, ties to ``a``."""
    return torch.where(a <= b, a, b)


def record_and_grad(computation, params, check_nan: bool = True):
    """Evaluate ``computation(params)`` and its gradient in one backward sweep.

    Parameters
    ----------
    computation : callable
        Maps a (n,) float64 tensor to a scalar tensor.
    params : array_like
        Point of evaluation.
    check_nan : bool
        Inspect every primitive's output and raise :class:`NonFiniteError`
        naming the first one that yields NaN.

    Returns
    -------
    value : float
    grad : np.ndarray
    """
    x = torch.tensor(np.asarray(params, dtype=np.float64), dtype=DTYPE, requires_grad=True)
    try:
        if check_nan:
            with _NanGuard():
                out = computation(x)
        else:
            out = computation(x)
    except RuntimeError as exc:
        if "numpy" in str(exc) or "requires grad" in str(exc):
            raise UnsupportedPrimitiveError(str(exc)) from exc
        raise
    if not isinstance(out, torch.Tensor):
        raise UnsupportedPrimitiveError(
            f"computation returned {type(out).__name__}, expected a torch scalar")
    if out.numel() != 1:
        raise ValueError(f"computation must be scalar-valued, got shape {tuple(out.shape)}")
    if out.requires_grad:
        (grad,) = torch.autograd.grad(out.reshape(()), x, allow_unused=True)
        grad = torch.zeros_like(x) if grad is None else grad
    else:
        grad = torch.zeros_like(x)
    return float(out.detach()), grad.detach().numpy().copy()


def evaluate(computation, params) -> float:
    """Forward-only evaluation with recording switched off."""
    with torch.no_grad():
        x = torch.tensor(np.asarray(params, dtype=np.float64), dtype=DTYPE)
        return float(computation(x))


@dataclass
class GradReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    step: np.ndarray
    tol: float
    kink: np.ndarray  # True where the difference quotient crosses a kink

    @property
    def passed(self) -> np.ndarray:
        return (self.rel_error < self.tol) | self.kink

    @property
    def ok(self) -> bool:
        return bool(self.passed.all())

    @property
    def max_rel_error(self) -> float:
        smooth = self.rel_error[~self.kink]
        return float(smooth.max()) if smooth.size else 0.0


def relative_error(a, f):
    a, f = np.asarray(a, float), np.asarray(f, float)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), REL_EPS)


def check_gradient(computation, params, step=1e-4, tol=1e-3, indices=None,
                   refinements: int = 5) -> GradReport:
    """Compare recorded gradients with central differences.

    ``step`` may be a scalar or one value per parameter. ``indices`` limits the
    check to a subset of parameters (useful for large weight vectors).

    Piecewise-smooth computations (trilinear sampling summed over many rays)
    hide kinks inside a finite step, which biases the difference quotient.
    The step is therefore shrunk by factors of ten, up to ``refinements``
    times, until three successive central differences agree to a tenth of
    ``tol`` (two biased quotients can agree by coincidence; three rarely do).
    This convergence test never looks at the recorded gradient. The coarsest
    step of the agreeing run is reported. A parameter is flagged in ``kink`` and excluded
    from pass/fail when the differences never converge, or when the point
    itself is a subgradient point (one-sided slopes jump by the same,
    non-negligible amount at ``h`` and ``h/2``).
    """
    x0 = np.asarray(params, dtype=np.float64)
    steps = np.broadcast_to(np.asarray(step, dtype=np.float64), x0.shape)
    if np.any(steps <= 0):
        raise ValueError("finite-difference step must be positive")
    idx = np.arange(x0.size) if indices is None else np.asarray(indices)
    _, grad = record_and_grad(computation, x0, check_nan=False)
    f0 = evaluate(computation, x0)
    scale = max(abs(f0), np.finfo(float).tiny)

    def at(i, dx):
        x = x0.copy()
        x[i] += dx
        return evaluate(computation, x)

    def agree(a, b, h):
        noise = 1e3 * np.finfo(float).eps * scale / h
        return abs(a - b) <= max(0.1 * tol * max(abs(a), abs(b)), noise)

    analytic = grad[idx]
    numeric = np.empty(idx.size)
    used = np.empty(idx.size)
    kink = np.zeros(idx.size, dtype=bool)
    for n, i in enumerate(idx):
        h = float(steps[i])
        plus, minus = at(i, h), at(i, -h)
        fd = (plus - minus) / (2 * h)
        streak, first = 0, (h, plus, minus, fd)
        for _ in range(refinements):
            h2 = h / 10
            plus2, minus2 = at(i, h2), at(i, -h2)
            fd2 = (plus2 - minus2) / (2 * h2)
            if agree(fd, fd2, h2):
                streak += 1
            else:
                streak, first = 0, (h2, plus2, minus2, fd2)
            h, plus, minus, fd = h2, plus2, minus2, fd2
            if streak == 2:
                # all three agree; the coarsest carries the least round-off
                h, plus, minus, fd = first
                break
        numeric[n], used[n] = fd, h
        noise = 1e3 * np.finfo(float).eps * scale / h
        jump_h = abs((plus - f0) - (f0 - minus)) / h
        jump_half = abs((at(i, h / 2) - f0) - (f0 - at(i, -h / 2))) / (0.5 * h)
        # a slope jump below a tenth of the tolerance cannot decide pass/fail
        material = max(noise, 0.1 * tol * abs(fd))
        at_kink = jump_h > material and jump_half > 0.75 * jump_h
        kink[n] = at_kink or streak < 2
    return GradReport(analytic=analytic, numeric=numeric,
                      rel_error=relative_error(analytic, numeric),
                      step=used, tol=tol, kink=kink)
