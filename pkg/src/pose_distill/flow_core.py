"""Linear-interpolation flow matching.

Noise level ``t`` runs from 0 (clean data) to 1 (pure Gaussian noise). The
forward process is ``x_t = (1 - t) x0 + t eps`` and a velocity field ``mu``
is trained to predict ``eps - x0``.

Every velocity field in this package is a callable ``mu(x_t, t, cond)`` where
``t`` is a 1-D tensor holding one noise level per batch element and ``cond``
is an opaque conditioning object (``None`` for unconditional fields).
"""

from __future__ import annotations

from typing import Any, Callable, Optional, Union

import torch
from torch import Tensor

VelocityField = Callable[..., Tensor]
Level = Union[float, Tensor]

# default diffusion-loss timestep range; keeps clear of the t -> 0 score
# singularity and the degenerate t = 1 target
T_MIN = 0.02
T_MAX = 0.98


def _check_same_shape(a: Tensor, b: Tensor, what: str = "tensors") -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch between {what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def level_tensor(t: Level, batch: int, like: Tensor) -> Tensor:
    """Return ``t`` as a (batch,) tensor on ``like``'s device and dtype."""
    if isinstance(t, Tensor):
        t = t.to(device=like.device, dtype=like.dtype)
        if t.ndim == 0:
            return t.expand(batch).clone()
        if t.shape != (batch,):
            raise ValueError(f"noise level must be scalar or shape ({batch},), got {tuple(t.shape)}")
        return t
    return torch.full((batch,), float(t), device=like.device, dtype=like.dtype)


def broadcast_level(t: Level, like: Tensor) -> Tensor:
    """Reshape a scalar / per-batch noise level so it broadcasts against ``like``."""
    if not isinstance(t, Tensor):
        return torch.as_tensor(float(t), device=like.device, dtype=like.dtype)
    t = t.to(device=like.device, dtype=like.dtype)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape[0], *([1] * (like.ndim - 1)))


def _check_range(t: Level) -> None:
    lo, hi = (float(t.min()), float(t.max())) if isinstance(t, Tensor) else (float(t), float(t))
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"noise level must lie in [0, 1], got range [{lo}, {hi}]")


def interpolate(x0: Tensor, eps: Tensor, t: Level) -> Tensor:
    """Forward process ``(1 - t) x0 + t eps``."""
    _check_same_shape(x0, eps, "x0 and eps")
    _check_range(t)
    tb = broadcast_level(t, x0)
    return (1 - tb) * x0 + tb * eps


def velocity_target(x0: Tensor, eps: Tensor) -> Tensor:
    """Regression target ``dx_t/dt = eps - x0``."""
    _check_same_shape(x0, eps, "x0 and eps")
    return eps - x0


def sample_levels(
    n: int,
    lo: float = T_MIN,
    hi: float = T_MAX,
    generator: Optional[torch.Generator] = None,
    device: Union[str, torch.device] = "cpu",
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Draw ``n`` noise levels uniformly from ``[lo, hi]``."""
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"invalid level range [{lo}, {hi}]")
    u = torch.rand(n, generator=generator, device=device, dtype=dtype)
    return lo + (hi - lo) * u


def diffusion_loss(
    model: VelocityField,
    x0: Tensor,
    eps: Tensor,
    t: Level,
    cond: Any = None,
) -> Tensor:
    """Mean squared error between ``eps - x0`` and ``model(x_t, t, cond)``.

    The mean runs over batch and elements, so a constant velocity offset ``c``
    yields exactly ``c**2``.
    """
    x_t = interpolate(x0, eps, t)
    t_vec = level_tensor(t, x0.shape[0], x0)
    pred = model(x_t, t_vec, cond)
    _check_same_shape(pred, x0, "model output and x0")
    return (velocity_target(x0, eps) - pred).pow(2).mean()


def score_from_velocity(x_t: Tensor, mu_out: Tensor, t: Level) -> Tensor:
    """Score ``grad log p_t(x_t)`` implied by a velocity prediction.

    ``s = -(x_t + (1 - t) mu) / t``. Undefined at ``t = 0``.
    """
    _check_same_shape(x_t, mu_out, "x_t and velocity")
    lo = float(t.min()) if isinstance(t, Tensor) else float(t)
    if lo <= 0.0:
        raise ZeroDivisionError("score is undefined at noise level t = 0")
    tb = broadcast_level(t, x_t)
    return -(x_t + (1 - tb) * mu_out) / tb


def one_step_denoise(model: VelocityField, x_t: Tensor, t: Level, cond: Any = None) -> Tensor:
    """Clean-sample estimate ``x_t - t * mu(x_t, t)``.

    At ``t = 0`` the input is already clean and is returned untouched (the
    model is not evaluated).
    """
    lo = float(t.min()) if isinstance(t, Tensor) else float(t)
    hi = float(t.max()) if isinstance(t, Tensor) else float(t)
    if hi <= 0.0:
        return x_t
    if lo < 0.0:
        raise ValueError("noise level must be non-negative")
    t_vec = level_tensor(t, x_t.shape[0], x_t)
    return x_t - broadcast_level(t_vec, x_t) * model(x_t, t_vec, cond)


def shift_levels(t: Tensor, shift: float) -> Tensor:
    """Timestep shift ``s t / (1 + (s - 1) t)``; ``shift=1`` is the identity."""
    if shift <= 0:
        raise ValueError("shift must be positive")
    return shift * t / (1 + (shift - 1) * t)


def guided_velocity(model: VelocityField, guidance_scale: float) -> VelocityField:
    """Classifier-free guidance hook: two model calls per evaluation.

    The unconditional branch is the model called with ``cond=None``.
    """

    def field(x_t: Tensor, t: Tensor, cond: Any = None) -> Tensor:
        v_u = model(x_t, t, None)
        v_c = model(x_t, t, cond)
        return v_u + guidance_scale * (v_c - v_u)

    return field


class CountingField:
    """Wraps a velocity field and counts function evaluations (NFE)."""

    def __init__(self, model: VelocityField):
        self.model = model
        self.nfe = 0

    def __call__(self, x_t: Tensor, t: Tensor, cond: Any = None) -> Tensor:
        self.nfe += 1
        return self.model(x_t, t, cond)


def euler_sample(
    model: VelocityField,
    x_T: Tensor,
    steps: int,
    cond: Any = None,
    shift: Optional[float] = None,
    guidance_scale: Optional[float] = None,
) -> Tensor:
    """Integrate ``dx/dt = mu`` from t=1 to t=0 with ``steps`` Euler steps.

    The grid is uniform in t unless ``shift`` is given. One step returns
    ``x_T - mu(x_T, 1)``. With ``guidance_scale`` set, each step costs two
    function evaluations.
    """
    if int(steps) != steps or steps < 1:
        raise ValueError(f"steps must be a positive integer, got {steps}")
    field = model if guidance_scale is None else guided_velocity(model, guidance_scale)
    grid = torch.linspace(1.0, 0.0, steps + 1, dtype=torch.float64)
    if shift is not None:
        grid = shift_levels(grid, shift)
    x = x_T
    batch = x.shape[0]
    for i in range(steps):
        t_cur, t_next = float(grid[i]), float(grid[i + 1])
        t_vec = torch.full((batch,), t_cur, device=x.device, dtype=x.dtype)
        x = x - (t_cur - t_next) * field(x, t_vec, cond)
    return x
