"""Few-step samplers over the discrete v-prediction schedule.

The consistency function is f(x, t) = c_skip(t) * x + c_out(t) * x0_hat(x, t)
with the standard boundary parameterization: at the smallest schedule index
c_skip = 1 and c_out = 0 so f is the identity there. Multistep consistency
sampling evaluates f at the first k grid points and re-noises the estimate
to the next grid point between evaluations.
"""

from __future__ import annotations

import math

import torch

from ..sched import NoiseSchedule, ddim_step, forward_diffuse, sample_grid, x0_from_v
from .net import CondBundle, DenoisingNet

SIGMA_DATA = 0.5
TIMESTEP_SCALING = 10.0


def cm_scalings(t: int, t_min: int = 0) -> tuple[float, float]:
    """(c_skip, c_out) at schedule index t; exact identity boundary at t_min."""
    scaled = (t - t_min) * TIMESTEP_SCALING
    c_skip = SIGMA_DATA**2 / (scaled**2 + SIGMA_DATA**2)
    c_out = scaled / math.sqrt(scaled**2 + SIGMA_DATA**2)
    return c_skip, c_out


def cm_apply(x_t: torch.Tensor, x0_hat: torch.Tensor, t: int, t_min: int = 0) -> torch.Tensor:
    c_skip, c_out = cm_scalings(t, t_min)
    return c_skip * x_t + c_out * x0_hat


def cm_predict(
    net: DenoisingNet, sched: NoiseSchedule, x_t: torch.Tensor, t: int, cond: CondBundle
) -> torch.Tensor:
    """One consistency-function evaluation: f(x_t, t)."""
    v = net(x_t, torch.as_tensor(float(t)).reshape(1) if x_t.dim() == 5 else float(t), cond)
    x0_hat = x0_from_v(x_t, v, sched, t)
    return cm_apply(x_t, x0_hat, t)


def cm_sample(
    net: DenoisingNet,
    sched: NoiseSchedule,
    noise: torch.Tensor,
    cond_at: "callable",
    steps: int,
    generator: torch.Generator | None = None,
    hook: "callable | None" = None,
) -> torch.Tensor:
    """Multistep consistency sampling from terminal noise.

    cond_at(t) supplies the conditioning bundle for each evaluation (the
    engine re-noises motion latents per step). hook(x, t), when given, may
    rewrite the latent state right before each evaluation and is applied
    once more to the final estimate with t = grid end (idle anchoring).
    Returns the final x0-space estimate.
    """
    grid = sample_grid(sched, steps)
    x = noise
    estimate = None
    for i in range(steps):
        t = grid[i]
        if hook is not None:
            x = hook(x, t)
        estimate = cm_predict(net, sched, x, t, cond_at(t))
        if i + 1 < steps:
            t_next = grid[i + 1]
            fresh = torch.empty_like(estimate).normal_(generator=generator)
            x = forward_diffuse(estimate, fresh, sched, t_next)
    if hook is not None:
        estimate = hook(estimate, grid[-1])
    return estimate


def ddim_sample(
    net: DenoisingNet,
    sched: NoiseSchedule,
    noise: torch.Tensor,
    cond_at: "callable",
    steps: int,
    hook: "callable | None" = None,
) -> torch.Tensor:
    """Deterministic DDIM walk down the sampling grid; the zero-SNR
    terminal step makes pure noise the exact starting state."""
    grid = sample_grid(sched, steps)
    x = noise
    x0_hat = noise
    for i in range(steps):
        t = grid[i]
        if hook is not None:
            x = hook(x, t)
        v = net(x, torch.as_tensor(float(t)).reshape(1) if x.dim() == 5 else float(t), cond_at(t))
        x0_hat = x0_from_v(x, v, sched, t)
        if i + 1 < steps:
            x = ddim_step(x, x0_hat, sched, t, grid[i + 1])
    if hook is not None:
        x0_hat = hook(x0_hat, grid[-1])
    return x0_hat
