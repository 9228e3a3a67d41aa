"""Diffusion schedule math: scaled-linear betas, zero-terminal-SNR rescaling,
the forward process, v-parameterization conversions, and the deterministic
DDIM transition.

Schedule construction runs in float64 (the cumulative products underflow in
float32); the per-step coefficients are handed out as Python floats so every
op works unchanged on numpy arrays and torch tensors.

Convention: t = 0 is the least-noised step, t = T-1 the most-noised one.
alpha_bars is strictly decreasing in t.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule parameters or step ordering."""


class ShapeError(ValueError):
    """Tensor arguments with incompatible shapes."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed diffusion coefficients.

    betas and alpha_bars are float64 arrays of length num_steps. When
    zero_snr is set, sqrt(alpha_bars[-1]) == 0 exactly, so the terminal
    step carries no signal.
    """

    num_steps: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    zero_snr: bool
    prediction_kind: str = "v"
    _sqrt_ab: np.ndarray = field(init=False, repr=False)
    _sqrt_1mab: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_sqrt_ab", np.sqrt(self.alpha_bars))
        object.__setattr__(self, "_sqrt_1mab", np.sqrt(1.0 - self.alpha_bars))

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.num_steps:
            raise ScheduleError(f"step {t} outside [0, {self.num_steps})")
        return t

    # Coefficients are returned as numpy float64 scalars: numpy arrays then
    # promote to 64-bit math (the conversion triangle closes to 1e-9 even on
    # float32 tensors) while torch tensors keep their own dtype.

    def alpha_bar(self, t: int) -> np.float64:
        return np.float64(self.alpha_bars[self._check_t(t)])

    def sqrt_alpha_bar(self, t: int) -> np.float64:
        return np.float64(self._sqrt_ab[self._check_t(t)])

    def sqrt_one_minus_alpha_bar(self, t: int) -> np.float64:
        return np.float64(self._sqrt_1mab[self._check_t(t)])


def build_schedule(
    num_steps: int,
    beta_min: float = 0.00085,
    beta_max: float = 0.012,
    zero_snr: bool = True,
) -> NoiseSchedule:
    """Build a scaled-linear beta schedule, optionally rescaled to zero
    terminal SNR.

    beta_t = (sqrt(beta_min) + (t/(T-1)) * (sqrt(beta_max) - sqrt(beta_min)))^2.
    The zero-SNR rescale shifts and scales sqrt(alpha_bar) affinely so the
    terminal value is exactly 0 while the initial value is preserved.
    """
    if num_steps < 2:
        raise ScheduleError(f"num_steps must be >= 2, got {num_steps}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ScheduleError(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )

    ramp = np.linspace(sqrt(beta_min), sqrt(beta_max), num_steps, dtype=np.float64)
    betas = ramp**2
    alpha_bars = np.cumprod(1.0 - betas)

    if zero_snr:
        sqrt_ab = np.sqrt(alpha_bars)
        first, last = sqrt_ab[0], sqrt_ab[-1]
        sqrt_ab = (sqrt_ab - last) * (first / (first - last))
        alpha_bars = sqrt_ab**2
        alpha_bars[-1] = 0.0

    return NoiseSchedule(
        num_steps=num_steps,
        betas=betas,
        alpha_bars=alpha_bars,
        zero_snr=zero_snr,
    )


def _check_shapes(*tensors):
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) > 1:
        raise ShapeError(f"mismatched shapes: {sorted(shapes)}")


def forward_diffuse(x0, eps, sched: NoiseSchedule, t: int):
    """q(x_t | x_0): sqrt(ab_t)*x0 + sqrt(1-ab_t)*eps."""
    _check_shapes(x0, eps)
    return sched.sqrt_alpha_bar(t) * x0 + sched.sqrt_one_minus_alpha_bar(t) * eps


def v_target(x0, eps, sched: NoiseSchedule, t: int):
    """v = sqrt(ab_t)*eps - sqrt(1-ab_t)*x0."""
    _check_shapes(x0, eps)
    return sched.sqrt_alpha_bar(t) * eps - sched.sqrt_one_minus_alpha_bar(t) * x0


def x0_from_v(x_t, v, sched: NoiseSchedule, t: int):
    """Recover the data estimate: x0 = sqrt(ab_t)*x_t - sqrt(1-ab_t)*v."""
    _check_shapes(x_t, v)
    return sched.sqrt_alpha_bar(t) * x_t - sched.sqrt_one_minus_alpha_bar(t) * v


def eps_from_v(x_t, v, sched: NoiseSchedule, t: int):
    """Recover the noise estimate: eps = sqrt(1-ab_t)*x_t + sqrt(ab_t)*v."""
    _check_shapes(x_t, v)
    return sched.sqrt_one_minus_alpha_bar(t) * x_t + sched.sqrt_alpha_bar(t) * v


def ddim_step(x_t, x0_hat, sched: NoiseSchedule, t: int, s_to: int):
    """Deterministic DDIM transition from step t down to step s_to.

    x_s = sqrt(ab_s)*x0_hat + sqrt(1-ab_s)*eps_hat, with eps_hat recovered
    from (x_t, x0_hat) at step t. Raises when s_to > t, and when ab_t == 1
    with x_t inconsistent with x0_hat (eps_hat is undefined there).
    """
    _check_shapes(x_t, x0_hat)
    t = sched._check_t(t)
    s_to = sched._check_t(s_to)
    if s_to > t:
        raise ScheduleError(f"DDIM step must go down in noise: s_to={s_to} > t={t}")

    sq_ab_t = sched.sqrt_alpha_bar(t)
    sq_1m_t = sched.sqrt_one_minus_alpha_bar(t)
    if sq_1m_t == 0.0:
        resid = x_t - x0_hat
        if float((resid * resid).sum()) > 1e-18:
            raise ScheduleError(
                "degenerate DDIM step: alpha_bar(t) == 1 but x_t != x0_hat"
            )
        return sched.sqrt_alpha_bar(s_to) * x0_hat

    eps_hat = (x_t - sq_ab_t * x0_hat) / sq_1m_t
    return (
        sched.sqrt_alpha_bar(s_to) * x0_hat
        + sched.sqrt_one_minus_alpha_bar(s_to) * eps_hat
    )


def sample_grid(sched: NoiseSchedule, steps: int) -> list[int]:
    """Inference timestep ladder for a k-step sampler.

    Returns k+1 strictly decreasing indices from T-1 down to 0, evenly
    spaced. The model is evaluated at the first k entries; the trailing 0
    is the landing point of the last transition.
    """
    if steps < 1:
        raise ScheduleError(f"steps must be >= 1, got {steps}")
    top = sched.num_steps - 1
    grid = [int(round(top * (1.0 - i / steps))) for i in range(steps + 1)]
    if len(set(grid)) != len(grid):
        raise ScheduleError(f"{steps} steps do not fit in {sched.num_steps} indices")
    return grid
