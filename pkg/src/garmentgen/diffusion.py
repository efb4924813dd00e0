"""Noise schedule, forward noising, epsilon loss, guidance, and the
deterministic sampler.

The sampler only needs a denoiser callable `model_fn(z_t, t, cond)` that
returns a predicted noise tensor of the same shape; `cond=None` asks for
the model's unconditional branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, NumericError


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule and its cumulative signal products, kept in
    float64 so the products of ~1000 terms near one stay accurate."""

    steps: int
    betas: np.ndarray       # [T] float64
    alpha_bar: np.ndarray   # [T] float64, alpha_bar[i] = prod_{s<=i} (1 - beta_s)

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative signal coefficient at 1-based timestep t; t=0 is the
        clean-data convention and returns exactly 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.steps:
            raise DimensionError(f"timestep {t} outside [0, {self.steps}]")
        return float(self.alpha_bar[t - 1])


def make_schedule(steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if steps < 1:
        raise ConfigError(f"schedule needs at least one step, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(steps=steps, betas=betas, alpha_bar=alpha_bar)


@dataclass(frozen=True)
class GuidanceConfig:
    weight: float = 7.5
    num_steps: int = 50

    def __post_init__(self):
        if self.num_steps < 1:
            raise ConfigError(f"guidance needs at least one sampling step, got {self.num_steps}")
        if not np.isfinite(self.weight):
            raise ConfigError("guidance weight must be finite")


def forward_diffuse(z0: Tensor, t: int, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if z0.shape != eps.shape:
        raise DimensionError(f"noise shape {eps.shape} does not match data {z0.shape}")
    ab = schedule.alpha_bar_at(t)
    return ad.add(ad.scale(z0, float(np.sqrt(ab))), ad.scale(eps, float(np.sqrt(1.0 - ab))))


def diffusion_loss(eps_true: Tensor, eps_pred: Tensor) -> Tensor:
    """Mean squared error over all elements (mean, not sum, so batch size
    does not rescale gradients)."""
    if eps_true.shape != eps_pred.shape:
        raise DimensionError(f"loss shapes differ: {eps_true.shape} vs {eps_pred.shape}")
    d = ad.sub(eps_pred, eps_true)
    return ad.mean_all(ad.mul(d, d))


def cfg_combine(eps_cond: Tensor, eps_uncond: Tensor, weight: float) -> Tensor:
    """w * eps_cond + (1 - w) * eps_uncond."""
    if eps_cond.shape != eps_uncond.shape:
        raise DimensionError(
            f"guidance branches differ in shape: {eps_cond.shape} vs {eps_uncond.shape}")
    return ad.add(ad.scale(eps_cond, weight), ad.scale(eps_uncond, 1.0 - weight))


def ddim_timesteps(total: int, num_steps: int) -> list[int]:
    """Uniformly spaced descending timesteps from `total` down to 1."""
    if not 1 <= num_steps <= total:
        raise ConfigError(f"num_steps must be in [1, {total}], got {num_steps}")
    if num_steps == 1:
        return [total]
    raw = [total - i * (total - 1) / (num_steps - 1) for i in range(num_steps)]
    ts = []
    for v in raw:
        t = int(round(v))
        if not ts or t < ts[-1]:
            ts.append(t)
    return ts


def ddim_sample(model_fn: Callable[[Tensor, int, object], Tensor], z_start: Tensor,
                cond, guidance: GuidanceConfig, schedule: NoiseSchedule) -> Tensor:
    """Deterministic reverse process: at each step predict noise (with
    guidance), reconstruct the clean estimate, clamp it to the data range
    (latents are re-laid-out unit-range pixels; an imperfect predictor at
    near-pure-noise timesteps otherwise amplifies its error by 1/sqrt(abar)
    and the trajectory diverges), and re-noise to the next timestep.  The
    final step targets abar=1, i.e. returns the clean estimate itself.
    Never mutates weights and uses no randomness."""
    steps = ddim_timesteps(schedule.steps, guidance.num_steps)
    z = z_start
    for i, t in enumerate(steps):
        eps_c = model_fn(z, t, cond)
        if eps_c.shape != z.shape:
            raise DimensionError(f"model returned {eps_c.shape}, expected {z.shape}")
        if guidance.weight == 1.0 or cond is None:
            eps = eps_c
        else:
            eps = cfg_combine(eps_c, model_fn(z, t, None), guidance.weight)
        if not np.isfinite(eps.data).all():
            raise NumericError(f"non-finite noise prediction at timestep {t}")
        ab_t = schedule.alpha_bar_at(t)
        ab_next = schedule.alpha_bar_at(steps[i + 1]) if i + 1 < len(steps) else 1.0
        x0 = ad.scale(ad.sub(z, ad.scale(eps, float(np.sqrt(1.0 - ab_t)))),
                      float(1.0 / np.sqrt(ab_t)))
        x0 = ad.clip(x0, -1.0, 1.0)
        z = ad.add(ad.scale(x0, float(np.sqrt(ab_next))),
                   ad.scale(eps, float(np.sqrt(1.0 - ab_next))))
    return z
