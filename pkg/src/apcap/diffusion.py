"""Small-scale DDPM machinery: variance schedule, forward process, objective,
and an ancestral reverse sampler.

Latents here are short flat vectors. This module exists to verify the
diffusion math and to give the mock generation backend a noise source; it
does not produce images itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DiffusionError(ValueError):
    pass


class BadRangeError(DiffusionError):
    pass


class StepOutOfRangeError(DiffusionError):
    pass


class DimMismatchError(DiffusionError):
    pass


@dataclass(frozen=True, eq=False)
class Latent:
    """Flat numeric vector with its original dims recorded."""

    values: np.ndarray
    dims: tuple[int, ...]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(vals)):
            raise DiffusionError("latent entries must be finite")
        if math.prod(self.dims) != vals.size:
            raise DimMismatchError(f"dims {self.dims} do not cover {vals.size} values")
        object.__setattr__(self, "values", vals)

    @classmethod
    def of(cls, array_like) -> "Latent":
        arr = np.asarray(array_like, dtype=np.float64)
        return cls(values=arr.ravel(), dims=tuple(arr.shape) or (1,))

    def reshaped(self) -> np.ndarray:
        return self.values.reshape(self.dims)


@dataclass(frozen=True, eq=False)
class Schedule:
    """Variance schedule: per-step beta and cumulative alpha_bar, 1-indexed
    via t=1..T mapping to array index t-1."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        abar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.T < 1 or beta.shape != (self.T,) or abar.shape != (self.T,):
            raise BadRangeError("schedule arrays must have length T >= 1")
        if not (np.all(beta > 0.0) and np.all(beta < 1.0)):
            raise BadRangeError("every beta_t must lie in (0, 1)")
        if np.any(np.diff(abar) >= 0.0):
            raise BadRangeError("alpha_bar must be strictly decreasing")
        expected = np.cumprod(1.0 - beta)
        if not np.allclose(abar, expected, rtol=1e-12, atol=0.0):
            raise BadRangeError("alpha_bar inconsistent with beta products")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", abar)

    def alpha_bar_at(self, t: int) -> float:
        # alpha_bar_0 == 1 by convention.
        self._check_step(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        self._check_step(t)
        return float(self.beta[t - 1])

    def _check_step(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise StepOutOfRangeError(f"step {t} outside [{lo}, {self.T}]")


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> Schedule:
    """Betas linearly interpolated from beta_start to beta_end inclusive."""
    if T < 1:
        raise BadRangeError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise BadRangeError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T)
    return Schedule(T=T, beta=beta, alpha_bar=np.cumprod(1.0 - beta))


def forward_diffuse(z0: Latent, t: int, sched: Schedule, noise: Latent) -> Latent:
    """z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * noise."""
    sched._check_step(t)
    if noise.values.shape != z0.values.shape:
        raise DimMismatchError(
            f"noise size {noise.values.size} != latent size {z0.values.size}"
        )
    abar = sched.alpha_bar_at(t)
    return Latent(
        values=math.sqrt(abar) * z0.values + math.sqrt(1.0 - abar) * noise.values,
        dims=z0.dims,
    )


def mse_objective(pred_noise: Latent, true_noise: Latent) -> float:
    """Mean squared elementwise difference between predicted and true noise."""
    if pred_noise.values.shape != true_noise.values.shape:
        raise DimMismatchError(
            f"sizes differ: {pred_noise.values.size} vs {true_noise.values.size}"
        )
    diff = pred_noise.values - true_noise.values
    return float(np.mean(diff * diff))


def toy_denoise(
    zT: Latent,
    sched: Schedule,
    denoiser,
    rng: np.random.Generator | None = None,
) -> Latent:
    """Ancestral reverse process from t=T down to t=1.

    ``denoiser(z: ndarray, t: int) -> ndarray`` predicts the noise component
    of the current iterate. Each step applies the posterior mean
    (z - beta_t/sqrt(1-abar_t) * eps) / sqrt(alpha_t) plus Gaussian noise with
    the posterior variance beta_t * (1-abar_{t-1}) / (1-abar_t); the t=1 step
    is noiseless, so a denoiser that infers the exact noise consistent with a
    known z0 returns that z0 up to float error.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    z = zT.values.copy()
    for t in range(sched.T, 0, -1):
        beta_t = sched.beta_at(t)
        abar_t = sched.alpha_bar_at(t)
        abar_prev = sched.alpha_bar_at(t - 1)
        eps = np.asarray(denoiser(z, t), dtype=np.float64)
        if eps.shape != z.shape:
            raise DimMismatchError(f"denoiser output shape {eps.shape} != {z.shape}")
        mean = (z - beta_t / math.sqrt(1.0 - abar_t) * eps) / math.sqrt(1.0 - beta_t)
        if t > 1:
            sigma = math.sqrt(beta_t * (1.0 - abar_prev) / (1.0 - abar_t))
            z = mean + sigma * rng.standard_normal(z.shape)
        else:
            z = mean
    return Latent(values=z, dims=zT.dims)
