"""Diffusion noise schedule, forward noising, and the ancestral reverse step.

The schedule is a linear beta ramp with precomputed cumulative products.
`q_sample` and `ddpm_step` take scalar coefficients from the schedule and
apply them elementwise, so they work on numpy arrays and torch tensors alike.
Timesteps are zero-based internally; the CLI reports them one-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance tables: betas, alphas = 1 - betas, and their cumulative product."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def to_config(self) -> dict:
        return {"T": self.T, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build a linear beta schedule with T steps, endpoints inclusive.

    Desk-scale defaults: T=100, beta 1e-4 -> 0.02.
    """
    if not isinstance(T, int) or T < 1:
        raise ConfigError(f"schedule: T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"schedule: need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def q_sample(z0, t: int, eps, sched: NoiseSchedule):
    """Noise clean latents to step t: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    _check_t(t, sched)
    if getattr(z0, "shape", None) != getattr(eps, "shape", None):
        raise ShapeError(f"q_sample: z0 shape {z0.shape} != eps shape {eps.shape}")
    abar = float(sched.alpha_bars[t])
    return math.sqrt(abar) * z0 + math.sqrt(1.0 - abar) * eps


def ddpm_step(z_t, eps_pred, t: int, noise, sched: NoiseSchedule):
    """One ancestral reverse step with fixed variance sigma_t^2 = beta_t.

    Posterior mean (1/sqrt(alpha_t)) * (z_t - beta_t/sqrt(1-abar_t) * eps_pred),
    plus sigma_t * noise; the noise term is dropped at t = 0.
    """
    _check_t(t, sched)
    if getattr(z_t, "shape", None) != getattr(eps_pred, "shape", None):
        raise ShapeError(f"ddpm_step: z_t shape {z_t.shape} != eps_pred shape {eps_pred.shape}")
    alpha = float(sched.alphas[t])
    beta = float(sched.betas[t])
    abar = float(sched.alpha_bars[t])
    # beta = 0 only on degenerate hand-built schedules; avoid 0/0 when abar = 1.
    coef = beta / math.sqrt(1.0 - abar) if beta > 0.0 else 0.0
    mean = (z_t - coef * eps_pred) / math.sqrt(alpha)
    if t == 0:
        return mean
    if getattr(noise, "shape", None) != getattr(z_t, "shape", None):
        raise ShapeError(f"ddpm_step: noise shape {noise.shape} != z_t shape {z_t.shape}")
    return mean + math.sqrt(beta) * noise


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not (0 <= t < sched.T):
        raise ConfigError(f"schedule: step index {t} outside [0, {sched.T})")
