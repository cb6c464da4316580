"""Ancestral sampling with classifier-free guidance.

The guided noise estimate is eps_cond + alpha * (eps_cond - eps_null),
where the null branch replaces the text with the learned null token and
keeps image and box conditioning untouched. alpha = 0 runs the conditional
forward pass only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .conditions import ConditionSet, encode_conditions
from .denoiser import SMCDenoiser
from .encoders import TextEmbedder, decode_frame
from .errors import ConfigError
from .schedule import NoiseSchedule, ddpm_step


@dataclass
class SamplerConfig:
    """Guidance scale, step budget (None = full schedule), and seed."""

    alpha: float = 2.0
    steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"sampler: alpha must be >= 0, got {self.alpha}")
        if self.steps is not None and self.steps < 1:
            raise ConfigError(f"sampler: steps must be >= 1, got {self.steps}")


def schedule_indices(steps: int | None, T: int) -> list:
    """Descending step indices: the full schedule, or an even subsample of it."""
    if steps is None or steps >= T:
        return list(range(T - 1, -1, -1))
    picks = np.unique(np.round(np.linspace(0, T - 1, steps)).astype(int))
    return [int(t) for t in picks[::-1]]


def _guided_eps(model, z_t, t_tensor, enc_cond, enc_null, alpha, include_temporal=True):
    eps_cond = model(z_t, t_tensor, enc_cond, include_temporal=include_temporal)
    if alpha == 0:
        return eps_cond
    eps_null = model(z_t, t_tensor, enc_null, include_temporal=include_temporal)
    return eps_cond + alpha * (eps_cond - eps_null)


def cfg_epsilon(model: SMCDenoiser, z_t: torch.Tensor, t: int, cond: ConditionSet,
                alpha: float, embedder: TextEmbedder) -> torch.Tensor:
    """Classifier-free-guided noise prediction for a single video latent.

    z_t: (F, C, H, W) or (B, F, C, H, W). The condition's text must be
    non-null; the null branch is derived internally.
    """
    if not cond.has_text:
        raise ConfigError("cfg_epsilon: condition text is null; guidance needs a prompt")
    squeeze = z_t.dim() == 4
    if squeeze:
        z_t = z_t[None]
    frames = z_t.shape[1]
    enc_cond = encode_conditions([cond], model.config, embedder, frames=frames)
    enc_null = encode_conditions([cond.without_text()], model.config, embedder, frames=frames)
    t_tensor = torch.full((z_t.shape[0],), int(t), dtype=torch.long)
    out = _guided_eps(model, z_t, t_tensor, enc_cond, enc_null, alpha)
    return out[0] if squeeze else out


def generate(model: SMCDenoiser, sched: NoiseSchedule, cond: ConditionSet,
             sampler: SamplerConfig, embedder: TextEmbedder) -> np.ndarray:
    """Sample a video: returns (F, H0, W0, 3) float32 frames in [0, 1].

    Deterministic given the sampler seed: the initial Gaussian latent and
    every per-step noise draw come from one seeded generator.
    """
    if not cond.has_text:
        raise ConfigError("generate: condition text is null; provide a prompt")
    cfg = model.config
    k = _patch_factor(cfg.latent_channels)
    enc_cond = encode_conditions([cond], cfg, embedder, frames=cfg.frames)
    enc_null = encode_conditions([cond.without_text()], cfg, embedder, frames=cfg.frames)

    gen = torch.Generator().manual_seed(sampler.seed)
    shape = (1, cfg.frames, cfg.latent_channels, cfg.latent_h, cfg.latent_w)
    z = torch.randn(shape, generator=gen)
    model.eval()
    with torch.no_grad():
        for t in schedule_indices(sampler.steps, sched.T):
            t_tensor = torch.full((1,), t, dtype=torch.long)
            eps_hat = _guided_eps(model, z, t_tensor, enc_cond, enc_null, sampler.alpha)
            noise = torch.randn(shape, generator=gen) if t > 0 else None
            z = ddpm_step(z, eps_hat, t, noise, sched)
    frames = [decode_frame(z[0, f].numpy().astype(np.float64), k) for f in range(cfg.frames)]
    return np.stack(frames)


def _patch_factor(latent_channels: int) -> int:
    k = round((latent_channels / 3) ** 0.5)
    if 3 * k * k != latent_channels:
        raise ConfigError(
            f"generate: latent channel count {latent_channels} is not 3*k^2 for integer k"
        )
    return k
