"""Dual image integration module (DIIM).

Two paths carry the conditioning image latent into the denoiser: a 3x3
zero-initialized convolution added to every frame's latent before the UNet,
and a per-block gated cross-attention where a conv-residual adapter projects
the image latent into the block's token space to serve as keys and values.
Both start as exact no-ops (zero conv weights, beta = 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass
class ImageCondition:
    """Conditioning image latent (C, H, W) with a presence flag."""

    latent: np.ndarray | None = None
    present: bool = False

    @classmethod
    def absent(cls) -> "ImageCondition":
        return cls(latent=None, present=False)


def make_zero_conv(channels: int) -> nn.Conv2d:
    """Padding-preserving 3x3 conv with weights and bias initialized to zero."""
    conv = nn.Conv2d(channels, channels, 3, padding=1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ImageAdapter(nn.Module):
    """Conv-residual block projecting the image latent into a block's token dim."""

    def __init__(self, latent_channels: int, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(latent_channels, dim, 3, padding=1)
        self.act = nn.SiLU()
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)
        self.skip = nn.Conv2d(latent_channels, dim, 1)

    def forward(self, x0: torch.Tensor) -> torch.Tensor:
        return self.skip(x0) + self.conv2(self.act(self.conv1(x0)))


class ImageIntegration(nn.Module):
    """Gated cross-attention from visual tokens onto adapted image tokens."""

    def __init__(self, dim: int, latent_channels: int, num_heads: int):
        super().__init__()
        from .denoiser import AttentionProj

        self.adapter = ImageAdapter(latent_channels, dim)
        self.attn = AttentionProj(dim, num_heads=num_heads)
        self.beta = nn.Parameter(torch.zeros(()))

    def forward(
        self,
        visual: torch.Tensor,      # (B*F, Lv, dim)
        x0: torch.Tensor,          # (B, C, H, W) conditioning latents, zeros when absent
        frames: int,
        out_mask: torch.Tensor | None = None,  # (B*F, 1, 1) 0/1 presence
    ) -> torch.Tensor:
        adapted = self.adapter(x0)
        tokens = adapted.flatten(2).transpose(1, 2)  # (B, H*W, dim)
        tokens = tokens.repeat_interleave(frames, dim=0)
        gated = torch.tanh(self.beta) * self.attn(visual, tokens)
        if out_mask is not None:
            gated = gated * out_mask
        return visual + gated
