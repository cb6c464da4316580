"""Box trajectories and the motion integration module (MIM).

Per frame, each present object's bounding box is Fourier-embedded,
concatenated with its label embedding, and pushed through a two-layer MLP
to produce a grounding token. A gated self-attention layer then attends
over the concatenation of visual and grounding tokens, keeps the visual
positions, and adds the result scaled by tanh(gamma). gamma starts at zero
so a freshly attached MIM leaves the network's function unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ValidationError


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized [0, 1] coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def validate(self, where: str = "box") -> None:
        for name in ("x_min", "y_min", "x_max", "y_max"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{where}.{name}: {v} outside [0, 1]")
        if self.x_min > self.x_max:
            raise ValidationError(f"{where}: x_min > x_max")
        if self.y_min > self.y_max:
            raise ValidationError(f"{where}: y_min > y_max")

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass
class ObjectTrajectory:
    """One object's label plus per-frame boxes; None marks frames it is absent."""

    label: str
    boxes: list  # list[BoundingBox | None]

    def validate(self, frames: int | None = None, where: str = "trajectory") -> None:
        if not self.label:
            raise ValidationError(f"{where}.label: empty")
        if frames is not None and len(self.boxes) != frames:
            raise ValidationError(
                f"{where}.boxes: length {len(self.boxes)} != frame count {frames}"
            )
        for f, box in enumerate(self.boxes):
            if box is not None:
                box.validate(where=f"{where}.boxes[{f}]")


def fourier_embed(box: BoundingBox, L: int) -> np.ndarray:
    """Sinusoidal code of the 4 box coordinates at L octave frequencies.

    Coordinate-major layout: for each coordinate v, the 2L entries
    sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^{L-1} pi v), cos(2^{L-1} pi v).
    """
    if L < 1:
        raise ValidationError(f"fourier_embed: L must be >= 1, got {L}")
    box.validate(where="fourier_embed")
    out = np.empty(8 * L, dtype=np.float64)
    i = 0
    for v in (box.x_min, box.y_min, box.x_max, box.y_max):
        for k in range(L):
            arg = (2.0**k) * math.pi * v
            out[i] = math.sin(arg)
            out[i + 1] = math.cos(arg)
            i += 2
    return out.astype(np.float32)


class MotionIntegration(nn.Module):
    """Grounding-token MLP plus gated self-attention for one attachment block."""

    def __init__(self, dim: int, code_dim: int, num_heads: int):
        super().__init__()
        from .denoiser import AttentionProj  # avoid import cycle at module load

        self.mlp = nn.Sequential(
            nn.Linear(code_dim, 4 * dim),
            nn.SiLU(),
            nn.Linear(4 * dim, dim),
        )
        self.attn = AttentionProj(dim, num_heads=num_heads)
        self.gamma = nn.Parameter(torch.zeros(()))

    def grounding_tokens(self, codes: torch.Tensor) -> torch.Tensor:
        """Map raw (fourier + label) codes (..., code_dim) to tokens (..., dim)."""
        return self.mlp(codes)

    def forward(
        self,
        visual: torch.Tensor,  # (B, Lv, dim)
        codes: torch.Tensor,   # (B, N, code_dim)
        code_mask: torch.Tensor,  # (B, N) bool, True = slot holds a present object
        out_mask: torch.Tensor | None = None,  # (B, 1, 1) 0/1, scene-level skip
    ) -> torch.Tensor:
        tokens = self.grounding_tokens(codes)
        kv = torch.cat([visual, tokens], dim=1)
        valid = torch.cat(
            [torch.ones(visual.shape[:2], dtype=torch.bool, device=visual.device), code_mask],
            dim=1,
        )
        attended = self.attn(visual, kv, key_mask=valid)
        gated = torch.tanh(self.gamma) * attended
        if out_mask is not None:
            gated = gated * out_mask
        return visual + gated
