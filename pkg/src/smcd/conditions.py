"""The (text, image, trajectories) condition triple and its batch encoding.

A ConditionSet carries per-element presence: text None means the null
prompt (the model substitutes its learned null token), image.present and
boxes_present gate the DIIM and MIM paths. Absent paths are skipped
exactly, so dropout branches and CFG branches coincide bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .denoiser import DenoiserConfig
from .encoders import TextEmbedder, TextEmbedding
from .errors import ConfigError, ShapeError
from .image_cond import ImageCondition
from .motion import ObjectTrajectory, fourier_embed


@dataclass
class ConditionSet:
    """Conditioning triple for one sample."""

    text: TextEmbedding | None = None
    image: ImageCondition = field(default_factory=ImageCondition.absent)
    trajectories: list = field(default_factory=list)  # list[ObjectTrajectory]
    boxes_present: bool = True

    @property
    def has_text(self) -> bool:
        return self.text is not None and not self.text.is_null

    @property
    def has_image(self) -> bool:
        return self.image.present and self.image.latent is not None

    @property
    def has_boxes(self) -> bool:
        return self.boxes_present and len(self.trajectories) > 0

    def without_text(self) -> "ConditionSet":
        return replace(self, text=None)

    def without_image(self) -> "ConditionSet":
        return replace(self, image=ImageCondition.absent())

    def without_boxes(self) -> "ConditionSet":
        return replace(self, boxes_present=False)


@dataclass
class EncodedConditions:
    """Batched torch-side view of a list of ConditionSets."""

    text_tokens: torch.Tensor          # (B, L, D)
    text_mask: torch.Tensor            # (B, L) bool
    text_null: torch.Tensor            # (B,) bool
    codes: torch.Tensor | None         # (B, F, N, code_dim)
    code_mask: torch.Tensor | None     # (B, F, N) bool
    boxes_present: torch.Tensor | None  # (B,) float 0/1
    image_latent: torch.Tensor | None  # (B, C, H, W)
    image_present: torch.Tensor | None  # (B,) float 0/1


def encode_conditions(conds: list, config: DenoiserConfig, embedder: TextEmbedder,
                      frames: int) -> EncodedConditions:
    """Pad and stack a batch of ConditionSets for the denoiser."""
    b = len(conds)
    dim = config.text_dim
    if embedder is not None and embedder.dim != dim:
        raise ConfigError(f"conditions: embedder dim {embedder.dim} != model text dim {dim}")

    lengths = [c.text.tokens.shape[0] if c.has_text else 1 for c in conds]
    l_max = max(lengths)
    text_tokens = torch.zeros(b, l_max, dim)
    text_mask = torch.zeros(b, l_max, dtype=torch.bool)
    text_null = torch.zeros(b, dtype=torch.bool)
    for i, cond in enumerate(conds):
        if cond.has_text:
            toks = cond.text.tokens
            if toks.shape[1] != dim:
                raise ShapeError(f"conditions[{i}]: text dim {toks.shape[1]} != {dim}")
            text_tokens[i, : toks.shape[0]] = torch.from_numpy(np.ascontiguousarray(toks))
            text_mask[i, : toks.shape[0]] = True
        else:
            text_null[i] = True
            text_mask[i, 0] = True  # the learned null token fills slot 0 in the forward pass

    codes = code_mask = boxes_gate = None
    if any(c.has_boxes for c in conds):
        n_max = config.max_objects
        code_dim = config.code_dim
        codes = torch.zeros(b, frames, n_max, code_dim)
        code_mask = torch.zeros(b, frames, n_max, dtype=torch.bool)
        boxes_gate = torch.zeros(b)
        for i, cond in enumerate(conds):
            if not cond.has_boxes:
                continue
            boxes_gate[i] = 1.0
            if len(cond.trajectories) > n_max:
                raise ConfigError(
                    f"conditions[{i}]: {len(cond.trajectories)} objects exceed cap {n_max}"
                )
            for j, traj in enumerate(cond.trajectories):
                traj.validate(frames=frames, where=f"conditions[{i}].trajectories[{j}]")
                label_vec = embedder.embed_label(traj.label)
                for f in range(frames):
                    box = traj.boxes[f]
                    if box is None:
                        continue
                    code = np.concatenate([fourier_embed(box, config.fourier_freqs), label_vec])
                    codes[i, f, j] = torch.from_numpy(code)
                    code_mask[i, f, j] = True

    image_latent = image_gate = None
    if any(c.has_image for c in conds):
        image_latent = torch.zeros(b, config.latent_channels, config.latent_h, config.latent_w)
        image_gate = torch.zeros(b)
        for i, cond in enumerate(conds):
            if not cond.has_image:
                continue
            lat = np.asarray(cond.image.latent, dtype=np.float32)
            want = (config.latent_channels, config.latent_h, config.latent_w)
            if lat.shape != want:
                raise ShapeError(f"conditions[{i}]: image latent {lat.shape} != {want}")
            image_latent[i] = torch.from_numpy(lat)
            image_gate[i] = 1.0

    return EncodedConditions(
        text_tokens=text_tokens, text_mask=text_mask, text_null=text_null,
        codes=codes, code_mask=code_mask, boxes_present=boxes_gate,
        image_latent=image_latent, image_present=image_gate,
    )
