"""Staged training pipeline.

Stage 0 pretrains the full text-to-video backbone on synthetic data (the
stand-in for a pretrained initialization). Stage 1 attaches MIM and trains
only it on single frames with temporal layers skipped. Stage 2 attaches
DIIM and trains it together with temporal attention on full videos, the
conditioning image being the frame preceding each clip. Spatial and text
cross-attention stay frozen in stages 1 and 2.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .conditions import ConditionSet, encode_conditions
from .denoiser import PARAM_GROUPS, SMCDenoiser, group_of
from .encoders import TextEmbedder, encode_frame
from .errors import ConfigError, SMCDError, ValidationError
from .image_cond import ImageCondition
from .motion import ObjectTrajectory
from .schedule import NoiseSchedule, q_sample


@dataclass
class TrainConfig:
    """Stage hyperparameters; dropout and lr defaults follow the training recipe."""

    stage: int = 0
    lr: float = 5e-5
    batch_size: int = 4
    steps: int = 100
    p_b: float = 0.1
    p_i: float = 0.25
    p_t: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0
    joint: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.stage not in (0, 1, 2):
            raise ConfigError(f"train: unknown stage {self.stage}")
        for name in ("p_b", "p_i", "p_t"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"train: {name}={v} outside [0, 1]")
        if self.joint and self.stage != 2:
            raise ConfigError("train: --joint applies to stage 2 only")


class ParameterStore:
    """Named model parameters with group tags and per-group trainable flags."""

    def __init__(self, model: SMCDenoiser):
        self.model = model
        self.group = {name: group_of(name) for name, _ in model.named_parameters()}
        self.trainable_groups = set(self.present_groups())

    def present_groups(self) -> list:
        return [g for g in PARAM_GROUPS if g in set(self.group.values())]

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        unknown = groups - set(PARAM_GROUPS)
        if unknown:
            raise ConfigError(f"params: unknown groups {sorted(unknown)}")
        self.trainable_groups = groups
        for name, p in self.model.named_parameters():
            p.requires_grad_(self.group[name] in groups)

    def trainable_parameters(self) -> list:
        return [p for p in self.model.parameters() if p.requires_grad]

    def named_in_group(self, group: str) -> list:
        return [(n, p) for n, p in self.model.named_parameters() if self.group[n] == group]

    def snapshot(self) -> dict:
        return {n: p.detach().clone() for n, p in self.model.named_parameters()}


def freeze_policy(stage: int, joint: bool = False) -> frozenset:
    """Trainable groups per stage; spatial/text attention frozen after stage 0."""
    if stage == 0:
        return frozenset(PARAM_GROUPS)
    if stage == 1:
        return frozenset({"mim"})
    if stage == 2:
        if joint:
            return frozenset({"mim", "diim", "temporal_attn"})
        return frozenset({"diim", "temporal_attn"})
    raise ConfigError(f"freeze_policy: unknown stage {stage}")


def condition_dropout(cond: ConditionSet, stage: int, p_b: float, p_i: float,
                      rng: np.random.Generator, p_t: float = 0.0) -> ConditionSet:
    """Randomly null out condition elements for classifier-free training.

    Stage 1 drops boxes with probability p_b; stage 2 drops boxes (p_b) and
    the image (p_i) independently. Text is dropped only in stage 0 (p_t),
    which is where the learned null-text token is trained.
    """
    out = cond
    if stage == 0:
        if rng.random() < p_t:
            out = out.without_text()
        return out
    if stage in (1, 2):
        if rng.random() < p_b:
            out = out.without_boxes()
    if stage == 2:
        if rng.random() < p_i:
            out = out.without_image()
    return out


def compute_loss(model: SMCDenoiser, z0: torch.Tensor, conds: list, t: np.ndarray,
                 eps: torch.Tensor, sched: NoiseSchedule, embedder: TextEmbedder,
                 include_temporal: bool = True) -> torch.Tensor:
    """Noise-prediction MSE: mean over batch, frames, and elements.

    z0: (B, F, C, H, W) clean latents; t: (B,) step indices; eps: like z0.
    """
    if z0.shape != eps.shape:
        raise ValidationError(f"loss: z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
    z_t = torch.stack([q_sample(z0[i], int(t[i]), eps[i], sched) for i in range(z0.shape[0])])
    enc = encode_conditions(conds, model.config, embedder, frames=z0.shape[1])
    pred = model(z_t, torch.as_tensor(t, dtype=torch.long), enc, include_temporal=include_temporal)
    return torch.mean((eps - pred) ** 2)


@dataclass
class TrainingSample:
    """One episode: latents for every frame, caption embedding, grounding data."""

    latents: torch.Tensor       # (E, C, H, W) float32, E >= F + 1
    caption: str
    text: object                # TextEmbedding
    trajectories: list          # list[ObjectTrajectory], boxes for frames 1..F
    frames: int

    def clip_latents(self) -> torch.Tensor:
        return self.latents[1 : 1 + self.frames]

    def v0_latent(self) -> np.ndarray:
        return self.latents[0].numpy()


class TrainingSet:
    """In-memory dataset of encoded episodes."""

    def __init__(self, samples: list, frames: int):
        if not samples:
            raise ValidationError("training set: empty")
        self.samples = samples
        self.frames = frames

    @classmethod
    def from_samples(cls, dataset_samples: list, patch_factor: int, embedder: TextEmbedder,
                     frames: int) -> "TrainingSet":
        out = []
        for s in dataset_samples:
            lat = np.stack([encode_frame(fr, patch_factor) for fr in s.frames]).astype(np.float32)
            out.append(TrainingSample(
                latents=torch.from_numpy(lat),
                caption=s.caption,
                text=embedder.embed_text(s.caption),
                trajectories=s.trajectories,
                frames=frames,
            ))
        return cls(out, frames)


def _frame_slice_condition(sample: TrainingSample, frame_idx: int) -> ConditionSet:
    """Single-frame condition for stage 1: boxes of episode frame `frame_idx`."""
    trajs = []
    for traj in sample.trajectories:
        box = traj.boxes[frame_idx - 1]  # trajectory boxes cover episode frames 1..F
        trajs.append(ObjectTrajectory(label=traj.label, boxes=[box]))
    return ConditionSet(text=sample.text, trajectories=trajs)


def _stage_batch(stage: int, data: TrainingSet, idx: np.ndarray, frame_pick: np.ndarray | None):
    """Assemble (z0, conds) for one step, before dropout."""
    z0s, conds = [], []
    for pos, i in enumerate(idx):
        s = data.samples[int(i)]
        if stage == 1:
            f = int(frame_pick[pos])
            z0s.append(s.latents[f : f + 1])
            conds.append(_frame_slice_condition(s, f))
        elif stage == 0:
            # The base backbone has no conditioning modules; text only.
            z0s.append(s.clip_latents())
            conds.append(ConditionSet(text=s.text))
        else:
            z0s.append(s.clip_latents())
            conds.append(ConditionSet(
                text=s.text,
                trajectories=s.trajectories,
                image=ImageCondition(latent=s.v0_latent(), present=True),
            ))
    return torch.stack(z0s), conds


def train_stage(stage: int, data: TrainingSet, config: TrainConfig, store: ParameterStore,
                sched: NoiseSchedule, embedder: TextEmbedder,
                on_checkpoint=None) -> list:
    """Run config.steps optimizer steps; returns per-step metrics records.

    Frozen groups are bitwise untouched: their parameters carry
    requires_grad=False, so gradients are never materialized for them.
    """
    model = store.model
    if stage == 1 and not model.has_mim:
        raise ConfigError("train: stage 1 requires a model with MIM attached")
    if stage == 2 and not (model.has_mim and model.has_diim):
        raise ConfigError("train: stage 2 requires a model with MIM and DIIM attached")

    policy = freeze_policy(stage, joint=config.joint)
    store.set_trainable(policy & set(store.present_groups()))
    params = store.trainable_parameters()
    if not params:
        raise ConfigError(f"train: no trainable parameters for stage {stage}")
    opt = torch.optim.AdamW(params, lr=config.lr, betas=(0.9, 0.999),
                            weight_decay=config.weight_decay)

    nprng = np.random.default_rng(config.seed)
    tgen = torch.Generator().manual_seed(config.seed)
    n = len(data.samples)
    frames = 1 if stage == 1 else data.frames
    include_temporal = stage != 1
    metrics = []

    model.train()
    for step in range(1, config.steps + 1):
        t0 = time.perf_counter()
        idx = nprng.integers(0, n, size=config.batch_size)
        frame_pick = nprng.integers(1, data.frames + 1, size=config.batch_size) if stage == 1 else None
        z0, conds = _stage_batch(stage, data, idx, frame_pick)
        conds = [condition_dropout(c, stage, config.p_b, config.p_i, nprng, p_t=config.p_t)
                 for c in conds]
        t = nprng.integers(0, sched.T, size=config.batch_size)
        eps = torch.randn(z0.shape, generator=tgen)

        loss = compute_loss(model, z0, conds, t, eps, sched, embedder,
                            include_temporal=include_temporal)
        loss_val = float(loss.detach())
        if not math.isfinite(loss_val):
            norms = {g: float(sum(p.detach().norm() ** 2 for _, p in store.named_in_group(g)) ** 0.5)
                     for g in store.present_groups()}
            raise SMCDError(
                f"train: non-finite loss at step {step} (stage {stage}, t={t.tolist()}); "
                f"parameter norms {norms}"
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

        metrics.append({
            "step": step,
            "stage": stage,
            "loss": loss_val,
            "lr": config.lr,
            "seconds": round(time.perf_counter() - t0, 6),
        })
        if config.checkpoint_every and on_checkpoint and step % config.checkpoint_every == 0:
            on_checkpoint(step)

    model.eval()
    return metrics
