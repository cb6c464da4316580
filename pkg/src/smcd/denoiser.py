"""The 3D denoising UNet.

Two resolution levels of conv-residual blocks, each followed by the
attention stack: spatial self-attention, gated self-attention over
grounding tokens (MIM, optional), text cross-attention, gated
cross-attention onto the conditioning image (DIIM, optional), and temporal
attention across frames. The conditioning image latent is also injected
once at the UNet input through a zero-initialized conv. Every parameter
belongs to exactly one group so the staged freezing policy can act on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, replace

import torch
from torch import nn
from einops import rearrange

from .errors import ConfigError, ShapeError
from .image_cond import ImageIntegration, make_zero_conv
from .motion import MotionIntegration

PARAM_GROUPS = ("spatial_attn", "text_cross_attn", "temporal_attn", "resnet", "mim", "diim")

LAYER_ORDERS = ("standard", "swapped")


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture hyperparameters; serialized into checkpoint metadata."""

    base_channels: int = 32
    channel_mult: tuple = (1, 2)
    num_heads: int = 2
    text_dim: int = 64
    frames: int = 8
    latent_channels: int = 12
    latent_h: int = 16
    latent_w: int = 16
    gated_layer_order: str = "standard"
    fourier_freqs: int = 8
    max_objects: int = 8

    def __post_init__(self):
        if len(tuple(self.channel_mult)) != 2:
            raise ConfigError(f"denoiser: exactly 2 resolution levels supported, got {self.channel_mult}")
        object.__setattr__(self, "channel_mult", tuple(int(m) for m in self.channel_mult))
        for mult in self.channel_mult:
            if self.base_channels * mult % self.num_heads != 0:
                raise ConfigError(
                    f"denoiser: head count {self.num_heads} must divide level width "
                    f"{self.base_channels * mult}"
                )
        if self.latent_h % 2 or self.latent_w % 2:
            raise ConfigError("denoiser: latent H and W must be even (one downsample level)")
        if self.gated_layer_order not in LAYER_ORDERS:
            raise ConfigError(f"denoiser: gated_layer_order must be one of {LAYER_ORDERS}")
        if self.frames < 1 or self.base_channels < 1 or self.latent_channels < 1:
            raise ConfigError("denoiser: dimensions must be positive")

    @property
    def code_dim(self) -> int:
        return 8 * self.fourier_freqs + self.text_dim

    @property
    def time_dim(self) -> int:
        return 4 * self.base_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channel_mult"] = tuple(d.get("channel_mult", (1, 2)))
        return cls(**d)

    def with_frames(self, frames: int) -> "DenoiserConfig":
        return replace(self, frames=frames)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=torch.float32) * (-math.log(10000.0) / max(half - 1, 1))
    )
    args = t.to(torch.float32)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def attention(q, k, v, num_heads: int = 1, key_mask=None):
    """softmax(Q K^T / sqrt(d_head)) V.

    q: (B, Lq, d) or (Lq, d); k, v: matching (B, Lk, d) or (Lk, d).
    key_mask: optional bool (B, Lk) or (Lk,); False keys are excluded exactly
    (their softmax weight is 0). At least one key per query must stay valid.
    """
    squeeze = q.dim() == 2
    if squeeze:
        q, k, v = q[None], k[None], v[None]
        if key_mask is not None:
            key_mask = key_mask[None]
    if q.dim() != 3 or k.dim() != 3 or v.dim() != 3:
        raise ShapeError("attention: expected rank-2 or rank-3 inputs")
    if q.shape[-1] != k.shape[-1] or k.shape[:2] != v.shape[:2] or q.shape[-1] != v.shape[-1]:
        raise ShapeError(
            f"attention: inner dims mismatch q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}"
        )
    d = q.shape[-1]
    if d % num_heads != 0:
        raise ShapeError(f"attention: dim {d} not divisible by {num_heads} heads")
    qh = rearrange(q, "b l (h e) -> b h l e", h=num_heads)
    kh = rearrange(k, "b l (h e) -> b h l e", h=num_heads)
    vh = rearrange(v, "b l (h e) -> b h l e", h=num_heads)
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(d // num_heads)
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    out = torch.softmax(logits, dim=-1) @ vh
    out = rearrange(out, "b h l e -> b l (h e)")
    return out[0] if squeeze else out


class AttentionProj(nn.Module):
    """q/k/v/out projections around the attention primitive (no residual)."""

    def __init__(self, dim: int, kv_dim: int | None = None, num_heads: int = 1):
        super().__init__()
        self.num_heads = num_heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(kv_dim or dim, dim, bias=False)
        self.to_v = nn.Linear(kv_dim or dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim, bias=False)

    def forward(self, x, context, key_mask=None):
        return self.to_out(
            attention(self.to_q(x), self.to_k(context), self.to_v(context),
                      num_heads=self.num_heads, key_mask=key_mask)
        )


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    """Two-conv residual block with a per-block affine on the timestep embedding."""

    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(_norm_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.t_proj(torch.nn.functional.silu(t_emb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


class BlockContext:
    """Per-forward conditioning tensors shared by all UNet blocks."""

    def __init__(self, batch, frames, text_kv, text_mask, codes, code_mask,
                 boxes_gate, image_latent, image_gate, include_temporal):
        self.batch = batch
        self.frames = frames
        self.text_kv = text_kv            # (B*F, L, D)
        self.text_mask = text_mask        # (B*F, L) bool
        self.codes = codes                # (B*F, N, code_dim) or None
        self.code_mask = code_mask        # (B*F, N) bool or None
        self.boxes_gate = boxes_gate      # (B*F, 1, 1) 0/1 or None
        self.image_latent = image_latent  # (B, C, H, W) or None
        self.image_gate = image_gate      # (B*F, 1, 1) 0/1 or None
        self.include_temporal = include_temporal


class UNetBlock(nn.Module):
    """resnet -> spatial attn -> (MIM) -> text cross-attn -> (DIIM) -> temporal attn."""

    def __init__(self, c_in: int, c_out: int, config: DenoiserConfig,
                 with_mim: bool, with_diim: bool):
        super().__init__()
        heads = config.num_heads
        self.order = config.gated_layer_order
        self.res = ResBlock(c_in, c_out, config.time_dim)
        self.spatial = AttentionProj(c_out, num_heads=heads)
        self.text_attn = AttentionProj(c_out, kv_dim=config.text_dim, num_heads=heads)
        self.temporal = AttentionProj(c_out, num_heads=heads)
        self.mim = MotionIntegration(c_out, config.code_dim, heads) if with_mim else None
        self.diim = ImageIntegration(c_out, config.latent_channels, heads) if with_diim else None

    def _run_mim(self, tok, ctx):
        if self.mim is not None and ctx.codes is not None:
            tok = self.mim(tok, ctx.codes, ctx.code_mask, out_mask=ctx.boxes_gate)
        return tok

    def _run_diim(self, tok, ctx):
        if self.diim is not None and ctx.image_latent is not None:
            tok = self.diim(tok, ctx.image_latent, ctx.frames, out_mask=ctx.image_gate)
        return tok

    def forward(self, x, t_emb, ctx: BlockContext):
        h = self.res(x, t_emb)
        hh, ww = h.shape[-2:]
        tok = rearrange(h, "bf c h w -> bf (h w) c")
        tok = tok + self.spatial(tok, tok)
        tok = self._run_mim(tok, ctx) if self.order == "standard" else self._run_diim(tok, ctx)
        tok = tok + self.text_attn(tok, ctx.text_kv, key_mask=ctx.text_mask)
        tok = self._run_diim(tok, ctx) if self.order == "standard" else self._run_mim(tok, ctx)
        if ctx.include_temporal:
            cell = rearrange(tok, "(b f) l c -> (b l) f c", f=ctx.frames)
            cell = cell + self.temporal(cell, cell)
            tok = rearrange(cell, "(b l) f c -> (b f) l c", b=ctx.batch)
        return rearrange(tok, "bf (h w) c -> bf c h w", h=hh, w=ww)


class SMCDenoiser(nn.Module):
    """Noise-prediction UNet over (B, F, C, H, W) video latents."""

    def __init__(self, config: DenoiserConfig, with_mim: bool = False, with_diim: bool = False):
        super().__init__()
        self.config = config
        c0 = config.base_channels * config.channel_mult[0]
        c1 = config.base_channels * config.channel_mult[1]
        cin = config.latent_channels

        self.zero_conv = make_zero_conv(cin) if with_diim else None
        self.stem = nn.Conv2d(cin, c0, 3, padding=1)
        self.enc1 = UNetBlock(c0, c0, config, with_mim, with_diim)
        self.down = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.enc2 = UNetBlock(c0, c1, config, with_mim, with_diim)
        self.mid = UNetBlock(c1, c1, config, with_mim, with_diim)
        self.dec2 = UNetBlock(2 * c1, c1, config, with_mim, with_diim)
        self.up = nn.Conv2d(c1, c0, 3, padding=1)
        self.dec1 = UNetBlock(2 * c0, c0, config, with_mim, with_diim)
        self.head_norm = nn.GroupNorm(_norm_groups(c0), c0)
        self.head = nn.Conv2d(c0, cin, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        # Learned stand-in tokens for the dropped text prompt (length-1 sequence).
        self.null_text_token = nn.Parameter(torch.randn(1, config.text_dim) * 0.02)

    @property
    def has_mim(self) -> bool:
        return self.enc1.mim is not None

    @property
    def has_diim(self) -> bool:
        return self.zero_conv is not None

    def forward(self, z, t, enc, include_temporal: bool = True):
        """Predict the noise in z.

        z: (B, F, C, H, W) float32; t: (B,) int64; enc: EncodedConditions.
        Output matches z's shape.
        """
        if z.dim() != 5:
            raise ShapeError(f"denoiser: expected (B, F, C, H, W) input, got {tuple(z.shape)}")
        b, f, cin, hh, ww = z.shape
        cfg = self.config
        if cin != cfg.latent_channels or hh != cfg.latent_h or ww != cfg.latent_w:
            raise ShapeError(
                f"denoiser: latent shape {(cin, hh, ww)} != configured "
                f"{(cfg.latent_channels, cfg.latent_h, cfg.latent_w)}"
            )
        ctx = self._build_context(b, f, enc, include_temporal, z.device)

        x = rearrange(z, "b f c h w -> (b f) c h w")
        if self.zero_conv is not None and ctx.image_latent is not None:
            inject = self.zero_conv(ctx.image_latent)            # (B, C, H, W)
            inject = inject.repeat_interleave(f, dim=0)
            x = x + inject * ctx.image_gate[:, :, None]          # gate is (B*F, 1, 1)

        t_emb = timestep_embedding(t, cfg.time_dim).to(x.dtype)
        t_emb = t_emb.repeat_interleave(f, dim=0)

        h = self.stem(x)
        h1 = self.enc1(h, t_emb, ctx)
        h2 = self.enc2(self.down(h1), t_emb, ctx)
        m = self.mid(h2, t_emb, ctx)
        d2 = self.dec2(torch.cat([m, h2], dim=1), t_emb, ctx)
        u = self.up(torch.nn.functional.interpolate(d2, scale_factor=2, mode="nearest"))
        d1 = self.dec1(torch.cat([u, h1], dim=1), t_emb, ctx)
        out = self.head(torch.nn.functional.silu(self.head_norm(d1)))
        return rearrange(out, "(b f) c h w -> b f c h w", b=b)

    def _build_context(self, b, f, enc, include_temporal, device):
        if enc.text_tokens.shape[0] != b:
            raise ShapeError(
                f"denoiser: condition batch {enc.text_tokens.shape[0]} != latent batch {b}"
            )
        text = enc.text_tokens
        if enc.text_null.any():
            text = text.clone()
            text[enc.text_null, 0, :] = self.null_text_token[0].to(text.dtype)
        text_kv = text.repeat_interleave(f, dim=0)
        text_mask = enc.text_mask.repeat_interleave(f, dim=0)

        codes = code_mask = boxes_gate = None
        if self.has_mim and enc.codes is not None:
            if enc.codes.shape[1] != f:
                raise ShapeError(
                    f"denoiser: grounding codes cover {enc.codes.shape[1]} frames, latents have {f}"
                )
            codes = rearrange(enc.codes, "b f n d -> (b f) n d")
            code_mask = rearrange(enc.code_mask, "b f n -> (b f) n")
            boxes_gate = enc.boxes_present.repeat_interleave(f)[:, None, None].to(torch.float32)

        image_latent = image_gate = None
        if self.has_diim and enc.image_latent is not None:
            image_latent = enc.image_latent
            image_gate = enc.image_present.repeat_interleave(f)[:, None, None].to(torch.float32)

        return BlockContext(
            batch=b, frames=f, text_kv=text_kv, text_mask=text_mask,
            codes=codes, code_mask=code_mask, boxes_gate=boxes_gate,
            image_latent=image_latent, image_gate=image_gate,
            include_temporal=include_temporal,
        )


def group_of(name: str) -> str:
    """Parameter group for a state-dict name; segment-based, collision-free."""
    parts = name.split(".")
    if "mim" in parts:
        return "mim"
    if "diim" in parts or parts[0] == "zero_conv":
        return "diim"
    if "spatial" in parts:
        return "spatial_attn"
    if "text_attn" in parts or parts[0] == "null_text_token":
        return "text_cross_attn"
    if "temporal" in parts:
        return "temporal_attn"
    return "resnet"


def build_denoiser(config: DenoiserConfig, with_mim: bool = False, with_diim: bool = False,
                   seed: int = 0) -> SMCDenoiser:
    """Construct a denoiser with deterministic initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = SMCDenoiser(config, with_mim=with_mim, with_diim=with_diim)
    return model
