"""Frame codec and text embedder.

The codec is an exactly invertible space-to-depth rearrangement standing in
for a learned VAE: each k x k x 3 pixel block becomes one latent cell with
3*k^2 channels, values shifted to [-1, 1]. Latents are float64 so the affine
shift inverts bitwise for float32 frames; the denoiser casts to float32 at
its own input.

The embedder stands in for a pretrained text encoder: every distinct token
maps to a unit-Gaussian vector derived from (seed, token) via a stable hash,
so embeddings are deterministic regardless of arrival order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from einops import rearrange

from .errors import ConfigError, ShapeError

DEFAULT_TEXT_DIM = 64


def encode_frame(frame: np.ndarray, k: int) -> np.ndarray:
    """Encode an H0 x W0 x 3 image in [0, 1] into a (3k^2, H0/k, W0/k) latent."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ShapeError(f"encode_frame: expected H x W x 3 image, got shape {frame.shape}")
    h0, w0, _ = frame.shape
    if k < 1 or h0 % k != 0 or w0 % k != 0:
        raise ConfigError(f"encode_frame: image {h0}x{w0} not divisible by patch factor {k}")
    shifted = 2.0 * frame.astype(np.float64) - 1.0
    return rearrange(shifted, "(h ph) (w pw) c -> (c ph pw) h w", ph=k, pw=k)


def decode_frame(latent: np.ndarray, k: int) -> np.ndarray:
    """Exact inverse of encode_frame; returns a float32 image clamped to [0, 1]."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 3:
        raise ShapeError(f"decode_frame: expected C x H x W latent, got shape {latent.shape}")
    if latent.shape[0] != 3 * k * k:
        raise ShapeError(
            f"decode_frame: channel count {latent.shape[0]} != 3*k^2 = {3 * k * k} for k={k}"
        )
    pixels = rearrange(latent, "(c ph pw) h w -> (h ph) (w pw) c", c=3, ph=k, pw=k)
    return np.clip((pixels + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)


@dataclass
class TextEmbedding:
    """A sequence of D-dimensional token vectors; zero tokens marks the null text."""

    tokens: np.ndarray  # (L, D) float32

    @property
    def is_null(self) -> bool:
        return self.tokens.shape[0] == 0

    @classmethod
    def null(cls, dim: int) -> "TextEmbedding":
        return cls(tokens=np.zeros((0, dim), dtype=np.float32))


@dataclass
class TextEmbedder:
    """Seeded hash-table embedder: token -> cached unit-Gaussian D-vector."""

    seed: int = 0
    dim: int = DEFAULT_TEXT_DIM
    _cache: dict = field(default_factory=dict, repr=False)

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            stream = int.from_bytes(digest, "little")
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, stream]))
            vec = rng.standard_normal(self.dim).astype(np.float32)
            self._cache[token] = vec
        return vec

    def embed_text(self, text: str) -> TextEmbedding:
        """Whitespace-tokenize and stack per-token vectors; empty text -> null embedding."""
        words = text.split()
        if not words:
            return TextEmbedding.null(self.dim)
        return TextEmbedding(tokens=np.stack([self.token_vector(w) for w in words]))

    def embed_label(self, label: str) -> np.ndarray:
        """Mean of the label's token vectors (the per-object category embedding)."""
        words = label.split()
        if not words:
            raise ConfigError("embed_label: empty label")
        return np.mean([self.token_vector(w) for w in words], axis=0, dtype=np.float32)

    def preload(self, vocabulary) -> None:
        """Populate the cache up front (single-writer init; reads are concurrent-safe)."""
        for token in vocabulary:
            self.token_vector(token)


def load_vocabulary(path) -> list[str]:
    """Read a UTF-8 vocabulary file, one token per line, skipping blanks."""
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]
