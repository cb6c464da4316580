"""Binary checkpoint format.

Layout: 8-byte magic "SMCD0001", u32 little-endian metadata length, UTF-8
JSON metadata {format_version, config, tensors: {name -> {shape, dtype,
byte_offset}}}, then one contiguous little-endian float32 payload. Tensors
are laid out in sorted-name order; save/load round-trips bitwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .denoiser import DenoiserConfig, SMCDenoiser, build_denoiser, group_of
from .errors import ConfigError, ValidationError
from .schedule import NoiseSchedule, make_schedule

MAGIC = b"SMCD0001"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Parsed checkpoint: metadata dict plus name -> float32 array."""

    meta: dict
    tensors: dict

    @property
    def config(self) -> DenoiserConfig:
        return DenoiserConfig.from_dict(self.meta["config"]["denoiser"])

    @property
    def embedder_seed(self) -> int:
        return int(self.meta["config"]["embedder_seed"])

    def schedule(self) -> NoiseSchedule:
        s = self.meta["config"]["schedule"]
        return make_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))

    @property
    def groups(self) -> set:
        return {group_of(name) for name in self.tensors}

    @property
    def has_mim(self) -> bool:
        return "mim" in self.groups

    @property
    def has_diim(self) -> bool:
        return "diim" in self.groups


def save_checkpoint(path, config_meta: dict, tensors: dict) -> None:
    """Write tensors (name -> float32 ndarray) with the given config metadata."""
    names = sorted(tensors)
    entries = {}
    offset = 0
    blobs = []
    for name in names:
        arr = np.asarray(tensors[name], dtype="<f4")  # keeps 0-d shapes intact
        entries[name] = {"shape": list(arr.shape), "dtype": "f32", "byte_offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    meta = {"format_version": FORMAT_VERSION, "config": config_meta, "tensors": entries}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise ValidationError(f"checkpoint {path}: bad magic {raw[:8]!r}")
    (meta_len,) = struct.unpack("<I", raw[8:12])
    try:
        meta = json.loads(raw[12 : 12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"checkpoint {path}: corrupt metadata ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"checkpoint {path}: format_version {meta.get('format_version')} != {FORMAT_VERSION}"
        )
    payload = raw[12 + meta_len :]
    tensors = {}
    spans = []
    for name, entry in meta["tensors"].items():
        if entry.get("dtype") != "f32":
            raise ValidationError(f"checkpoint {path}: tensors.{name}: unsupported dtype")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        start = int(entry["byte_offset"])
        if start < 0 or start + nbytes > len(payload):
            raise ValidationError(f"checkpoint {path}: tensors.{name}: offset outside payload")
        spans.append((start, start + nbytes, name))
        tensors[name] = np.frombuffer(payload[start : start + nbytes], dtype="<f4").reshape(shape).copy()
    spans.sort()
    for (s0, e0, n0), (s1, _e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ValidationError(f"checkpoint {path}: tensors {n0} and {n1} overlap")
    return Checkpoint(meta=meta, tensors=tensors)


def config_metadata(config: DenoiserConfig, sched: NoiseSchedule, embedder_seed: int) -> dict:
    return {
        "denoiser": config.to_dict(),
        "schedule": sched.to_config(),
        "embedder_seed": int(embedder_seed),
    }


def model_tensors(model: SMCDenoiser) -> dict:
    """Snapshot the model's parameters as float32 numpy arrays."""
    return {name: p.detach().cpu().numpy().astype("<f4", copy=True)
            for name, p in model.state_dict().items()}


def save_model(path, model: SMCDenoiser, sched: NoiseSchedule, embedder_seed: int) -> None:
    save_checkpoint(path, config_metadata(model.config, sched, embedder_seed), model_tensors(model))


def load_model(ckpt: Checkpoint, attach_mim: bool = False, attach_diim: bool = False,
               seed: int = 0) -> SMCDenoiser:
    """Rebuild the denoiser from a checkpoint.

    attach_mim / attach_diim request fresh gate-zero modules beyond what the
    checkpoint carries; stored tensors are restored byte-for-byte either way.
    """
    config = ckpt.config
    with_mim = ckpt.has_mim or attach_mim
    with_diim = ckpt.has_diim or attach_diim
    model = build_denoiser(config, with_mim=with_mim, with_diim=with_diim, seed=seed)
    own = model.state_dict()
    unexpected = [n for n in ckpt.tensors if n not in own]
    if unexpected:
        raise ConfigError(f"checkpoint: unexpected tensors {unexpected[:4]} for this config")
    missing = [n for n in own if n not in ckpt.tensors]
    fresh_ok = {"mim"} if (attach_mim and not ckpt.has_mim) else set()
    if attach_diim and not ckpt.has_diim:
        fresh_ok.add("diim")
    bad_missing = [n for n in missing if group_of(n) not in fresh_ok]
    if bad_missing:
        raise ConfigError(f"checkpoint: missing tensors {bad_missing[:4]} for this config")
    state = {}
    for name, arr in ckpt.tensors.items():
        want = tuple(own[name].shape)
        if tuple(arr.shape) != want:
            raise ConfigError(f"checkpoint: tensors.{name}: shape {arr.shape} != model {want}")
        state[name] = torch.from_numpy(arr)
    model.load_state_dict(state, strict=False)
    return model
