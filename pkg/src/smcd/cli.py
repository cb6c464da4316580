"""Command-line entry point: datagen, train, sample, eval, inspect.

Every command is seeded explicitly and writes a provenance record (flags,
seeds, checkpoint hash), so identical invocations produce byte-identical
artifacts. Exit codes: 0 ok, 2 validation, 3 shape/config, 4 I/O.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import checkpoint as ckpt_io
from . import data as synth
from . import formats
from .conditions import ConditionSet
from .denoiser import DenoiserConfig, build_denoiser, group_of
from .encoders import TextEmbedder, encode_frame
from .errors import ConfigError, SMCDError, ValidationError
from .evaluation import (DEFAULT_EXTRACTOR, first_frame_fidelity, frechet_distance,
                         grounding_metrics, oracle_track)
from .image_cond import ImageCondition
from .sampling import SamplerConfig, generate
from .schedule import make_schedule
from .training import ParameterStore, TrainConfig, TrainingSet, train_stage

_TRAIN_KEYS = {"lr", "batch_size", "steps", "p_b", "p_i", "p_t", "weight_decay", "seed",
               "checkpoint_every"}


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    unknown = set(data) - {"denoiser", "schedule", "train", "embedder_seed"}
    if unknown:
        raise ValidationError(f"{path}: unknown config sections {sorted(unknown)}")
    bad = set(data.get("train", {})) - _TRAIN_KEYS
    if bad:
        raise ValidationError(f"{path}: train: unknown keys {sorted(bad)}")
    return data


def _flags_record(args, skip=("func",)):
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}


# ---------------------------------------------------------------- datagen


def cmd_datagen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = synth.make_dataset(args.count, args.seed, canvas=args.canvas,
                                 clip_frames=args.frames, episode_len=args.episode_len,
                                 max_objects=args.max_objects)
    manifest = []
    for i, sample in enumerate(samples):
        name = f"sample_{i:04d}"
        sdir = out / name
        sdir.mkdir(exist_ok=True)
        for f in range(sample.frames.shape[0]):
            formats.save_frame_png(sdir / f"frame_{f:03d}.png", sample.frames[f])
        formats.save_trajectory_file(sdir / "trajectory.json", sample.caption,
                                     sample.trajectories, sample.clip_frames)
        manifest.append(formats.manifest_entry_dict(name, sample.caption,
                                                    sample.trajectories, sample.clip_frames))
    formats.write_json(out / "manifest.json", manifest)
    formats.write_provenance(out / "provenance.json", "datagen", _flags_record(args))
    print(f"wrote {len(samples)} samples to {out}")
    return 0


# ---------------------------------------------------------------- train


class _EpisodeView:
    """Loaded episode with the fields TrainingSet expects."""

    def __init__(self, frames, caption, trajectories):
        self.frames = frames
        self.caption = caption
        self.trajectories = trajectories


def _load_training_samples(manifest_path: Path, frames: int):
    entries = formats.load_manifest(manifest_path)
    root = manifest_path.parent
    episodes = []
    for i, entry in enumerate(entries):
        if entry.frames != frames:
            raise ValidationError(
                f"[{i}].trajectories.frames: {entry.frames} != model frame count {frames}"
            )
        sdir = root / entry.frames_dir
        paths = sorted(sdir.glob("frame_*.png"))
        if len(paths) < frames + 1:
            raise ValidationError(f"[{i}].frames_dir: {len(paths)} frames, need >= {frames + 1}")
        eps_frames = np.stack([formats.load_frame_png(p) for p in paths])
        episodes.append(_EpisodeView(eps_frames, entry.caption, entry.trajectories))
    return episodes


def cmd_train(args) -> int:
    cfg_file = _load_config_file(args.config)
    train_kwargs = dict(cfg_file.get("train", {}))
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    tconfig = TrainConfig(stage=args.stage, joint=args.joint, **train_kwargs)

    init_hash = None
    if args.stage == 0:
        if args.init_checkpoint:
            raise ConfigError("train: stage 0 starts fresh; do not pass --init-checkpoint")
        dconfig = DenoiserConfig.from_dict(cfg_file.get("denoiser", {}))
        sched_cfg = cfg_file.get("schedule", {})
        sched = make_schedule(int(sched_cfg.get("T", 100)),
                              float(sched_cfg.get("beta_start", 1e-4)),
                              float(sched_cfg.get("beta_end", 0.02)))
        embedder_seed = int(cfg_file.get("embedder_seed", 0))
        model = build_denoiser(dconfig, seed=tconfig.seed)
    else:
        if not args.init_checkpoint:
            raise ConfigError(f"train: stage {args.stage} requires --init-checkpoint "
                              f"(the stage {args.stage - 1} output)")
        ckpt = ckpt_io.load_checkpoint(args.init_checkpoint)
        init_hash = formats.file_sha256(args.init_checkpoint)
        if args.stage == 2 and not ckpt.has_mim and not args.joint:
            raise ConfigError("train: stage 2 requires a stage-1 checkpoint with MIM; "
                              "pass --joint to attach and train it jointly")
        dconfig = ckpt.config
        sched = ckpt.schedule()
        embedder_seed = ckpt.embedder_seed
        model = ckpt_io.load_model(
            ckpt,
            attach_mim=args.stage == 1 or (args.stage == 2 and args.joint),
            attach_diim=args.stage == 2,
            seed=tconfig.seed,
        )

    embedder = TextEmbedder(seed=embedder_seed, dim=dconfig.text_dim)
    episodes = _load_training_samples(Path(args.data), dconfig.frames)
    k = _patch_factor_for(dconfig)
    tset = TrainingSet.from_samples(episodes, k, embedder, dconfig.frames)

    store = ParameterStore(model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def periodic(step):
        ckpt_io.save_model(f"{out}.step{step}", model, sched, embedder_seed)

    metrics = train_stage(args.stage, tset, tconfig, store, sched, embedder,
                          on_checkpoint=periodic)
    ckpt_io.save_model(out, model, sched, embedder_seed)

    metrics_path = Path(args.metrics) if args.metrics else Path(str(out) + ".metrics.ndjson")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    formats.write_provenance(
        str(out) + ".provenance.json", "train", _flags_record(args),
        checkpoint_hash=formats.file_sha256(out),
        extra={"init_checkpoint_sha256": init_hash} if init_hash else None,
    )
    last = metrics[-1]["loss"] if metrics else float("nan")
    print(f"stage {args.stage}: {len(metrics)} steps, final loss {last:.6f}, checkpoint {out}")
    return 0


def _patch_factor_for(dconfig: DenoiserConfig) -> int:
    k = round((dconfig.latent_channels / 3) ** 0.5)
    if 3 * k * k != dconfig.latent_channels:
        raise ConfigError(
            f"latent channel count {dconfig.latent_channels} is not 3*k^2 for integer k"
        )
    return k


# ---------------------------------------------------------------- sample


def cmd_sample(args) -> int:
    ckpt = ckpt_io.load_checkpoint(args.checkpoint)
    model = ckpt_io.load_model(ckpt)
    sched = ckpt.schedule()
    dconfig = ckpt.config
    embedder = TextEmbedder(seed=ckpt.embedder_seed, dim=dconfig.text_dim)
    k = _patch_factor_for(dconfig)

    caption = args.prompt
    trajectories = []
    if args.trajectory:
        t_caption, frames, trajectories = formats.load_trajectory_file(args.trajectory)
        if frames != dconfig.frames:
            raise ValidationError(
                f"frames: trajectory covers {frames} frames, model generates {dconfig.frames}"
            )
        caption = args.prompt or t_caption
        if trajectories and not model.has_mim:
            raise ConfigError("sample: checkpoint has no motion module; "
                              "train stage 1 first or drop --trajectory")
    if not caption:
        raise ConfigError("sample: provide --trajectory (with a caption) or --prompt")

    image = ImageCondition.absent()
    if args.image:
        if not model.has_diim:
            raise ConfigError("sample: checkpoint has no image module; "
                              "train stage 2 first or drop --image")
        frame = formats.load_frame_png(args.image)
        want = (dconfig.latent_h * k, dconfig.latent_w * k)
        if frame.shape[:2] != want:
            raise ValidationError(
                f"image: size {frame.shape[:2]} != expected {want} for this checkpoint"
            )
        image = ImageCondition(latent=encode_frame(frame, k).astype(np.float32), present=True)

    cond = ConditionSet(text=embedder.embed_text(caption), image=image,
                        trajectories=trajectories)
    sampler = SamplerConfig(alpha=args.alpha, steps=args.steps, seed=args.seed)
    frames_out = generate(model, sched, cond, sampler, embedder)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f in range(frames_out.shape[0]):
        formats.save_frame_png(out / f"frame_{f:03d}.png", frames_out[f])
    if args.gif:
        imgs = [Image.fromarray((np.clip(fr, 0, 1) * 255 + 0.5).astype(np.uint8))
                for fr in frames_out]
        imgs[0].save(out / "video.gif", save_all=True, append_images=imgs[1:],
                     duration=125, loop=0)
    formats.write_provenance(
        out / "provenance.json", "sample", _flags_record(args),
        checkpoint_hash=formats.file_sha256(args.checkpoint),
        extra={
            "condition": {
                "caption": caption,
                "image_present": image.present,
                "num_trajectories": len(trajectories),
                "trajectories": formats.trajectory_dict(caption, trajectories, dconfig.frames)
                if trajectories else None,
            },
            "sampler": {"alpha": sampler.alpha, "steps": sampler.steps, "seed": sampler.seed},
        },
    )
    print(f"wrote {frames_out.shape[0]} frames to {out}")
    return 0


# ---------------------------------------------------------------- eval


def _label_color(label: str):
    color = label.split()[0]
    return synth.palette_rgb(color)


def cmd_eval(args) -> int:
    entries = formats.load_manifest(Path(args.reference))
    ref_root = Path(args.reference).parent
    gen_root = Path(args.generated)
    per_video = []
    gen_feats, ref_feats = [], []
    fff_cond_vals, fff_excluded = [], 0

    for i, entry in enumerate(entries):
        gdir = gen_root / f"sample_{i:04d}"
        if not gdir.is_dir():
            raise ValidationError(f"generated: missing directory {gdir}")
        gpaths = sorted(gdir.glob("frame_*.png"))
        if len(gpaths) != entry.frames:
            raise ValidationError(
                f"generated/sample_{i:04d}: {len(gpaths)} frames, expected {entry.frames}"
            )
        gen_frames = np.stack([formats.load_frame_png(p) for p in gpaths])
        rdir = ref_root / entry.frames_dir
        rpaths = sorted(rdir.glob("frame_*.png"))
        ref_frames = np.stack([formats.load_frame_png(p) for p in rpaths])

        colors = [_label_color(t.label) for t in entry.trajectories]
        tracked = oracle_track(gen_frames, colors, tolerance=args.tolerance)
        report = grounding_metrics(tracked, entry.trajectories)
        fff, excl = first_frame_fidelity(ref_frames[0], gen_frames, DEFAULT_EXTRACTOR)
        fff_excluded += excl
        fff_cond_vals.append(fff)
        gen_feats.extend(DEFAULT_EXTRACTOR(f) for f in gen_frames)
        ref_feats.extend(DEFAULT_EXTRACTOR(f) for f in ref_frames[1 : 1 + entry.frames])

        per_video.append({
            "sample": f"sample_{i:04d}",
            "AO": report.ao,
            "SR_50": report.sr_50,
            "SR_75": report.sr_75,
            "FFF": fff,
            "per_object": [
                {"label": t.label,
                 "AO": float(np.nanmean(report.iou_matrix[j]))
                 if not np.all(np.isnan(report.iou_matrix[j])) else 0.0}
                for j, t in enumerate(entry.trajectories)
            ],
        })

    summary = {
        "AO": float(np.mean([v["AO"] for v in per_video])),
        "SR_50": float(np.mean([v["SR_50"] for v in per_video])),
        "SR_75": float(np.mean([v["SR_75"] for v in per_video])),
        "FFF": float(np.mean(fff_cond_vals)),
        "frechet": frechet_distance(np.stack(gen_feats), np.stack(ref_feats)),
        "fff_excluded": fff_excluded,
        "videos": len(per_video),
        "extractor": DEFAULT_EXTRACTOR.identifier,
        "tracker": f"color-segmentation(tol={args.tolerance})",
        "per_video": per_video,
    }
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    formats.write_json(report_path, summary)

    table = _report_table(summary)
    with open(str(report_path) + ".txt", "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    formats.write_provenance(str(report_path) + ".provenance.json", "eval",
                             _flags_record(args))
    return 0


def _report_table(summary: dict) -> str:
    lines = [
        f"{'Method':<12}{'Frechet':>10}{'FFF':>8}{'SR_50':>8}{'SR_75':>8}{'AO':>8}",
        f"{'generated':<12}{summary['frechet']:>10.3f}{summary['FFF']:>8.3f}"
        f"{summary['SR_50']:>8.3f}{summary['SR_75']:>8.3f}{summary['AO']:>8.3f}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- inspect


def cmd_inspect(args) -> int:
    ckpt = ckpt_io.load_checkpoint(args.checkpoint)
    cfg = ckpt.meta["config"]
    print(f"checkpoint {args.checkpoint}")
    print(f"format_version: {ckpt.meta['format_version']}")
    print(f"schedule: T={cfg['schedule']['T']} beta=[{cfg['schedule']['beta_start']}, "
          f"{cfg['schedule']['beta_end']}]")
    print(f"embedder_seed: {cfg['embedder_seed']}")
    print("denoiser: " + json.dumps(cfg["denoiser"], sort_keys=True))
    groups = sorted(ckpt.groups)
    print(f"groups: {', '.join(groups)}")
    total = 0
    by_group = {}
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        g = group_of(name)
        n = int(arr.size)
        total += n
        by_group[g] = by_group.get(g, 0) + n
        shape = "x".join(str(s) for s in arr.shape) if arr.shape else "scalar"
        print(f"  {name:<44} {shape:>14} {g}")
    for g in groups:
        print(f"group {g}: {by_group[g]} parameters")
    print(f"total: {total} parameters")
    return 0


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smcd",
                                description="Scene- and motion-conditional video diffusion")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="generate a synthetic dataset")
    d.add_argument("--count", type=int, required=True)
    d.add_argument("--seed", type=int, required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--canvas", type=int, default=32)
    d.add_argument("--frames", type=int, default=8)
    d.add_argument("--episode-len", type=int, default=None)
    d.add_argument("--max-objects", type=int, default=2)
    d.set_defaults(func=cmd_datagen)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(0, 1, 2), required=True)
    t.add_argument("--config", default=None, help="JSON config file")
    t.add_argument("--data", required=True, help="dataset manifest path")
    t.add_argument("--init-checkpoint", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--joint", action="store_true",
                   help="stage-2 ablation: train MIM, DIIM, and temporal attention together")
    t.add_argument("--metrics", default=None)
    t.add_argument("--seed", type=int, default=None, help="overrides the config file seed")
    t.add_argument("--device", default="cpu")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate a video from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--trajectory", default=None, help="trajectory JSON file")
    s.add_argument("--image", default=None, help="conditioning image PNG")
    s.add_argument("--prompt", default=None, help="caption override")
    s.add_argument("--alpha", type=float, default=2.0)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--gif", action="store_true")
    s.add_argument("--device", default="cpu")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score generated videos against a reference manifest")
    e.add_argument("--generated", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--tolerance", type=float, default=0.2)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="list checkpoint parameters and groups")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("SMCD_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print("error: config: SMCD_THREADS must be an integer", file=sys.stderr)
            return 3
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SMCDError as exc:
        print(f"error: {exc.error_class}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
