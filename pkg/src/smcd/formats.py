"""On-disk formats: trajectory JSON, dataset manifests, provenance records.

Validation errors name the offending field with a JSON-path-style location,
e.g. "objects[0].boxes[3]: x_min > x_max".
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ValidationError
from .motion import BoundingBox, ObjectTrajectory


def _require(data: dict, key: str, kind, where: str):
    if key not in data:
        raise ValidationError(f"{where}{key}: missing")
    value = data[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ValidationError(f"{where}{key}: expected a number")
        return float(value)
    if not isinstance(value, kind):
        raise ValidationError(f"{where}{key}: expected {kind.__name__}")
    return value


def _parse_box(raw, where: str) -> BoundingBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise ValidationError(f"{where}: expected [x_min, y_min, x_max, y_max]")
    vals = []
    for v in raw:
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ValidationError(f"{where}: coordinates must be numbers")
        vals.append(float(v))
    box = BoundingBox(*vals)
    box.validate(where=where)
    return box


def parse_trajectories(data: dict, where: str = "") -> tuple:
    """Validate {caption, frames, objects} and return (caption, frames, trajectories)."""
    caption = _require(data, "caption", str, where)
    frames = _require(data, "frames", int, where)
    if isinstance(frames, bool) or frames < 1:
        raise ValidationError(f"{where}frames: must be a positive integer")
    objects = _require(data, "objects", list, where)
    trajectories = []
    for i, obj in enumerate(objects):
        ow = f"{where}objects[{i}]."
        if not isinstance(obj, dict):
            raise ValidationError(f"{where}objects[{i}]: expected an object")
        label = _require(obj, "label", str, ow)
        if not label:
            raise ValidationError(f"{ow}label: empty")
        boxes_raw = _require(obj, "boxes", list, ow)
        if len(boxes_raw) != frames:
            raise ValidationError(f"{ow}boxes: length {len(boxes_raw)} != frames {frames}")
        boxes = []
        for f, raw in enumerate(boxes_raw):
            if raw is None:
                boxes.append(None)
            else:
                boxes.append(_parse_box(raw, f"{ow}boxes[{f}]"))
        trajectories.append(ObjectTrajectory(label=label, boxes=boxes))
    return caption, frames, trajectories


def load_trajectory_file(path) -> tuple:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    return parse_trajectories(data)


def trajectory_dict(caption: str, trajectories: list, frames: int) -> dict:
    return {
        "caption": caption,
        "frames": frames,
        "objects": [
            {
                "label": t.label,
                "boxes": [None if b is None else [b.x_min, b.y_min, b.x_max, b.y_max]
                          for b in t.boxes],
            }
            for t in trajectories
        ],
    }


def save_trajectory_file(path, caption: str, trajectories: list, frames: int) -> None:
    write_json(path, trajectory_dict(caption, trajectories, frames))


@dataclass
class ManifestEntry:
    frames_dir: str
    caption: str
    frames: int
    trajectories: list


def load_manifest(path) -> list:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, list):
        raise ValidationError(f"{path}: expected a JSON list")
    entries = []
    for i, item in enumerate(data):
        where = f"[{i}]."
        if not isinstance(item, dict):
            raise ValidationError(f"[{i}]: expected an object")
        frames_dir = _require(item, "frames_dir", str, where)
        caption = _require(item, "caption", str, where)
        trajs_raw = _require(item, "trajectories", dict, where)
        cap2, frames, trajectories = parse_trajectories(trajs_raw, where=f"{where}trajectories.")
        entries.append(ManifestEntry(frames_dir=frames_dir, caption=caption, frames=frames,
                                     trajectories=trajectories))
    return entries


def manifest_entry_dict(frames_dir: str, caption: str, trajectories: list, frames: int) -> dict:
    return {
        "frames_dir": frames_dir,
        "caption": caption,
        "trajectories": trajectory_dict(caption, trajectories, frames),
    }


def write_json(path, data) -> None:
    """Canonical JSON writer: sorted keys, fixed separators, trailing newline."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, sort_keys=True, indent=2)
        fh.write("\n")


def save_frame_png(path, frame: np.ndarray) -> None:
    """Write a float [0,1] HxWx3 frame as 8-bit PNG."""
    arr = np.clip(np.asarray(frame) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_frame_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_provenance(path, command: str, flags: dict, checkpoint_hash: str | None = None,
                     extra: dict | None = None) -> None:
    """Deterministic run record: command, flags, seeds, checkpoint hash."""
    record = {"command": command, "flags": flags}
    if checkpoint_hash is not None:
        record["checkpoint_sha256"] = checkpoint_hash
    if extra:
        record.update(extra)
    write_json(path, record)
