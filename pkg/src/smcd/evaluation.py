"""Grounding and fidelity metrics.

The tracker is color segmentation: on palette-colored synthetic content it
recovers boxes exactly, standing in for a pretrained tracking model. AO is
the mean IoU over scored (object, frame) pairs; SR@tau the fraction with
IoU above tau. First-frame fidelity is mean feature-space cosine similarity
against the conditioning frame, with a pluggable feature extractor. The
Fréchet distance utility takes any feature sets (a stand-in for
video-feature distances that need pretrained networks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .motion import BoundingBox

SR_THRESHOLDS = (0.5, 0.75)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 when the union is empty."""
    a.validate(where="iou.a")
    b.validate(where="iou.b")
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def oracle_track(frames: np.ndarray, colors: list, tolerance: float = 0.2) -> list:
    """Per-object per-frame tight boxes of pixels near each palette color.

    frames: (F, H, W, 3) float32 in [0, 1]; colors: list of RGB float triples
    (one per object, all distinct). Returns one list per object with a
    BoundingBox or None per frame.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ShapeError(f"oracle_track: expected (F, H, W, 3) frames, got {frames.shape}")
    rgb = [np.asarray(c, dtype=np.float32).reshape(3) for c in colors]
    for i in range(len(rgb)):
        for j in range(i + 1, len(rgb)):
            if float(np.linalg.norm(rgb[i] - rgb[j])) <= 2 * tolerance:
                raise ConfigError(
                    f"oracle_track: object colors {i} and {j} are ambiguous at tolerance {tolerance}"
                )
    n_frames, h, w, _ = frames.shape
    out = [[] for _ in rgb]
    for f in range(n_frames):
        frame = frames[f]
        for i, color in enumerate(rgb):
            dist = np.linalg.norm(frame - color[None, None, :], axis=-1)
            rows, cols = np.nonzero(dist <= tolerance)
            if rows.size == 0:
                out[i].append(None)
                continue
            out[i].append(BoundingBox(
                x_min=cols.min() / w,
                y_min=rows.min() / h,
                x_max=(cols.max() + 1) / w,
                y_max=(rows.max() + 1) / h,
            ))
    return out


@dataclass
class GroundingReport:
    """IoU matrix (objects x frames, NaN = both absent), AO, and SR@tau."""

    iou_matrix: np.ndarray
    ao: float
    sr: dict

    @property
    def sr_50(self) -> float:
        return self.sr[0.5]

    @property
    def sr_75(self) -> float:
        return self.sr[0.75]


def grounding_metrics(pred: list, gt: list, thresholds=SR_THRESHOLDS) -> GroundingReport:
    """Score tracked boxes against ground-truth trajectories.

    pred: per-object lists of BoundingBox/None (as from oracle_track);
    gt: list of ObjectTrajectory, same object order. Pairs absent in both
    are excluded; absent-vs-present scores 0.
    """
    if len(pred) != len(gt):
        raise ShapeError(f"grounding: {len(pred)} tracked objects vs {len(gt)} ground truth")
    if not gt:
        raise ShapeError("grounding: empty ground truth")
    n_frames = len(gt[0].boxes)
    mat = np.full((len(gt), n_frames), np.nan)
    for i, (pboxes, traj) in enumerate(zip(pred, gt)):
        if len(pboxes) != n_frames or len(traj.boxes) != n_frames:
            raise ShapeError(
                f"grounding: object {i} has {len(pboxes)} predicted / {len(traj.boxes)} gt "
                f"boxes, expected {n_frames}"
            )
        for f in range(n_frames):
            p, g = pboxes[f], traj.boxes[f]
            if p is None and g is None:
                continue
            mat[i, f] = 0.0 if (p is None or g is None) else iou(p, g)
    scored = mat[~np.isnan(mat)]
    if scored.size == 0:
        return GroundingReport(iou_matrix=mat, ao=0.0, sr={t: 0.0 for t in thresholds})
    ao = float(scored.mean())
    sr = {t: float((scored > t).mean()) for t in thresholds}
    return GroundingReport(iou_matrix=mat, ao=ao, sr=sr)


@dataclass(frozen=True)
class FeatureExtractor:
    """Plugin boundary: image -> fixed-length vector, plus an identifier for reports."""

    fn: object
    identifier: str

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(image), dtype=np.float64).ravel()


def _luminance_8x8(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    luma = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    h, w = luma.shape
    if h % 8 == 0 and w % 8 == 0:
        return luma.reshape(8, h // 8, 8, w // 8).mean(axis=(1, 3)).ravel()
    ri = (np.arange(8) * h) // 8
    ci = (np.arange(8) * w) // 8
    return luma[np.ix_(ri, ci)].ravel()


DEFAULT_EXTRACTOR = FeatureExtractor(fn=_luminance_8x8, identifier="luminance-8x8")


def first_frame_fidelity(cond_frame: np.ndarray, frames: np.ndarray,
                         fx: FeatureExtractor = DEFAULT_EXTRACTOR):
    """Mean cosine similarity between fx(cond_frame) and each frame's features.

    Returns (value in [-1, 1], excluded_count); zero-norm features are
    excluded from the mean. If nothing can be scored the value is 0.0.
    """
    ref = fx(cond_frame)
    ref_norm = np.linalg.norm(ref)
    sims = []
    excluded = 0
    for frame in frames:
        feat = fx(frame)
        norm = np.linalg.norm(feat)
        if ref_norm == 0.0 or norm == 0.0:
            excluded += 1
            continue
        sims.append(float(ref @ feat / (ref_norm * norm)))
    if not sims:
        return 0.0, excluded
    return float(np.mean(sims)), excluded


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross-term trace is sum(sqrt(eigvals(S_a S_b))) with negative
    eigenvalues from numerical noise clamped at 0.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("frechet: expected (n, d) feature arrays")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"frechet: feature dims differ ({a.shape[1]} vs {b.shape[1]})")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ShapeError("frechet: need at least 2 vectors per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False).reshape(a.shape[1], a.shape[1])
    cov_b = np.cov(b, rowvar=False).reshape(b.shape[1], b.shape[1])
    eig = np.linalg.eigvals(cov_a @ cov_b)
    cross = np.sqrt(np.clip(eig.real, 0.0, None)).sum()
    d2 = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(d2, 0.0)
