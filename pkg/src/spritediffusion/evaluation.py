"""Metric battery for generated sprite videos.

All metrics are pure over their input sets. The embedder used by frame
consistency and the Frechet feature distance is pluggable; the intended one is
the jointly trained center-frame encoder, frozen at evaluation time, so that
paired comparisons share a single feature space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
import torch

from .conditioning import (
    CaptionSpec,
    CenterFrameEncoder,
    COLORS,
    DIRECTIONS,
    DIRECTION_ANGLES,
    SHAPES,
)
from .data import COLOR_RGB, SPEED_THRESHOLD, _shape_alpha, detect_mask, depth_proxy, sketch_proxy

FRECHET_RIDGE = 1e-6
MIN_MASK_AREA = 4.0

Embedder = Callable[[np.ndarray], np.ndarray]  # (N, C, H, W) -> (N, D)


def make_embedder(encoder: CenterFrameEncoder) -> Embedder:
    """Wrap a (frozen) center-frame encoder as a batch frame embedder."""

    def embed(frames: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            out = encoder(torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32)))
        return out.numpy().astype(np.float64)

    return embed


@dataclass
class MetricsReport:
    frame_consistency: Optional[float] = None
    depth_error: Optional[float] = None
    sketch_error: Optional[float] = None
    epe: Optional[float] = None
    epe_excluded: Optional[int] = None
    frechet_distance: Optional[float] = None
    caption_accuracy: Optional[float] = None
    caption_breakdown: Optional[dict] = None
    sample_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}

    def save(self, path: str, label: Optional[str] = None):
        d = self.to_dict()
        if label is not None:
            d["label"] = label
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> tuple["MetricsReport", Optional[str]]:
        with open(path) as fh:
            d = json.load(fh)
        label = d.pop("label", None)
        rep = cls()
        for k, v in d.items():
            setattr(rep, k, v)
        return rep, label


def frame_consistency(videos: Sequence[np.ndarray], embedder: Embedder) -> float:
    """Mean cosine similarity of adjacent-frame embeddings, over all pairs in
    all videos. Every video must have at least two frames."""
    sims = []
    for v in videos:
        if v.shape[0] < 2:
            raise ValueError("frame_consistency needs videos with F >= 2")
        emb = embedder(v)
        a, b = emb[:-1], emb[1:]
        num = (a * b).sum(axis=1)
        den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        sims.extend(num / np.maximum(den, 1e-12))
    return float(np.mean(sims))


def depth_error(videos: Sequence[np.ndarray], depth_conditions: Sequence[np.ndarray]) -> float:
    """Mean absolute difference between the depth proxy re-extracted from each
    generated frame and the input depth condition map (F, 1, H, W)."""
    return _map_error(videos, depth_conditions, depth_proxy)


def sketch_error(videos: Sequence[np.ndarray], sketch_conditions: Sequence[np.ndarray]) -> float:
    return _map_error(videos, sketch_conditions, sketch_proxy)


def _map_error(videos, conditions, proxy) -> float:
    if len(videos) != len(conditions):
        raise ValueError("one condition stack per video required")
    errs = []
    for v, cond in zip(videos, conditions):
        cond = np.asarray(cond)
        if cond.shape[0] != v.shape[0] or cond.shape[-2:] != v.shape[-2:]:
            raise ValueError(
                f"condition shape {cond.shape} incompatible with video {v.shape}"
            )
        for j in range(v.shape[0]):
            errs.append(np.abs(proxy(v[j]) - cond[j, 0]).mean())
    return float(np.mean(errs))


def _body_mask(frame: np.ndarray) -> np.ndarray:
    """Sprite mask minus the white nose marker."""
    mask = detect_mask(frame)
    white = np.abs(frame - 1.0).max(axis=0) < 0.6
    body = mask & ~white
    return body if body.sum() >= MIN_MASK_AREA else mask


def _centroid(mask: np.ndarray) -> Optional[np.ndarray]:
    if mask.sum() < MIN_MASK_AREA:
        return None
    ys, xs = np.nonzero(mask)
    return np.array([xs.mean(), ys.mean()])  # (x, y)


def _track_centroids(video: np.ndarray) -> list:
    return [_centroid(_body_mask(frame)) for frame in video]


def epe(
    videos: Sequence[np.ndarray], gt_motion_maps: Sequence[np.ndarray]
) -> tuple[float, int]:
    """Endpoint error in pixels: per-frame sprite-centroid displacement versus
    the ground-truth velocity encoded in the motion maps. Items whose sprite is
    detectable in fewer than 80% of frames are excluded and counted."""
    errors = []
    excluded = 0
    for video, maps in zip(videos, gt_motion_maps):
        maps = np.asarray(maps)
        nz = np.abs(maps).sum(axis=1) > 0  # (F, H, W)
        vels = []
        for j in range(maps.shape[0]):
            if nz[j].any():
                vels.append([maps[j, 0][nz[j]].mean(), maps[j, 1][nz[j]].mean()])
        gt_v = np.mean(vels, axis=0) if vels else np.zeros(2)
        cents = _track_centroids(video)
        ok = [c for c in cents if c is not None]
        if len(ok) < 0.8 * len(cents) or len(ok) < 2:
            excluded += 1
            continue
        disp = [
            cents[j + 1] - cents[j]
            for j in range(len(cents) - 1)
            if cents[j] is not None and cents[j + 1] is not None
        ]
        errors.append(float(np.mean([np.linalg.norm(d - gt_v) for d in disp])))
    if not errors:
        raise ValueError("every item was excluded (no detectable sprites)")
    return float(np.mean(errors)), excluded


def frechet_from_features(x: np.ndarray, y: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature matrices (N, D).
    Covariances are ridge-regularized by 1e-6 on both sides."""
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("need at least two items per set")
    mu1, mu2 = x.mean(axis=0), y.mean(axis=0)
    d = mu1.shape[0]
    s1 = np.cov(x, rowvar=False) + FRECHET_RIDGE * np.eye(d)
    s2 = np.cov(y, rowvar=False) + FRECHET_RIDGE * np.eye(d)
    covmean = scipy.linalg.sqrtm(s1 @ s2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu1 - mu2
    val = float(diff @ diff + np.trace(s1 + s2 - 2.0 * covmean))
    return max(0.0, val)


def video_features(videos: Sequence[np.ndarray], embedder: Embedder) -> np.ndarray:
    """One feature per video: the mean of its frame embeddings."""
    return np.stack([embedder(v).mean(axis=0) for v in videos])


def frechet_feature_distance(
    gen_set: Sequence[np.ndarray], real_set: Sequence[np.ndarray], embedder: Embedder
) -> float:
    return frechet_from_features(
        video_features(gen_set, embedder), video_features(real_set, embedder)
    )


# --- analytic caption classifier ----------------------------------------------


def _classify_color(frame: np.ndarray, body: np.ndarray) -> Optional[str]:
    if body.sum() < MIN_MASK_AREA:
        return None
    pix = frame[:, body].T  # (N, 3)
    palette = np.array([COLOR_RGB[c] for c in COLORS])
    dists = np.linalg.norm(pix[:, None, :] - palette[None], axis=2)
    votes = np.bincount(dists.argmin(axis=1), minlength=len(COLORS))
    return COLORS[int(votes.argmax())]


def _classify_shape(frame: np.ndarray) -> Optional[str]:
    body = _body_mask(frame)
    cent = _centroid(body)
    if cent is None:
        return None
    area = float(body.sum())
    H, W = body.shape
    best, best_score = None, -np.inf
    # per-shape radius recovered from the detected area
    radii = {
        "circle": np.sqrt(area / np.pi),
        "square": np.sqrt(area) / 2.0 / 0.9,
        "triangle": np.sqrt(area / (3.0 * np.sqrt(3.0) / 4.0)) / 1.15,
    }
    m = body.astype(np.float64)
    for shape in SHAPES:
        tpl = _shape_alpha(shape, cent[0], cent[1], radii[shape], H, W)
        denom = np.sqrt((m * m).sum() * (tpl * tpl).sum())
        score = (m * tpl).sum() / denom if denom > 0 else -np.inf
        if score > best_score:
            best, best_score = shape, score
    return best


def _classify_motion(video: np.ndarray) -> tuple[Optional[str], Optional[str]]:
    cents = _track_centroids(video)
    disp = [
        cents[j + 1] - cents[j]
        for j in range(len(cents) - 1)
        if cents[j] is not None and cents[j + 1] is not None
    ]
    if not disp:
        return None, None
    mean_d = np.mean(disp, axis=0)  # (dx, dy), y down
    speed = float(np.linalg.norm(mean_d))
    angle = float(np.arctan2(-mean_d[1], mean_d[0]))  # north = up
    best = min(
        DIRECTIONS,
        key=lambda d: abs(
            (angle - DIRECTION_ANGLES[d] + np.pi) % (2 * np.pi) - np.pi
        ),
    )
    return best, ("fast" if speed > SPEED_THRESHOLD else "slow")


def classify_video(video: np.ndarray) -> dict:
    """Analytic attribute read-out of a generated video. Values are None when
    the sprite is undetectable."""
    mid = video[video.shape[0] // 2]
    body = _body_mask(mid)
    out = {
        "color": _classify_color(mid, body),
        "shape": _classify_shape(mid),
        "direction": None,
        "speed": None,
    }
    if video.shape[0] >= 2:
        out["direction"], out["speed"] = _classify_motion(video)
    return out


def caption_accuracy(
    videos: Sequence[np.ndarray], intended_specs: Sequence[CaptionSpec]
) -> tuple[float, dict]:
    """Fraction of caption attributes matched by the analytic classifier.

    Motion attributes are only evaluated for videos with F >= 2. Undetectable
    sprites score 0 on every attribute. Returns (overall, per-attribute)."""
    if len(videos) != len(intended_specs):
        raise ValueError("one intended caption per video required")
    hits: dict[str, list] = {"shape": [], "color": [], "direction": [], "speed": []}
    for video, spec in zip(videos, intended_specs):
        pred = classify_video(video)
        hits["shape"].append(pred["shape"] == spec.shape)
        hits["color"].append(pred["color"] == spec.color)
        if video.shape[0] >= 2:
            hits["direction"].append(pred["direction"] == spec.direction)
            hits["speed"].append(pred["speed"] == spec.speed)
    breakdown = {k: float(np.mean(v)) for k, v in hits.items() if v}
    overall = float(np.mean([x for v in hits.values() for x in v]))
    return overall, breakdown
