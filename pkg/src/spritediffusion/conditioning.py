"""Toy stand-ins for pretrained text/image encoders, plus condition dropout.

Captions are structured attribute records, not free text: a caption is encoded
deterministically by concatenating one-hot attribute blocks and rotating them
into the embedding space with a fixed seeded orthogonal matrix. The image
encoder is a small trainable convnet applied to the center frame of a video.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch
from torch import nn

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
DIRECTIONS = ("E", "NE", "N", "NW", "W", "SW", "S", "SE")
SPEEDS = ("slow", "fast")

# Compass angle in radians, measured from +x (east), y pointing up.
DIRECTION_ANGLES = {d: i * np.pi / 4 for i, d in enumerate(DIRECTIONS)}

CODE_DIM = len(SHAPES) + len(COLORS) + len(DIRECTIONS) + len(SPEEDS)


@dataclass(frozen=True)
class CaptionSpec:
    """Structured caption: one sprite's appearance and motion attributes."""

    shape: str
    color: str
    direction: str
    speed: str
    has_motion_words: bool = True

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.speed not in SPEEDS:
            raise ValueError(f"unknown speed {self.speed!r}")

    def to_dict(self) -> dict:
        return {
            "shape": self.shape,
            "color": self.color,
            "direction": self.direction,
            "speed": self.speed,
            "has_motion_words": self.has_motion_words,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaptionSpec":
        return cls(
            shape=d["shape"],
            color=d["color"],
            direction=d["direction"],
            speed=d["speed"],
            has_motion_words=bool(d.get("has_motion_words", True)),
        )

    def one_hot(self) -> np.ndarray:
        """Concatenated one-hot blocks shape | color | direction | speed.

        When has_motion_words is false the direction and speed blocks are
        zeroed, so motion attributes do not influence the embedding.
        """
        code = np.zeros(CODE_DIM, dtype=np.float64)
        code[SHAPES.index(self.shape)] = 1.0
        code[len(SHAPES) + COLORS.index(self.color)] = 1.0
        if self.has_motion_words:
            off = len(SHAPES) + len(COLORS)
            code[off + DIRECTIONS.index(self.direction)] = 1.0
            code[off + len(DIRECTIONS) + SPEEDS.index(self.speed)] = 1.0
        return code


def caption_codebook(embed_dim: int, codebook_seed: int) -> np.ndarray:
    """Fixed (embed_dim, CODE_DIM) matrix with orthonormal columns."""
    if embed_dim < CODE_DIM:
        raise ValueError(
            f"embed_dim ({embed_dim}) must be >= attribute code width ({CODE_DIM})"
        )
    rng = np.random.default_rng(codebook_seed)
    g = rng.standard_normal((embed_dim, embed_dim))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))  # sign-fix for a unique decomposition
    return q[:, :CODE_DIM]


def encode_caption(
    spec: CaptionSpec, codebook_seed: int, embed_dim: int = 64
) -> np.ndarray:
    """Deterministic caption embedding. Distinct attribute tuples map to
    distinct embeddings; equal tuples collide exactly."""
    book = caption_codebook(embed_dim, codebook_seed)
    return (book @ spec.one_hot()).astype(np.float32)


class CenterFrameEncoder(nn.Module):
    """Small trainable convnet over the center frame of a video.

    Used both as the image-conditioning branch during training and as the
    frozen feature extractor for consistency / Frechet metrics.
    """

    def __init__(self, in_channels: int = 3, embed_dim: int = 64, width: int = 16):
        super().__init__()
        self.embed_dim = embed_dim
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(2),
        )
        self.proj = nn.Linear(2 * width * 4, embed_dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """frames: (B, C, H, W) -> (B, embed_dim)."""
        h = self.net(frames)
        return self.proj(h.flatten(1))


def center_frame_index(num_frames: int) -> int:
    return num_frames // 2


def encode_center_frame(encoder: CenterFrameEncoder, video: torch.Tensor) -> torch.Tensor:
    """Embed frame floor(F/2) of a (F, C, H, W) video; F=1 uses the sole frame."""
    if video.ndim != 4 or video.shape[0] < 1:
        raise ValueError(f"expected non-empty (F, C, H, W) video, got {tuple(video.shape)}")
    frame = video[center_frame_index(video.shape[0])]
    return encoder(frame[None])[0]


@dataclass(frozen=True)
class ConditionBundle:
    """Conditioning inputs for one denoiser call.

    Null-flagged slots resolve to the denoiser's learned null tokens at use
    time; the all-null bundle is the unconditional branch for guidance.
    structural_maps, when present, is a (F, S, H, W) stack concatenated onto
    the denoiser input channels.
    """

    text_embedding: Optional[torch.Tensor] = None
    image_embedding: Optional[torch.Tensor] = None
    structural_maps: Optional[torch.Tensor] = None
    text_is_null: bool = True
    image_is_null: bool = True

    def __post_init__(self):
        if self.text_embedding is None and not self.text_is_null:
            raise ValueError("non-null text slot requires an embedding")
        if self.image_embedding is None and not self.image_is_null:
            raise ValueError("non-null image slot requires an embedding")

    def unconditional(self) -> "ConditionBundle":
        """Null both embedding slots; structural maps are kept as-is."""
        return replace(self, text_is_null=True, image_is_null=True)


def drop_conditions(
    bundle: ConditionBundle,
    p_drop_text: float,
    p_drop_image: float,
    rng: np.random.Generator,
) -> ConditionBundle:
    """Independently null-flag each non-null slot with its drop probability."""
    if not (0.0 <= p_drop_text <= 1.0 and 0.0 <= p_drop_image <= 1.0):
        raise ValueError("drop probabilities must lie in [0, 1]")
    drop_text = (not bundle.text_is_null) and rng.random() < p_drop_text
    drop_image = (not bundle.image_is_null) and rng.random() < p_drop_image
    return replace(
        bundle,
        text_is_null=bundle.text_is_null or drop_text,
        image_is_null=bundle.image_is_null or drop_image,
    )


def all_caption_specs(has_motion_words: bool = True):
    """Every (shape, color, direction, speed) combination, in a fixed order."""
    return [
        CaptionSpec(s, c, d, v, has_motion_words)
        for s in SHAPES
        for c in COLORS
        for d in DIRECTIONS
        for v in SPEEDS
    ]
