"""Prompt-driven video generation from a trained checkpoint."""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np
import torch

from . import denoiser as dn
from . import diffusion
from .conditioning import CaptionSpec, ConditionBundle, encode_caption

# seed offset separating the still-stage and video-stage noise streams of
# assembled sampling; any fixed constant works, it only has to be documented
ASSEMBLY_SEED_OFFSET = 1 << 20


def sample_video(
    model: dn.Denoiser,
    sched: diffusion.NoiseSchedule,
    caption: Optional[CaptionSpec],
    cfg: diffusion.SamplerConfig,
    F: int,
    H: int,
    W: int,
    codebook_seed: int = 0,
    structural_maps: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Generate one (F, C, H, W) video clipped to [-1, 1].

    caption=None samples unconditionally (both embedding slots null).
    structural_maps, when given, ride along on both guidance branches.
    """
    model.eval()
    struct = None
    if structural_maps is not None:
        s = model.config.struct_channels
        if s == 0:
            raise ValueError("checkpoint was trained without structural channels")
        struct = torch.from_numpy(
            np.ascontiguousarray(structural_maps[:, :s], dtype=np.float32)
        )
    if caption is not None:
        text_emb = encode_caption(caption, codebook_seed, model.config.embed_dim)
        bundle = ConditionBundle(
            text_embedding=text_emb, structural_maps=struct, text_is_null=False
        )
    else:
        bundle = ConditionBundle(structural_maps=struct)

    def denoise_fn(x, t, cond):
        with torch.no_grad():
            return dn.denoise(model, x, t, cond)

    shape = (F, model.config.out_channels, H, W)
    video = diffusion.ddim_sample(denoise_fn, bundle, shape, sched, cfg)
    return np.clip(video.numpy(), -1.0, 1.0)


def sample_video_assembled(
    model: dn.Denoiser,
    sched: diffusion.NoiseSchedule,
    caption: CaptionSpec,
    cfg: diffusion.SamplerConfig,
    F: int,
    H: int,
    W: int,
    codebook_seed: int = 0,
    still_cfg: Optional[diffusion.SamplerConfig] = None,
) -> np.ndarray:
    """Two-stage text-to-video: generate a text-conditioned still, encode it
    with the model's own center-frame encoder, then generate the video with
    both the text and image slots live.

    This matches how the two branches are trained — captions pair with stills,
    videos pair with their center frame — so the video stage never runs on a
    condition pattern it has not seen. Deterministic given cfg.seed; the video
    stage uses cfg.seed + ASSEMBLY_SEED_OFFSET.
    """
    if caption is None:
        raise ValueError("assembled sampling requires a caption")
    model.eval()
    if still_cfg is None:
        still_cfg = cfg
    still = sample_video(model, sched, caption, still_cfg, 1, H, W, codebook_seed)
    with torch.no_grad():
        image_emb = model.image_encoder(torch.from_numpy(still[0:1]))[0].numpy()
    text_emb = encode_caption(caption, codebook_seed, model.config.embed_dim)
    bundle = ConditionBundle(
        text_embedding=text_emb,
        image_embedding=image_emb,
        text_is_null=False,
        image_is_null=False,
    )

    def denoise_fn(x, t, cond):
        with torch.no_grad():
            return dn.denoise(model, x, t, cond)

    video_cfg = dataclasses.replace(cfg, seed=cfg.seed + ASSEMBLY_SEED_OFFSET)
    shape = (F, model.config.out_channels, H, W)
    video = diffusion.ddim_sample(denoise_fn, bundle, shape, sched, video_cfg)
    return np.clip(video.numpy(), -1.0, 1.0)
