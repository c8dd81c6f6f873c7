"""Factorized spatiotemporal v-prediction network.

Spatial blocks are plain 2-D residual convolutions shared across frames (frames
fold into the batch axis); temporal blocks are per-pixel temporal convolutions
plus one temporal self-attention layer at the bottleneck, all with zero-
initialized output projections so a fresh network is purely frame-wise.
Temporal blocks are skipped entirely for single-frame inputs, so images ride
the same weights as videos.

Checkpoints use a self-contained binary archive (see save_checkpoint) rather
than pickle, so they are readable from any language.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
import torch
from torch import nn

from .conditioning import CenterFrameEncoder, ConditionBundle
from . import diffusion


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 3  # video channels + structural-condition channels
    out_channels: int = 3
    base_width: int = 32
    depth: int = 2
    embed_dim: int = 64
    temporal_enabled: bool = True
    encoder_width: int = 16

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if self.in_channels < self.out_channels:
            raise ValueError("in_channels must cover at least the video channels")
        if self.base_width < 1 or self.depth < 1:
            raise ValueError("base_width and depth must be positive")

    @property
    def struct_channels(self) -> int:
        return self.in_channels - self.out_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


def _groups(ch: int) -> int:
    return 8 if ch % 8 == 0 else 1


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    )
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class ResBlock(nn.Module):
    """2D residual block with feature-wise affine conditioning: the embedding
    produces a per-channel (scale, shift) pair applied after the second norm.
    The multiplicative path lets the condition gate spatial features, which an
    additive bias alone cannot do."""

    def __init__(self, ch_in: int, ch_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch_in), ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * ch_out)
        self.norm2 = nn.GroupNorm(_groups(ch_out), ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        """x: (N, C, H, W); emb: (N, E) already expanded to the folded batch."""
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        scale, shift = self.emb_proj(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(torch.nn.functional.silu(h))
        return h + self.skip(x)


class TemporalConvBlock(nn.Module):
    """Per-pixel temporal convolution, residual, zero-initialized output."""

    def __init__(self, ch: int):
        super().__init__()
        self.conv_in = nn.Conv3d(ch, ch, (3, 1, 1), padding=(1, 0, 0))
        self.out_proj = nn.Conv3d(ch, ch, (3, 1, 1), padding=(1, 0, 0))

    def forward(self, x: torch.Tensor, F: int) -> torch.Tensor:
        """x: (B*F, C, H, W) folded; mixes only along the frame axis."""
        BF, C, H, W = x.shape
        B = BF // F
        h = x.reshape(B, F, C, H, W).permute(0, 2, 1, 3, 4)
        h = self.out_proj(torch.nn.functional.silu(self.conv_in(h)))
        h = h.permute(0, 2, 1, 3, 4).reshape(BF, C, H, W)
        return x + h


class TemporalAttention(nn.Module):
    """Single-head self-attention over the frame axis, per spatial location."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = nn.LayerNorm(ch)
        self.qkv = nn.Linear(ch, 3 * ch)
        self.out_proj = nn.Linear(ch, ch)

    def forward(self, x: torch.Tensor, F: int) -> torch.Tensor:
        BF, C, H, W = x.shape
        B = BF // F
        # tokens: one sequence of F frames per (batch, pixel)
        h = x.reshape(B, F, C, H, W).permute(0, 3, 4, 1, 2).reshape(B * H * W, F, C)
        q, k, v = self.qkv(self.norm(h)).chunk(3, dim=-1)
        att = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(C), dim=-1)
        h = self.out_proj(att @ v)
        h = h.reshape(B, H, W, F, C).permute(0, 3, 4, 1, 2).reshape(BF, C, H, W)
        return x + h


class Denoiser(nn.Module):
    """Maps (noised video, timestep, conditions) to a v prediction."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        self.init_seed: Optional[int] = None
        E = config.embed_dim
        chs = [config.base_width * 2**i for i in range(config.depth + 1)]

        self.time_mlp = nn.Sequential(nn.Linear(E, E), nn.SiLU(), nn.Linear(E, E))
        self.text_proj = nn.Linear(E, E)
        self.image_proj = nn.Linear(E, E)
        self.text_null = nn.Parameter(torch.zeros(E))
        self.image_null = nn.Parameter(torch.zeros(E))
        self.image_encoder = CenterFrameEncoder(
            config.out_channels, E, config.encoder_width
        )

        self.stem = nn.Conv2d(config.in_channels, chs[0], 3, padding=1)
        self.down_res = nn.ModuleList(
            [ResBlock(chs[i], chs[i], E) for i in range(config.depth)]
        )
        self.downsample = nn.ModuleList(
            [nn.Conv2d(chs[i], chs[i + 1], 3, stride=2, padding=1) for i in range(config.depth)]
        )
        self.mid_res1 = ResBlock(chs[-1], chs[-1], E)
        self.mid_res2 = ResBlock(chs[-1], chs[-1], E)
        self.upsample = nn.ModuleList(
            [nn.Conv2d(chs[i + 1], chs[i], 3, padding=1) for i in range(config.depth)]
        )
        self.up_res = nn.ModuleList(
            [ResBlock(2 * chs[i], chs[i], E) for i in range(config.depth)]
        )
        self.out_norm = nn.GroupNorm(_groups(chs[0]), chs[0])
        self.final_conv = nn.Conv2d(chs[0], config.out_channels, 3, padding=1)

        if config.temporal_enabled:
            self.temporal_down = nn.ModuleList(
                [TemporalConvBlock(chs[i]) for i in range(config.depth)]
            )
            self.temporal_mid = TemporalAttention(chs[-1])
            self.temporal_up = nn.ModuleList(
                [TemporalConvBlock(chs[i]) for i in range(config.depth)]
            )

    def _use_temporal(self, F: int) -> bool:
        return self.config.temporal_enabled and F > 1

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        text_emb: torch.Tensor,
        image_emb: torch.Tensor,
        struct: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """x: (B, F, C, H, W); t: (B,) int; embeddings: (B, E);
        struct: (B, F, S, H, W) or None (replaced by zero channels)."""
        B, F, C, H, W = x.shape
        cfg = self.config
        if H % 2**cfg.depth or W % 2**cfg.depth:
            raise ValueError(f"H and W must be divisible by {2**cfg.depth}, got {H}x{W}")
        S = cfg.struct_channels
        if S:
            if struct is None:
                struct = x.new_zeros(B, F, S, H, W)
            elif struct.shape != (B, F, S, H, W):
                raise ValueError(
                    f"structural maps shape {tuple(struct.shape)} != {(B, F, S, H, W)}"
                )
            x = torch.cat([x, struct], dim=2)
        elif struct is not None:
            raise ValueError("model was built without structural-condition channels")
        if text_emb.shape != (B, cfg.embed_dim) or image_emb.shape != (B, cfg.embed_dim):
            raise ValueError("condition embeddings must be (B, embed_dim)")

        temb = timestep_embedding(t, cfg.embed_dim).to(x.dtype)
        emb = self.time_mlp(temb) + self.text_proj(text_emb) + self.image_proj(image_emb)
        emb = emb.repeat_interleave(F, dim=0)  # (B*F, E)

        h = self.stem(x.reshape(B * F, cfg.in_channels, H, W))
        use_temporal = self._use_temporal(F)
        skips = []
        for i in range(cfg.depth):
            h = self.down_res[i](h, emb)
            if use_temporal:
                h = self.temporal_down[i](h, F)
            skips.append(h)
            h = self.downsample[i](h)
        h = self.mid_res1(h, emb)
        if use_temporal:
            h = self.temporal_mid(h, F)
        h = self.mid_res2(h, emb)
        for i in reversed(range(cfg.depth)):
            h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = self.upsample[i](h)
            h = self.up_res[i](torch.cat([h, skips[i]], dim=1), emb)
            if use_temporal:
                h = self.temporal_up[i](h, F)
        h = self.final_conv(torch.nn.functional.silu(self.out_norm(h)))
        return h.reshape(B, F, cfg.out_channels, H, W)


ZERO_INIT_MARKERS = ("out_proj", "final_conv")


def init_denoiser(config: DenoiserConfig, seed: int) -> Denoiser:
    """Build and deterministically initialize a denoiser.

    Weights get fan-in-scaled normal values drawn from a single seeded stream
    in parameter-registration order; biases are zero; temporal output
    projections and the final conv are zeroed so the fresh network is
    frame-wise with zero output.
    """
    model = Denoiser(config)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if any(m in name for m in ZERO_INIT_MARKERS):
                p.zero_()
            elif name.endswith(".bias") or p.ndim == 0:
                p.zero_()
            elif p.ndim == 1:
                # norm scales stay at 1; null tokens get a small random code
                if "null" in name:
                    p.copy_(torch.from_numpy(
                        rng.standard_normal(p.shape).astype(np.float32) * 0.5
                    ))
                elif "norm" in name:
                    p.fill_(1.0)
                else:
                    p.zero_()
            else:
                fan_in = int(np.prod(p.shape[1:]))
                w = rng.standard_normal(tuple(p.shape)) / math.sqrt(fan_in)
                p.copy_(torch.from_numpy(w.astype(np.float32)))
        # conditioning starts as pure shift: zero the scale half of each
        # affine projection so every block begins at identity gain
        for module in model.modules():
            if isinstance(module, ResBlock):
                half = module.emb_proj.out_features // 2
                module.emb_proj.weight[:half].zero_()
                module.emb_proj.bias[:half].zero_()
    model.init_seed = int(seed)
    return model


def resolve_embeddings(
    model: Denoiser, cond: ConditionBundle, batch: int = 1, dtype=torch.float32
):
    """Resolve the bundle's slots to (B, E) tensors, substituting the learned
    null tokens for null-flagged slots."""
    if cond.text_is_null:
        text = model.text_null[None].expand(batch, -1)
    else:
        text = torch.as_tensor(cond.text_embedding, dtype=dtype)[None].expand(batch, -1)
    if cond.image_is_null:
        image = model.image_null[None].expand(batch, -1)
    else:
        image = torch.as_tensor(cond.image_embedding, dtype=dtype)[None].expand(batch, -1)
    return text, image


def denoise(model: Denoiser, x_t: torch.Tensor, t: int, cond: ConditionBundle) -> torch.Tensor:
    """Single-video convenience wrapper: (F, C, H, W) -> (F, C, H, W)."""
    x_t = torch.as_tensor(x_t)
    text, image = resolve_embeddings(model, cond, batch=1, dtype=x_t.dtype)
    struct = None
    if cond.structural_maps is not None:
        struct = torch.as_tensor(cond.structural_maps, dtype=x_t.dtype)[None]
    t_tensor = torch.tensor([int(t)])
    return model(x_t[None], t_tensor, text, image, struct)[0]


def forward_with_loss(
    model: Denoiser,
    x0: torch.Tensor,
    cond: ConditionBundle,
    t: int,
    eps: torch.Tensor,
    sched: diffusion.NoiseSchedule,
    lam: float = 0.1,
    coherence_enabled: bool = True,
    coherence_space: str = "v",
):
    """End-to-end differentiable objective for one item.

    Returns (total, base, coherence) as torch scalars; the caller owns
    backward(). coherence_space selects whether frame differences are
    penalized on the raw v prediction or on the reconstructed clean frames.
    """
    x_t = diffusion.q_sample(x0, t, eps, sched)
    v_target = diffusion.v_from_x0_eps(x0, eps, t, sched)
    v_pred = denoise(model, x_t, t, cond)
    base = diffusion.base_loss(v_pred, v_target)
    if coherence_enabled and x0.shape[0] >= 2:
        if coherence_space == "v":
            coh = diffusion.coherence_loss(v_pred, v_target)
        elif coherence_space == "x0":
            x0_hat = diffusion.x0_from_v(x_t, v_pred, t, sched)
            coh = diffusion.coherence_loss(x0_hat, x0)
        else:
            raise ValueError(f"unknown coherence_space {coherence_space!r}")
    else:
        coh = base.new_zeros(())
    total = diffusion.total_loss(base, coh, lam)
    return total, base, coh


# --- checkpoint archive --------------------------------------------------------

CHECKPOINT_MAGIC = b"SDCKPT01"


def write_archive(path: str, meta: dict, arrays: dict[str, np.ndarray]):
    """Versioned binary archive: 8-byte magic, u64 little-endian JSON length,
    JSON metadata (including per-array name/dtype/shape/byte offsets), then the
    raw row-major array payloads in index order."""
    index = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        blob = arr.tobytes()
        index.append(
            {
                "name": name,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    payload = json.dumps({"meta": meta, "arrays": index}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def read_archive(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (length,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(length).decode("utf-8"))
        data = fh.read()
    arrays = {}
    for rec in header["arrays"]:
        raw = data[rec["offset"] : rec["offset"] + rec["nbytes"]]
        arrays[rec["name"]] = np.frombuffer(raw, dtype=rec["dtype"]).reshape(
            rec["shape"]
        ).copy()
    return header["meta"], arrays


def save_checkpoint(
    path: str,
    model: Denoiser,
    step: int,
    extra_arrays: Optional[dict[str, np.ndarray]] = None,
    extra_meta: Optional[dict] = None,
):
    meta = {
        "format_version": 1,
        "config": model.config.to_dict(),
        "init_seed": model.init_seed,
        "step": int(step),
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {
        f"model.{name}": p.detach().cpu().numpy()
        for name, p in model.named_parameters()
    }
    if extra_arrays:
        arrays.update(extra_arrays)
    write_archive(path, meta, arrays)


def load_checkpoint(path: str) -> tuple[Denoiser, int, dict, dict[str, np.ndarray]]:
    """Returns (model, step, meta, non-model arrays such as optimizer state)."""
    meta, arrays = read_archive(path)
    config = DenoiserConfig.from_dict(meta["config"])
    model = init_denoiser(config, meta["init_seed"] or 0)
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"model.{name}"
            if key not in arrays:
                raise ValueError(f"{path}: missing parameter {key}")
            p.copy_(torch.from_numpy(arrays[key]))
    model.init_seed = meta["init_seed"]
    extras = {k: v for k, v in arrays.items() if not k.startswith("model.")}
    return model, meta["step"], meta, extras
