"""Two-branch joint training loop.

Batches interleave a content branch (captioned stills entering as single-frame
videos) with a motion branch (caption-free videos conditioned on a clean
center-frame embedding); the semi- and fully-supervised regimes add captioned
videos that alternate between text-conditioned and image-conditioned
objectives. Everything is deterministic: step k's batch and noise are derived
from (config.seed, k), so interrupted runs resume bit-identically.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch

from . import data as data_mod
from . import denoiser as dn
from . import diffusion
from .conditioning import ConditionBundle, drop_conditions, encode_caption

REGIMES = ("text_free", "semi_supervised", "fully_supervised")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    lam: float = 0.1
    batch_size: int = 8
    image_batch_fraction: float = 0.5
    p_drop_text: float = 0.1
    p_drop_image: float = 0.1
    p_drop_struct: float = 0.5
    total_steps: int = 1000
    seed: int = 0
    codebook_seed: int = 0
    regime: str = "text_free"
    coherence_enabled: bool = True
    coherence_space: str = "v"
    joint: bool = True
    grad_clip: float = 1.0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("image_batch_fraction", "p_drop_text", "p_drop_image", "p_drop_struct"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class BatchItem:
    x0: torch.Tensor  # (F, C, H, W)
    center_frame: torch.Tensor  # (C, H, W), clean
    caption_embedding: Optional[np.ndarray]
    t: int
    eps: torch.Tensor
    branch: str  # content | motion | paired_text_video
    struct: Optional[torch.Tensor]  # (F, S, H, W) or None
    text_is_null: bool
    image_is_null: bool


@dataclass(frozen=True)
class LossReport:
    step: int
    base: float
    coherence: float
    total: float
    branch_means: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "base": self.base,
            "coherence": self.coherence,
            "total": self.total,
            "branch_means": self.branch_means,
        }


def _required_corpora(regime: str) -> tuple[str, ...]:
    if regime == "text_free":
        return ("image_text", "text_free_video")
    if regime == "semi_supervised":
        return ("image_text", "text_free_video", "video_text")
    return ("image_text", "video_text")


def make_train_batch(
    corpora: dict,
    config: TrainConfig,
    rng: np.random.Generator,
    embed_dim: int,
    struct_channels: int = 0,
    struct_cache: Optional[dict] = None,
    image_batch_fraction: Optional[float] = None,
) -> list[BatchItem]:
    """Assemble one mixed batch. Timesteps are uniform on [0, T); noise is
    standard normal; condition dropout is applied here so the optimizer step
    itself is dropout-free."""
    for kind in _required_corpora(config.regime):
        if kind not in corpora:
            raise ValueError(f"regime {config.regime!r} requires a {kind!r} corpus")
    frac = config.image_batch_fraction if image_batch_fraction is None else image_batch_fraction
    items = []
    for _ in range(config.batch_size):
        if rng.random() < frac:
            branch = "content"
            corpus = corpora["image_text"]
        elif config.regime == "text_free":
            branch = "motion"
            corpus = corpora["text_free_video"]
        elif config.regime == "fully_supervised":
            branch = "paired_text_video"
            corpus = corpora["video_text"]
        else:  # semi_supervised: split the video half between the two sources
            if rng.random() < 0.5:
                branch = "motion"
                corpus = corpora["text_free_video"]
            else:
                branch = "paired_text_video"
                corpus = corpora["video_text"]
        idx = int(rng.integers(len(corpus.items)))
        item = corpus.items[idx]
        x0 = torch.from_numpy(item.video.data.astype(np.float32))
        F = x0.shape[0]
        center = x0[F // 2]

        caption_emb = None
        text_is_null = True
        image_is_null = True
        if branch == "content":
            assert item.caption_available and item.caption is not None
            caption_emb = encode_caption(item.caption, config.codebook_seed, embed_dim)
            text_is_null = False
            image_is_null = False
        elif branch == "motion":
            # caption stays sealed off from training in the text-free regime
            image_is_null = False
        else:  # paired: alternate text-to-video and image-to-video objectives
            if rng.random() < 0.5:
                caption_emb = encode_caption(item.caption, config.codebook_seed, embed_dim)
                text_is_null = False
            else:
                image_is_null = False

        bundle = ConditionBundle(
            text_embedding=caption_emb,
            image_embedding=np.zeros(embed_dim, dtype=np.float32) if not image_is_null else None,
            text_is_null=text_is_null,
            image_is_null=image_is_null,
        )
        bundle = drop_conditions(bundle, config.p_drop_text, config.p_drop_image, rng)

        struct = None
        if struct_channels > 0 and rng.random() >= config.p_drop_struct:
            key = (corpus.kind, idx)
            if struct_cache is not None and key in struct_cache:
                maps = struct_cache[key]
            else:
                maps = data_mod.structural_maps_for(item.video, item.sprite)
                if struct_cache is not None:
                    struct_cache[key] = maps
            struct = torch.from_numpy(maps[:, :struct_channels])

        t = int(rng.integers(config.T))
        eps = torch.from_numpy(
            rng.standard_normal(tuple(x0.shape)).astype(np.float32)
        )
        items.append(
            BatchItem(
                x0=x0,
                center_frame=center,
                caption_embedding=caption_emb,
                t=t,
                eps=eps,
                branch=branch,
                struct=struct,
                text_is_null=bundle.text_is_null,
                image_is_null=bundle.image_is_null,
            )
        )
    return items


def _group_losses(model: dn.Denoiser, group: list[BatchItem], sched, config: TrainConfig):
    """Single batched forward for items sharing a frame count; returns
    per-item (total, base, coherence) scalars."""
    B = len(group)
    F = group[0].x0.shape[0]
    dtype = group[0].x0.dtype
    x_t = torch.stack(
        [diffusion.q_sample(it.x0, it.t, it.eps, sched).to(dtype) for it in group]
    )
    v_target = torch.stack(
        [diffusion.v_from_x0_eps(it.x0, it.eps, it.t, sched).to(dtype) for it in group]
    )
    t = torch.tensor([it.t for it in group])

    text_rows = []
    for it in group:
        if it.text_is_null or it.caption_embedding is None:
            text_rows.append(model.text_null)
        else:
            text_rows.append(torch.from_numpy(it.caption_embedding).to(dtype))
    text_emb = torch.stack(text_rows)
    live = [i for i, it in enumerate(group) if not it.image_is_null]
    image_emb = model.image_null[None].expand(B, -1).clone()
    if live:
        frames = torch.stack([group[i].center_frame for i in live])
        image_emb = image_emb.index_copy(
            0, torch.tensor(live), model.image_encoder(frames)
        )

    struct = None
    S = model.config.struct_channels
    if S and any(it.struct is not None for it in group):
        struct = torch.zeros((B, F, S) + tuple(group[0].x0.shape[-2:]), dtype=dtype)
        for i, it in enumerate(group):
            if it.struct is not None:
                struct[i] = it.struct.to(dtype)

    v_pred = model(x_t, t, text_emb, image_emb, struct)
    out = []
    for i, it in enumerate(group):
        base = diffusion.base_loss(v_pred[i], v_target[i])
        if config.coherence_enabled and F >= 2:
            if config.coherence_space == "v":
                coh = diffusion.coherence_loss(v_pred[i], v_target[i])
            else:
                x0_hat = diffusion.x0_from_v(x_t[i], v_pred[i], it.t, sched)
                coh = diffusion.coherence_loss(x0_hat, it.x0.to(dtype))
        else:
            coh = base.new_zeros(())
        out.append((diffusion.total_loss(base, coh, config.lam), base, coh))
    return out


def batch_loss(model: dn.Denoiser, batch: list[BatchItem], sched, config: TrainConfig):
    """Mean total loss over the batch plus component means and per-branch means.

    Items are grouped by frame count so each group runs as one batched forward;
    the result is identical to a per-item evaluation."""
    groups: dict[int, list] = {}
    for item in batch:
        groups.setdefault(item.x0.shape[0], []).append(item)
    totals, bases, cohs = [], [], []
    branch_sums: dict[str, list] = {}
    for group in groups.values():
        for item, (total, base, coh) in zip(group, _group_losses(model, group, sched, config)):
            totals.append(total)
            bases.append(base)
            cohs.append(coh)
            branch_sums.setdefault(item.branch, []).append(float(total.detach()))
    loss = torch.stack(totals).mean()
    base_mean = float(torch.stack(bases).detach().mean())
    coh_mean = float(torch.stack(cohs).detach().mean())
    branch_means = {k: float(np.mean(v)) for k, v in branch_sums.items()}
    return loss, base_mean, coh_mean, branch_means


def train_step(
    model: dn.Denoiser,
    optimizer: torch.optim.Optimizer,
    batch: list[BatchItem],
    sched: diffusion.NoiseSchedule,
    config: TrainConfig,
    step: int = 0,
) -> LossReport:
    """One optimizer update on the mean total loss over the batch."""
    optimizer.zero_grad(set_to_none=True)
    loss, base_mean, coh_mean, branch_means = batch_loss(model, batch, sched, config)
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss at step {step}: branches {sorted(branch_means)} "
            f"(per-branch means {branch_means})"
        )
    loss.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(
            [p for p in model.parameters() if p.requires_grad], config.grad_clip
        )
    optimizer.step()
    # recompute total from the component means so the decomposition identity
    # holds exactly in the report
    total = base_mean + config.lam * coh_mean
    return LossReport(step, base_mean, coh_mean, total, branch_means)


def _make_optimizer(model: dn.Denoiser, config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(
        params,
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )


def _optimizer_arrays(model: dn.Denoiser, optimizer) -> dict[str, np.ndarray]:
    arrays = {}
    state_by_param = optimizer.state
    for name, p in model.named_parameters():
        st = state_by_param.get(p)
        if not st:
            continue
        arrays[f"opt.{name}.exp_avg"] = st["exp_avg"].detach().cpu().numpy()
        arrays[f"opt.{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
        arrays[f"opt.{name}.step"] = np.array([float(st["step"])], dtype=np.float64)
    return arrays


def _restore_optimizer(model: dn.Denoiser, optimizer, arrays: dict[str, np.ndarray]):
    for name, p in model.named_parameters():
        key = f"opt.{name}.exp_avg"
        if key not in arrays or not p.requires_grad:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(arrays[f"opt.{name}.step"][0])),
            "exp_avg": torch.from_numpy(arrays[key].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"opt.{name}.step".replace(".step", ".exp_avg_sq")].copy()),
        }


def _freeze_spatial(model: dn.Denoiser):
    """Stage two of separate training: only temporal blocks keep training."""
    for name, p in model.named_parameters():
        p.requires_grad = "temporal" in name


def _stage_for_step(config: TrainConfig, step: int) -> int:
    if config.joint:
        return 0
    return 1 if step < config.total_steps // 2 else 2


def _checkpoint_path(out_dir: str, step: int) -> str:
    return os.path.join(out_dir, "checkpoints", f"step_{step:07d}.ckpt")


def latest_checkpoint(out_dir: str) -> Optional[str]:
    ck_dir = os.path.join(out_dir, "checkpoints")
    if not os.path.isdir(ck_dir):
        return None
    names = sorted(n for n in os.listdir(ck_dir) if n.endswith(".ckpt"))
    return os.path.join(ck_dir, names[-1]) if names else None


def _save(out_dir: str, model, optimizer, step: int, config: TrainConfig):
    path = _checkpoint_path(out_dir, step)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    tmp = path + ".tmp"
    dn.save_checkpoint(
        tmp,
        model,
        step,
        extra_arrays=_optimizer_arrays(model, optimizer),
        extra_meta={"train_config": config.to_dict()},
    )
    os.replace(tmp, path)  # atomic publish
    return path


def train(
    config: TrainConfig,
    model_config: dn.DenoiserConfig,
    corpora: dict,
    out_dir: str,
    resume: bool = True,
) -> tuple[dn.Denoiser, list[LossReport]]:
    """Run (or resume) the full loop; returns the final model and the loss
    history of the steps executed in this call.

    Checkpoints land under out_dir/checkpoints at the configured cadence and
    are written atomically; the loss curve is appended to
    out_dir/loss_curve.jsonl as one record per step.
    """
    os.makedirs(out_dir, exist_ok=True)
    sched = diffusion.make_linear_schedule(config.T, config.beta_start, config.beta_end)
    start = 0
    model = dn.init_denoiser(model_config, config.seed)
    optimizer = _make_optimizer(model, config)
    ckpt = latest_checkpoint(out_dir) if resume else None
    if ckpt is not None:
        model, start, meta, extras = dn.load_checkpoint(ckpt)
        if _stage_for_step(config, start) == 2:
            _freeze_spatial(model)
        optimizer = _make_optimizer(model, config)
        _restore_optimizer(model, optimizer, extras)
    elif not config.joint:
        pass  # stage 1 trains everything on content batches; nothing to freeze yet

    curve_path = os.path.join(out_dir, "loss_curve.jsonl")
    if start == 0 and os.path.exists(curve_path):
        os.remove(curve_path)
    elif start > 0 and os.path.exists(curve_path):
        # drop any records at or past the resume point (partial previous run)
        with open(curve_path) as fh:
            lines = [ln for ln in fh if json.loads(ln)["step"] < start]
        with open(curve_path, "w") as fh:
            fh.writelines(lines)

    struct_cache: dict = {}
    history = []
    stage = _stage_for_step(config, start)
    with open(curve_path, "a") as curve:
        for step in range(start, config.total_steps):
            new_stage = _stage_for_step(config, step)
            if new_stage == 2 and stage != 2:
                _freeze_spatial(model)
                optimizer = _make_optimizer(model, config)
            stage = new_stage
            frac = None
            if stage == 1:
                frac = 1.0  # spatial stage: content batches only
            elif stage == 2:
                frac = 0.0  # temporal stage: video batches only
            rng = np.random.default_rng([config.seed, step])
            batch = make_train_batch(
                corpora,
                config,
                rng,
                embed_dim=model_config.embed_dim,
                struct_channels=model_config.struct_channels,
                struct_cache=struct_cache,
                image_batch_fraction=frac,
            )
            report = train_step(model, optimizer, batch, sched, config, step)
            history.append(report)
            curve.write(json.dumps(report.to_dict()) + "\n")
            done = step + 1
            if done % config.checkpoint_every == 0 or done == config.total_steps:
                curve.flush()
                _save(out_dir, model, optimizer, done, config)
    return model, history


def grad_check(
    model: dn.Denoiser,
    batch: list[BatchItem],
    sched: diffusion.NoiseSchedule,
    config: TrainConfig,
    epsilon: float = 1e-5,
    entries_per_param: int = 2,
    rng_seed: int = 0,
) -> float:
    """Max relative error between analytic gradients of the mean total loss
    and central finite differences, over a random subsample of entries of
    every parameter tensor. Runs in float64."""
    model = model.double()
    batch = [
        BatchItem(
            x0=it.x0.double(),
            center_frame=it.center_frame.double(),
            caption_embedding=None
            if it.caption_embedding is None
            else it.caption_embedding.astype(np.float64),
            t=it.t,
            eps=it.eps.double(),
            branch=it.branch,
            struct=None if it.struct is None else it.struct.double(),
            text_is_null=it.text_is_null,
            image_is_null=it.image_is_null,
        )
        for it in batch
    ]

    loss, *_ = batch_loss(model, batch, sched, config)
    model.zero_grad(set_to_none=True)
    loss.backward()

    def eval_loss() -> float:
        with torch.no_grad():
            l, *_ = batch_loss(model, batch, sched, config)
        return float(l)

    rng = np.random.default_rng(rng_seed)
    worst = 0.0
    for name, p in model.named_parameters():
        grad = p.grad
        analytic = (grad if grad is not None else torch.zeros_like(p)).reshape(-1)
        flat = p.data.reshape(-1)
        n = flat.numel()
        for idx in rng.choice(n, size=min(entries_per_param, n), replace=False):
            idx = int(idx)
            orig = float(flat[idx])
            flat[idx] = orig + epsilon
            lp = eval_loss()
            flat[idx] = orig - epsilon
            lm = eval_loss()
            flat[idx] = orig
            fd = (lp - lm) / (2 * epsilon)
            an = float(analytic[idx])
            scale = max(abs(fd), abs(an))
            err = abs(fd - an) if scale < 1e-8 else abs(fd - an) / scale
            worst = max(worst, err)
    return worst
