"""Core diffusion arithmetic: schedules, forward process, v-parameterization,
losses, and DDPM/DDIM reverse steps.

All functions here are pure: randomness enters only through explicit noise
arguments or seeds, so everything is safe to call concurrently.

Tensors follow the (F, C, H, W) video convention; an image is the F=1 case.
Operations are written against scalar per-timestep coefficients, so they work
identically on numpy arrays and torch tensors.

Note on the forward process: we use the standard DDPM transition
q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I). Some write-ups index
the mean coefficient as sqrt(1 - beta_{t-1}); that indexing breaks the
closed-form marginal and is treated here as a typo for sqrt(1 - beta_t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep diffusion constants, indexed t = 0 .. T-1."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    sqrt_alpha_bars: np.ndarray = field(init=False)
    sqrt_one_minus_alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "sqrt_alpha_bars", np.sqrt(alpha_bars))
        object.__setattr__(
            self, "sqrt_one_minus_alpha_bars", np.sqrt(1.0 - alpha_bars)
        )

    @property
    def T(self) -> int:
        return self.betas.size


def make_linear_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 2e-2
) -> NoiseSchedule:
    """Linear beta schedule, inclusive of both endpoints."""
    if T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(betas)


def _check_t(t: int, sched: NoiseSchedule) -> int:
    t = int(t)
    if not 0 <= t < sched.T:
        raise ValueError(f"timestep {t} out of range [0, {sched.T})")
    return t


def _check_same_shape(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Closed-form forward marginal: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    t = _check_t(t, sched)
    _check_same_shape(x0, eps, "q_sample")
    return sched.sqrt_alpha_bars[t] * x0 + sched.sqrt_one_minus_alpha_bars[t] * eps


def v_from_x0_eps(x0, eps, t: int, sched: NoiseSchedule):
    """v = sqrt(abar_t) eps - sqrt(1-abar_t) x0."""
    t = _check_t(t, sched)
    _check_same_shape(x0, eps, "v_from_x0_eps")
    return sched.sqrt_alpha_bars[t] * eps - sched.sqrt_one_minus_alpha_bars[t] * x0


def x0_from_v(x_t, v, t: int, sched: NoiseSchedule):
    """Invert the v parameterization for the clean signal given x_t."""
    t = _check_t(t, sched)
    _check_same_shape(x_t, v, "x0_from_v")
    return sched.sqrt_alpha_bars[t] * x_t - sched.sqrt_one_minus_alpha_bars[t] * v


def eps_from_v(x_t, v, t: int, sched: NoiseSchedule):
    """Invert the v parameterization for the noise given x_t."""
    t = _check_t(t, sched)
    _check_same_shape(x_t, v, "eps_from_v")
    return sched.sqrt_one_minus_alpha_bars[t] * x_t + sched.sqrt_alpha_bars[t] * v


def base_loss(v_pred, v_target):
    """Mean squared error over every element (all frames and pixels)."""
    _check_same_shape(v_pred, v_target, "base_loss")
    d = v_pred - v_target
    return (d * d).mean()


def coherence_loss(v_pred_frames, v_target_frames):
    """Penalty on the mismatch between predicted and target adjacent-frame
    differences, along the leading frame axis.

    Normalized by the element count of the (F-1)-frame difference stack so the
    balance weight is resolution independent. F=1 inputs return 0 (images have
    no frame differences).
    """
    _check_same_shape(v_pred_frames, v_target_frames, "coherence_loss")
    F = v_pred_frames.shape[0]
    if F < 2:
        return (v_pred_frames * 0.0).sum()  # keeps autograd graph intact
    dp = v_pred_frames[1:] - v_pred_frames[:-1]
    dt = v_target_frames[1:] - v_target_frames[:-1]
    d = dp - dt
    return (d * d).mean()


def total_loss(base, coherence, lam: float = 0.1):
    """Weighted objective: base + lam * coherence."""
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    return base + lam * coherence


def cfg_combine(v_uncond, v_cond, w: float):
    """Classifier-free guidance: v_uncond + w * (v_cond - v_uncond)."""
    _check_same_shape(v_uncond, v_cond, "cfg_combine")
    return v_uncond + w * (v_cond - v_uncond)


def ddpm_step(x_t, v_pred, t: int, sched: NoiseSchedule, noise):
    """One ancestral reverse step x_t -> x_{t-1}.

    The v prediction is converted to an x0 estimate, the standard posterior
    mean is formed, and posterior-variance noise is added for t > 0. The
    reverse variance is fixed to beta_t * (1 - abar_{t-1}) / (1 - abar_t),
    not learned.
    """
    t = _check_t(t, sched)
    _check_same_shape(x_t, noise, "ddpm_step")
    x0_hat = x0_from_v(x_t, v_pred, t, sched)
    abar_t = sched.alpha_bars[t]
    abar_prev = sched.alpha_bars[t - 1] if t > 0 else 1.0
    beta_t = sched.betas[t]
    alpha_t = sched.alphas[t]
    coef_x0 = math.sqrt(abar_prev) * beta_t / (1.0 - abar_t)
    coef_xt = math.sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t)
    mean = coef_x0 * x0_hat + coef_xt * x_t
    if t == 0:
        return mean
    var = beta_t * (1.0 - abar_prev) / (1.0 - abar_t)
    return mean + math.sqrt(var) * noise


def ddim_step(
    x_t,
    v_pred,
    t: int,
    t_prev: Optional[int],
    sched: NoiseSchedule,
    eta: float,
    noise,
):
    """One DDIM update from timestep t to t_prev.

    t_prev is None for the terminal update, which targets abar = 1 and returns
    the clean-signal estimate. eta = 0 is fully deterministic; eta = 1 with a
    dense timestep sequence reproduces the ancestral (DDPM) transition.
    """
    t = _check_t(t, sched)
    _check_same_shape(x_t, v_pred, "ddim_step")
    abar_t = sched.alpha_bars[t]
    if t_prev is None:
        abar_prev = 1.0
    else:
        t_prev = _check_t(t_prev, sched)
        if t_prev >= t:
            raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
        abar_prev = sched.alpha_bars[t_prev]
    x0_hat = x0_from_v(x_t, v_pred, t, sched)
    eps_hat = eps_from_v(x_t, v_pred, t, sched)
    sigma = (
        eta
        * math.sqrt((1.0 - abar_prev) / (1.0 - abar_t))
        * math.sqrt(max(0.0, 1.0 - abar_t / abar_prev))
    )
    dir_coef = math.sqrt(max(0.0, 1.0 - abar_prev - sigma * sigma))
    out = math.sqrt(abar_prev) * x0_hat + dir_coef * eps_hat
    if sigma > 0.0:
        _check_same_shape(x_t, noise, "ddim_step noise")
        out = out + sigma * noise
    return out


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    eta: float = 0.0
    guidance_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.guidance_scale < 0.0:
            raise ValueError(f"guidance_scale must be >= 0, got {self.guidance_scale}")


def ddim_timesteps(T: int, num_steps: int) -> list[int]:
    """Strictly decreasing timestep subsequence from T-1 to 0, uniform stride,
    inclusive of both ends."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if num_steps > T:
        raise ValueError(f"num_steps ({num_steps}) exceeds T ({T})")
    if num_steps == 1:
        return [T - 1]
    ts = np.unique(np.round(np.linspace(0, T - 1, num_steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def ddim_sample(
    denoise_fn: Callable,
    cond,
    shape: Sequence[int],
    sched: NoiseSchedule,
    cfg: SamplerConfig,
) -> torch.Tensor:
    """Run the full DDIM reverse chain from seeded Gaussian noise.

    denoise_fn(x, t, cond) must return the v prediction for x at timestep t.
    When cfg.guidance_scale != 1 the unconditional branch is obtained by
    calling denoise_fn with cond.unconditional() and combined per cfg_combine.
    Deterministic given (cfg.seed, cfg.eta).
    """
    ts = ddim_timesteps(sched.T, cfg.num_steps)
    rng = np.random.default_rng(cfg.seed)
    x = torch.from_numpy(rng.standard_normal(tuple(shape)).astype(np.float32))
    uncond = cond.unconditional() if cfg.guidance_scale != 1.0 else None
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else None
        v = denoise_fn(x, t, cond)
        if uncond is not None:
            v_u = denoise_fn(x, t, uncond)
            v = cfg_combine(v_u, v, cfg.guidance_scale)
        if cfg.eta > 0.0:
            noise = torch.from_numpy(
                rng.standard_normal(tuple(shape)).astype(np.float32)
            )
        else:
            noise = x  # unused when sigma == 0
        x = ddim_step(x, v, t, t_prev, sched, cfg.eta, noise)
    return x
