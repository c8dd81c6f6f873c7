"""Declarative experiment configuration (YAML) with field-path validation."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Optional

import yaml

from .denoiser import DenoiserConfig
from .diffusion import SamplerConfig
from .training import TrainConfig

OUTPUT_ROOT_ENV = "SPRITEDIFFUSION_OUT"

EVAL_METRICS = (
    "frame_consistency",
    "frechet_distance",
    "caption_accuracy",
    "depth_error",
    "sketch_error",
    "epe",
)


class ConfigError(Exception):
    pass


def _get(d: dict, path: str, default=None, required=False):
    cur: Any = d
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            if required:
                raise ConfigError(f"{path}: missing required field")
            return default
        cur = cur[part]
    return cur


def _typed(d: dict, path: str, typ, default=None, required=False):
    v = _get(d, path, default, required)
    if v is None:
        return v
    if typ is float and isinstance(v, int):
        v = float(v)
    if typ is not None and not isinstance(v, typ):
        raise ConfigError(f"{path}: expected {typ.__name__}, got {type(v).__name__} ({v!r})")
    return v


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 1
    F: int = 16
    H: int = 32
    W: int = 32
    frame_rate: float = 4.0
    n_image_text: int = 256
    n_text_free: int = 128
    n_video_text: int = 0
    with_conditions: bool = False


@dataclass(frozen=True)
class SampleConfig:
    num_steps: int = 50
    eta: float = 0.0
    guidance_scale: float = 3.0
    seed: int = 0
    n_prompts: int = 16
    prompts: Optional[tuple] = None  # explicit CaptionSpec dicts; overrides n_prompts
    use_structural: bool = False
    F: Optional[int] = None  # default: corpus F
    assemble: bool = False  # two-stage text-to-video (still first, then video)

    def sampler(self, num_steps_override: Optional[int] = None, seed: Optional[int] = None) -> SamplerConfig:
        return SamplerConfig(
            num_steps=num_steps_override or self.num_steps,
            eta=self.eta,
            guidance_scale=self.guidance_scale,
            seed=self.seed if seed is None else seed,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    output_dir: str
    seed: int
    corpus: CorpusConfig
    model: DenoiserConfig
    train: TrainConfig
    sample: SampleConfig
    eval_metrics: tuple = EVAL_METRICS
    embedder_checkpoint: Optional[str] = None
    label: str = "run"


def _build_dataclass(cls, d: dict, path: str):
    import dataclasses

    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for k, v in d.items():
        if k not in names:
            raise ConfigError(f"{path}.{k}: unknown field")
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def load_experiment_config(
    path: str,
    seed_override: Optional[int] = None,
    out_override: Optional[str] = None,
) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError("top level of the config must be a mapping")

    seed = seed_override if seed_override is not None else _typed(raw, "seed", int, 0)
    out = out_override or _typed(raw, "output_dir", str)
    if out is None:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        out = os.path.join(root, os.path.splitext(os.path.basename(path))[0])

    corpus = _build_dataclass(CorpusConfig, raw.get("corpus", {}) or {}, "corpus")
    model_raw = dict(raw.get("model", {}) or {})
    structural = bool(model_raw.pop("structural_conditioning", False))
    if "in_channels" not in model_raw:
        model_raw["in_channels"] = 3 + (4 if structural else 0)
    model = _build_dataclass(DenoiserConfig, model_raw, "model")

    train_raw = dict(raw.get("train", {}) or {})
    train_raw.setdefault("seed", seed)
    train = _build_dataclass(TrainConfig, train_raw, "train")
    if train.regime == "semi_supervised" and corpus.n_video_text < 1:
        raise ConfigError("corpus.n_video_text: semi_supervised regime needs a video_text corpus")
    if train.regime == "fully_supervised" and corpus.n_video_text < 1:
        raise ConfigError("corpus.n_video_text: fully_supervised regime needs a video_text corpus")

    sample = _build_dataclass(SampleConfig, raw.get("sample", {}) or {}, "sample")
    if sample.use_structural and model.struct_channels == 0:
        raise ConfigError("sample.use_structural: model has no structural-condition channels")

    metrics = raw.get("eval", {}).get("metrics") if isinstance(raw.get("eval"), dict) else None
    if metrics is None:
        metrics = list(EVAL_METRICS)
    for m in metrics:
        if m not in EVAL_METRICS:
            raise ConfigError(f"eval.metrics: unknown metric {m!r}")
    embedder_ckpt = _typed(raw, "eval.embedder_checkpoint", str)

    return ExperimentConfig(
        output_dir=out,
        seed=seed,
        corpus=corpus,
        model=model,
        train=train,
        sample=sample,
        eval_metrics=tuple(metrics),
        embedder_checkpoint=embedder_ckpt,
        label=_typed(raw, "label", str, os.path.splitext(os.path.basename(path))[0]),
    )
