"""Experiment driver: corpus generation, training, sampling, evaluation, and
report emission, all from a declarative YAML config with explicit seeds.

Every command is idempotent given identical inputs and seeds; outputs land
under the configured output directory, which is protected against concurrent
writers by a lock file.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import os
import sys

import click
import numpy as np

from . import data as data_mod
from . import denoiser as dn
from . import diffusion
from . import evaluation as ev
from . import report as report_mod
from . import sampling
from . import training as tr
from .conditioning import CaptionSpec
from .config import ConfigError, load_experiment_config

SAMPLES_MANIFEST_VERSION = 1


@contextlib.contextmanager
def _run_lock(out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    lock = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise click.ClickException(
            f"output directory {out_dir} is locked by another run ({lock})"
        )
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.unlink(lock)


def _load_config(config, seed, out):
    try:
        return load_experiment_config(config, seed_override=seed, out_override=out)
    except ConfigError as e:
        raise click.ClickException(f"config error: {e}")


def _corpus_dir(cfg, kind: str) -> str:
    return os.path.join(cfg.output_dir, "corpora", kind)


def _load_corpora(cfg) -> dict:
    wanted = {
        "image_text": cfg.corpus.n_image_text,
        "text_free_video": cfg.corpus.n_text_free,
        "video_text": cfg.corpus.n_video_text,
    }
    corpora = {}
    for kind, n in wanted.items():
        if n < 1:
            continue
        path = _corpus_dir(cfg, kind)
        try:
            corpora[kind] = data_mod.read_manifest(path)
        except data_mod.ManifestError as e:
            raise click.ClickException(
                f"missing or invalid corpus {kind!r} under {path} "
                f"(run gen-data first): {e}"
            )
    return corpora


@click.group()
def main():
    """Two-branch sprite-video diffusion experiments."""


_config_opt = click.option("--config", "config_path", required=True, type=click.Path())
_seed_opt = click.option("--seed", type=int, default=None, help="override the config seed")
_out_opt = click.option("--out", type=click.Path(), default=None, help="override the output directory")


@main.command("gen-data")
@_config_opt
@_seed_opt
@_out_opt
def cmd_gen_data(config_path, seed, out):
    """Generate the corpora named in the config, with manifests."""
    cfg = _load_config(config_path, seed, out)
    c = cfg.corpus
    with _run_lock(cfg.output_dir):
        plans = [
            ("image_text", c.n_image_text, lambda n: data_mod.make_image_text_pairs(n, c.seed, c.H, c.W)),
            ("text_free_video", c.n_text_free, lambda n: data_mod.make_text_free_videos(n, c.seed + 1, c.F, c.H, c.W, c.frame_rate)),
            ("video_text", c.n_video_text, lambda n: data_mod.make_video_text_pairs(n, c.seed + 2, c.F, c.H, c.W, c.frame_rate)),
        ]
        for kind, n, make in plans:
            if n < 1:
                continue
            corpus = make(n)
            data_mod.write_manifest(corpus, _corpus_dir(cfg, kind), with_conditions=c.with_conditions)
            click.echo(f"wrote {n} {kind} items to {_corpus_dir(cfg, kind)}")


@main.command("train")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--no-resume", is_flag=True, help="ignore existing checkpoints")
def cmd_train(config_path, seed, out, no_resume):
    """Train (or resume) from the config's corpora; writes checkpoints and a
    loss curve under <out>/train."""
    cfg = _load_config(config_path, seed, out)
    corpora = _load_corpora(cfg)
    train_dir = os.path.join(cfg.output_dir, "train")
    with _run_lock(cfg.output_dir):
        _, history = tr.train(cfg.train, cfg.model, corpora, train_dir, resume=not no_resume)
        report_mod.plot_loss_curves(
            [(cfg.label, [r.to_dict() for r in history])],
            os.path.join(train_dir, "loss_curve.png"),
        )
    ckpt = tr.latest_checkpoint(train_dir)
    click.echo(f"final checkpoint: {ckpt}")


def _prompts_for(cfg, corpora) -> list[tuple[CaptionSpec, int | None]]:
    """(caption, source corpus index) pairs; structural sampling draws its
    prompts and condition maps from text-free corpus items."""
    s = cfg.sample
    if s.use_structural:
        corpus = corpora["text_free_video"]
        n = min(s.n_prompts, len(corpus.items))
        return [(corpus.items[i].caption, i) for i in range(n)]
    if s.prompts:
        return [(CaptionSpec.from_dict(dict(p)), None) for p in s.prompts]
    rng = np.random.default_rng(s.seed)
    return [(data_mod.random_caption(rng), None) for _ in range(s.n_prompts)]


@main.command("sample")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--steps", type=int, default=None, help="override sampler step count")
@click.option("--grids", is_flag=True, help="also export per-video frame-strip images")
@click.option("--unconditional", is_flag=True, help="drop caption conditioning")
def cmd_sample(config_path, seed, out, checkpoint, steps, grids, unconditional):
    """Generate videos from caption prompts with a trained checkpoint."""
    cfg = _load_config(config_path, seed, out)
    model, _, meta, _ = dn.load_checkpoint(checkpoint)
    if model.config.to_dict() != cfg.model.to_dict():
        raise click.ClickException(
            f"checkpoint model config {model.config.to_dict()} does not match "
            f"the experiment's model section {cfg.model.to_dict()}"
        )
    tc = tr.TrainConfig.from_dict(meta["train_config"]) if "train_config" in meta else cfg.train
    sched = diffusion.make_linear_schedule(tc.T, tc.beta_start, tc.beta_end)
    corpora = _load_corpora(cfg) if cfg.sample.use_structural else {}
    prompts = _prompts_for(cfg, corpora)
    F = cfg.sample.F or cfg.corpus.F
    sample_dir = os.path.join(cfg.output_dir, "samples")
    with _run_lock(cfg.output_dir):
        os.makedirs(sample_dir, exist_ok=True)
        records = []
        for i, (caption, src) in enumerate(prompts):
            struct = None
            if src is not None:
                item = corpora["text_free_video"].items[src]
                struct = data_mod.structural_maps_for(item.video, item.sprite)[:F]
            scfg = cfg.sample.sampler(num_steps_override=steps, seed=cfg.sample.seed + i)
            assemble = (
                cfg.sample.assemble
                and not unconditional
                and caption is not None
                and struct is None
                and F > 1
            )
            if assemble:
                video = sampling.sample_video_assembled(
                    model,
                    sched,
                    caption,
                    scfg,
                    F,
                    cfg.corpus.H,
                    cfg.corpus.W,
                    codebook_seed=tc.codebook_seed,
                )
            else:
                video = sampling.sample_video(
                    model,
                    sched,
                    None if unconditional else caption,
                    scfg,
                    F,
                    cfg.corpus.H,
                    cfg.corpus.W,
                    codebook_seed=tc.codebook_seed,
                    structural_maps=struct,
                )
            rel = f"{i:05d}.vid"
            path = os.path.join(sample_dir, rel)
            data_mod.write_array_file(path, video, data_mod.VIDEO_MAGIC, cfg.corpus.frame_rate)
            if grids:
                report_mod.save_video_grid(video, os.path.join(sample_dir, f"{i:05d}.png"))
            records.append(
                {
                    "index": i,
                    "path": rel,
                    "sha256": hashlib.sha256(open(path, "rb").read()).hexdigest(),
                    "caption": caption.to_dict() if caption and not unconditional else None,
                    "source_index": src,
                }
            )
        header = {
            "version": SAMPLES_MANIFEST_VERSION,
            "count": len(records),
            "checkpoint": os.path.abspath(checkpoint),
            "unconditional": bool(unconditional),
            "assemble": bool(cfg.sample.assemble),
            "sampler": {
                "num_steps": steps or cfg.sample.num_steps,
                "eta": cfg.sample.eta,
                "guidance_scale": cfg.sample.guidance_scale,
                "seed": cfg.sample.seed,
            },
        }
        with open(os.path.join(sample_dir, "samples_manifest"), "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    click.echo(f"wrote {len(records)} videos to {sample_dir}")


def read_samples(sample_dir: str):
    """Load generated videos plus their manifest records."""
    manifest = os.path.join(sample_dir, "samples_manifest")
    if not os.path.exists(manifest):
        raise click.ClickException(f"no samples_manifest under {sample_dir}")
    with open(manifest) as fh:
        header = json.loads(fh.readline())
        records = [json.loads(ln) for ln in fh]
    videos = []
    for rec in records:
        arr, _ = data_mod.read_array_file(os.path.join(sample_dir, rec["path"]), data_mod.VIDEO_MAGIC)
        videos.append(arr)
    return header, records, videos


def evaluate_samples(
    videos,
    records,
    reference: data_mod.Corpus,
    metrics: tuple,
    embedder=None,
) -> ev.MetricsReport:
    """Compute the requested metrics for generated videos against a reference
    corpus; shared helper for the CLI and the acceptance suite."""
    rep = ev.MetricsReport()
    captions = [
        CaptionSpec.from_dict(r["caption"]) if r.get("caption") else None for r in records
    ]
    if "frame_consistency" in metrics and embedder is not None and videos[0].shape[0] >= 2:
        rep.frame_consistency = ev.frame_consistency(videos, embedder)
        rep.sample_counts["frame_consistency"] = len(videos)
    if "frechet_distance" in metrics and embedder is not None:
        ref_videos = [it.video.data for it in reference.items]
        rep.frechet_distance = ev.frechet_feature_distance(videos, ref_videos, embedder)
        rep.sample_counts["frechet_distance"] = len(videos)
    if "caption_accuracy" in metrics and any(c is not None for c in captions):
        pairs = [(v, c) for v, c in zip(videos, captions) if c is not None]
        acc, breakdown = ev.caption_accuracy([p[0] for p in pairs], [p[1] for p in pairs])
        rep.caption_accuracy = acc
        rep.caption_breakdown = breakdown
        rep.sample_counts["caption_accuracy"] = len(pairs)
    needs_struct = {"depth_error", "sketch_error", "epe"} & set(metrics)
    if needs_struct:
        depth_conds, sketch_conds, mv_conds, vids_with_src = [], [], [], []
        mv_caption_conds, vids_caption = [], []
        for v, rec in zip(videos, records):
            src = rec.get("source_index")
            if src is not None:
                item = reference.items[src]
                maps = data_mod.structural_maps_for(item.video, item.sprite)[: v.shape[0]]
                depth_conds.append(maps[:, 0:1])
                sketch_conds.append(maps[:, 1:2])
                mv_conds.append(maps[:, 2:4])
                vids_with_src.append(v)
            elif rec.get("caption") and v.shape[0] >= 2:
                cap = CaptionSpec.from_dict(rec["caption"])
                mag = data_mod.SPEED_PX[cap.speed]
                ang = data_mod.DIRECTION_ANGLES[cap.direction]
                vel = np.array([mag * np.cos(ang), -mag * np.sin(ang)], dtype=np.float32)
                maps = np.ones((v.shape[0], 2) + v.shape[-2:], dtype=np.float32)
                maps[:, 0] *= vel[0]
                maps[:, 1] *= vel[1]
                mv_caption_conds.append(maps)
                vids_caption.append(v)
        if vids_with_src:
            if "depth_error" in metrics:
                rep.depth_error = ev.depth_error(vids_with_src, depth_conds)
                rep.sample_counts["depth_error"] = len(vids_with_src)
            if "sketch_error" in metrics:
                rep.sketch_error = ev.sketch_error(vids_with_src, sketch_conds)
                rep.sample_counts["sketch_error"] = len(vids_with_src)
        if "epe" in metrics:
            vids = vids_with_src + vids_caption
            conds = mv_conds + mv_caption_conds
            if vids and vids[0].shape[0] >= 2:
                try:
                    rep.epe, rep.epe_excluded = ev.epe(vids, conds)
                    rep.sample_counts["epe"] = len(vids) - rep.epe_excluded
                except ValueError:
                    rep.epe, rep.epe_excluded = None, len(vids)
    return rep


@main.command("eval")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--generated", "generated_dir", required=True, type=click.Path(exists=True))
@click.option("--reference", "reference_dir", required=True, type=click.Path(exists=True))
@click.option("--embedder-checkpoint", type=click.Path(exists=True), default=None)
@click.option("--label", default=None)
def cmd_eval(config_path, seed, out, generated_dir, reference_dir, embedder_checkpoint, label):
    """Evaluate generated videos against a reference corpus; writes
    <out>/eval/metrics.json."""
    cfg = _load_config(config_path, seed, out)
    header, records, videos = read_samples(generated_dir)
    reference = data_mod.read_manifest(reference_dir)
    embedder = None
    ckpt = embedder_checkpoint or cfg.embedder_checkpoint or header.get("checkpoint")
    if ckpt and os.path.exists(ckpt):
        model, _, _, _ = dn.load_checkpoint(ckpt)
        embedder = ev.make_embedder(model.image_encoder)
    rep = evaluate_samples(videos, records, reference, cfg.eval_metrics, embedder)
    eval_dir = os.path.join(cfg.output_dir, "eval")
    os.makedirs(eval_dir, exist_ok=True)
    out_path = os.path.join(eval_dir, "metrics.json")
    rep.save(out_path, label=label or cfg.label)
    click.echo(out_path)
    click.echo(json.dumps(rep.to_dict(), indent=2, sort_keys=True))


@main.command("report")
@click.argument("metric_files", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--label", "labels", multiple=True, help="legend name per metrics file, in order")
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_report(metric_files, labels, out_dir):
    """Compare any number of metrics files: CSV table + one plot per metric."""
    reports = report_mod.load_reports(list(metric_files), list(labels))
    table, plots = report_mod.write_comparison(reports, out_dir)
    click.echo(table)
    for p in plots:
        click.echo(p)


if __name__ == "__main__":
    sys.exit(main())
