import csv
import hashlib
import json
import os

import numpy as np
import pytest
import torch
import yaml
from click.testing import CliRunner

from spritediffusion import cli
from spritediffusion import data as D
from spritediffusion import denoiser as dn
from spritediffusion import diffusion as df
from spritediffusion import report as report_mod
from spritediffusion import sampling
from spritediffusion.conditioning import CaptionSpec
from spritediffusion.evaluation import MetricsReport

torch.set_num_threads(1)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny end-to-end pipeline shared by the CLI tests: gen-data, train,
    sample, eval."""
    root = tmp_path_factory.mktemp("cliws")
    out = str(root / "run")
    cfg_path = str(root / "exp.yaml")
    body = {
        "seed": 0,
        "output_dir": out,
        "corpus": {"F": 4, "H": 16, "W": 16, "n_image_text": 8, "n_text_free": 4},
        "model": {"base_width": 8, "depth": 2, "embed_dim": 32, "encoder_width": 8},
        "train": {"total_steps": 3, "batch_size": 2, "T": 50, "checkpoint_every": 3,
                  "learning_rate": 1e-3},
        "sample": {"num_steps": 3, "n_prompts": 2, "guidance_scale": 1.0},
    }
    with open(cfg_path, "w") as fh:
        yaml.safe_dump(body, fh)
    runner = CliRunner()
    for args in (
        ["gen-data", "--config", cfg_path],
        ["train", "--config", cfg_path],
    ):
        res = runner.invoke(cli.main, args, catch_exceptions=False)
        assert res.exit_code == 0, res.output
    ckpt = os.path.join(out, "train", "checkpoints", "step_0000003.ckpt")
    res = runner.invoke(
        cli.main, ["sample", "--config", cfg_path, "--checkpoint", ckpt],
        catch_exceptions=False,
    )
    assert res.exit_code == 0, res.output
    res = runner.invoke(
        cli.main,
        ["eval", "--config", cfg_path,
         "--generated", os.path.join(out, "samples"),
         "--reference", os.path.join(out, "corpora", "text_free_video"),
         "--embedder-checkpoint", ckpt],
        catch_exceptions=False,
    )
    assert res.exit_code == 0, res.output
    return {"root": root, "out": out, "cfg": cfg_path, "ckpt": ckpt, "runner": runner}


class TestGenData:
    def test_corpora_on_disk(self, workspace):
        for kind, n in (("image_text", 8), ("text_free_video", 4)):
            d = os.path.join(workspace["out"], "corpora", kind)
            corpus = D.read_manifest(d)
            assert len(corpus.items) == n
        assert not os.path.isdir(os.path.join(workspace["out"], "corpora", "video_text"))

    def test_regen_is_bit_identical(self, workspace, tmp_path):
        runner = workspace["runner"]
        res = runner.invoke(
            cli.main,
            ["gen-data", "--config", workspace["cfg"], "--out", str(tmp_path / "again")],
            catch_exceptions=False,
        )
        assert res.exit_code == 0
        for kind in ("image_text", "text_free_video"):
            a = os.path.join(workspace["out"], "corpora", kind, "manifest")
            b = os.path.join(tmp_path / "again", "corpora", kind, "manifest")
            assert open(a).read() == open(b).read()  # includes per-item checksums


class TestTrain:
    def test_outputs(self, workspace):
        train_dir = os.path.join(workspace["out"], "train")
        assert os.path.exists(workspace["ckpt"])
        assert os.path.exists(os.path.join(train_dir, "loss_curve.png"))
        with open(os.path.join(train_dir, "loss_curve.jsonl")) as fh:
            assert [json.loads(ln)["step"] for ln in fh] == [0, 1, 2]

    def test_missing_corpus_message(self, workspace, tmp_path):
        res = workspace["runner"].invoke(
            cli.main,
            ["train", "--config", workspace["cfg"], "--out", str(tmp_path / "empty")],
        )
        assert res.exit_code != 0
        assert "gen-data" in res.output


class TestSample:
    def test_manifest_and_videos(self, workspace):
        sample_dir = os.path.join(workspace["out"], "samples")
        header, records, videos = cli.read_samples(sample_dir)
        assert header["count"] == 2 and len(videos) == 2
        for rec, v in zip(records, videos):
            assert v.shape == (4, 3, 16, 16)
            assert v.min() >= -1.0 and v.max() <= 1.0
            raw = open(os.path.join(sample_dir, rec["path"]), "rb").read()
            assert hashlib.sha256(raw).hexdigest() == rec["sha256"]
            assert set(rec["caption"]) >= {"shape", "color", "direction", "speed"}

    def test_config_mismatch_rejected(self, workspace, tmp_path):
        other = str(tmp_path / "other.yaml")
        body = yaml.safe_load(open(workspace["cfg"]))
        body["model"]["base_width"] = 16
        body["output_dir"] = str(tmp_path / "o")
        yaml.safe_dump(body, open(other, "w"))
        res = workspace["runner"].invoke(
            cli.main,
            ["sample", "--config", other, "--checkpoint", workspace["ckpt"]],
        )
        assert res.exit_code != 0
        assert "does not match" in res.output

    def test_unconditional_flag(self, workspace, tmp_path):
        res = workspace["runner"].invoke(
            cli.main,
            ["sample", "--config", workspace["cfg"], "--checkpoint", workspace["ckpt"],
             "--out", str(tmp_path / "u"), "--steps", "2", "--unconditional"],
            catch_exceptions=False,
        )
        assert res.exit_code == 0
        header, records, _ = cli.read_samples(str(tmp_path / "u" / "samples"))
        assert header["unconditional"] is True
        assert all(r["caption"] is None for r in records)

    def test_deterministic_given_seed(self, workspace, tmp_path):
        outs = []
        for name in ("a", "b"):
            res = workspace["runner"].invoke(
                cli.main,
                ["sample", "--config", workspace["cfg"], "--checkpoint", workspace["ckpt"],
                 "--out", str(tmp_path / name), "--steps", "2"],
                catch_exceptions=False,
            )
            assert res.exit_code == 0
            _, records, videos = cli.read_samples(str(tmp_path / name / "samples"))
            outs.append((records, videos))
        for ra, rb in zip(outs[0][0], outs[1][0]):
            assert ra["sha256"] == rb["sha256"]
        for va, vb in zip(outs[0][1], outs[1][1]):
            assert np.array_equal(va, vb)


class TestEval:
    def test_metrics_file(self, workspace):
        path = os.path.join(workspace["out"], "eval", "metrics.json")
        rep, label = MetricsReport.load(path)
        assert label == "exp"
        assert rep.frame_consistency is not None
        assert rep.frechet_distance is not None and rep.frechet_distance >= 0
        assert rep.caption_accuracy is not None
        assert 0.0 <= rep.caption_accuracy <= 1.0


class TestReport:
    def test_table_and_plots(self, workspace, tmp_path):
        m1 = str(tmp_path / "m1.json")
        m2 = str(tmp_path / "m2.json")
        MetricsReport(frame_consistency=0.8, epe=2.0).save(m1, label="alpha")
        MetricsReport(frame_consistency=0.9, epe=1.5, depth_error=0.2).save(m2, label="beta")
        res = workspace["runner"].invoke(
            cli.main,
            ["report", m1, m2, "--out", str(tmp_path / "rep")],
            catch_exceptions=False,
        )
        assert res.exit_code == 0
        with open(tmp_path / "rep" / "comparison.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["label", "frame_consistency", "depth_error", "epe"]
        assert rows[1] == ["alpha", "0.8", "", "2"]
        assert rows[2] == ["beta", "0.9", "0.2", "1.5"]
        for metric in ("frame_consistency", "depth_error", "epe"):
            p = tmp_path / "rep" / "plots" / f"{metric}.png"
            assert p.exists() and p.stat().st_size > 0
            assert open(p, "rb").read(8)[1:4] == b"PNG"

    def test_label_override(self, workspace, tmp_path):
        m1 = str(tmp_path / "x.json")
        MetricsReport(epe=1.0).save(m1, label="orig")
        res = workspace["runner"].invoke(
            cli.main,
            ["report", m1, "--label", "renamed", "--out", str(tmp_path / "rep2")],
            catch_exceptions=False,
        )
        assert res.exit_code == 0
        rows = list(csv.reader(open(tmp_path / "rep2" / "comparison.csv")))
        assert rows[1][0] == "renamed"


class TestLock:
    def test_lock_blocks_second_run(self, workspace, tmp_path):
        out = str(tmp_path / "locked")
        os.makedirs(out)
        open(os.path.join(out, ".lock"), "w").write("12345")
        res = workspace["runner"].invoke(
            cli.main,
            ["gen-data", "--config", workspace["cfg"], "--out", out],
        )
        assert res.exit_code != 0
        assert "locked" in res.output

    def test_lock_released_after_success(self, workspace):
        assert not os.path.exists(os.path.join(workspace["out"], ".lock"))


class TestSampleVideoHelper:
    def test_struct_maps_on_plain_model_rejected(self):
        model = dn.init_denoiser(
            dn.DenoiserConfig(in_channels=3, base_width=8, depth=1, embed_dim=32), 0
        )
        sched = df.make_linear_schedule(10)
        cfg = df.SamplerConfig(num_steps=2)
        with pytest.raises(ValueError, match="structural"):
            sampling.sample_video(
                model, sched, None, cfg, 2, 16, 16,
                structural_maps=np.zeros((2, 4, 16, 16), dtype=np.float32),
            )

    def test_output_clipped_and_shaped(self):
        model = dn.init_denoiser(
            dn.DenoiserConfig(in_channels=3, base_width=8, depth=1, embed_dim=32), 0
        )
        sched = df.make_linear_schedule(10)
        cap = CaptionSpec("circle", "red", "N", "slow")
        video = sampling.sample_video(model, sched, cap, df.SamplerConfig(num_steps=2), 2, 16, 16)
        assert video.shape == (2, 3, 16, 16)
        assert video.min() >= -1.0 and video.max() <= 1.0

    def test_assembled_deterministic_and_shaped(self):
        model = dn.init_denoiser(
            dn.DenoiserConfig(in_channels=3, base_width=8, depth=1, embed_dim=32), 0
        )
        sched = df.make_linear_schedule(10)
        cap = CaptionSpec("square", "blue", "E", "fast")
        cfg = df.SamplerConfig(num_steps=2, seed=7)
        a = sampling.sample_video_assembled(model, sched, cap, cfg, 2, 16, 16)
        b = sampling.sample_video_assembled(model, sched, cap, cfg, 2, 16, 16)
        assert a.shape == (2, 3, 16, 16)
        assert np.array_equal(a, b)
        # the video stage consumes a different noise stream than the still stage
        direct = sampling.sample_video(model, sched, cap, cfg, 2, 16, 16)
        assert not np.array_equal(a, direct)

    def test_assembled_requires_caption(self):
        model = dn.init_denoiser(
            dn.DenoiserConfig(in_channels=3, base_width=8, depth=1, embed_dim=32), 0
        )
        sched = df.make_linear_schedule(10)
        with pytest.raises(ValueError, match="caption"):
            sampling.sample_video_assembled(
                model, sched, None, df.SamplerConfig(num_steps=2), 2, 16, 16
            )


class TestLossCurvePlot:
    def test_plot_written(self, tmp_path):
        records = [{"step": i, "total": 1.0 / (i + 1)} for i in range(5)]
        out = str(tmp_path / "curve.png")
        report_mod.plot_loss_curves([("run", records)], out)
        assert os.path.getsize(out) > 0
