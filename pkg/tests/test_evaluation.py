import numpy as np
import pytest
import torch

from spritediffusion.conditioning import CaptionSpec, CenterFrameEncoder, DIRECTION_ANGLES
from spritediffusion import data as D
from spritediffusion import evaluation as ev

torch.set_num_threads(1)


def flat_embedder(frames: np.ndarray) -> np.ndarray:
    """Identity embedder: flattened pixels as features."""
    return frames.reshape(frames.shape[0], -1).astype(np.float64)


def gt_videos(n, seed, F=8):
    rng = np.random.default_rng(seed)
    caps, vids, specs = [], [], []
    for _ in range(n):
        cap = D.random_caption(rng)
        spec = D.spec_from_caption(cap, rng, F, 32, 32)
        vids.append(D.render_video(spec, F, 32, 32).data)
        caps.append(cap)
        specs.append(spec)
    return vids, caps, specs


class TestFrameConsistency:
    def test_constant_video_scores_one(self):
        frame = np.random.default_rng(0).standard_normal((3, 8, 8)).astype(np.float32)
        video = np.repeat(frame[None], 5, axis=0)
        assert ev.frame_consistency([video], flat_embedder) == pytest.approx(1.0)

    def test_opposite_frames_score_minus_one(self):
        frame = np.ones((3, 8, 8), dtype=np.float32)
        video = np.stack([frame, -frame])
        assert ev.frame_consistency([video], flat_embedder) == pytest.approx(-1.0)

    def test_hand_value_orthogonal(self):
        a = np.zeros((3, 2, 2), dtype=np.float32)
        b = np.zeros((3, 2, 2), dtype=np.float32)
        a[0, 0, 0] = 1.0
        b[1, 0, 0] = 1.0
        assert ev.frame_consistency([np.stack([a, b])], flat_embedder) == pytest.approx(0.0)

    def test_single_frame_rejected(self):
        with pytest.raises(ValueError):
            ev.frame_consistency([np.zeros((1, 3, 4, 4))], flat_embedder)

    def test_real_videos_highly_consistent(self):
        vids, _, _ = gt_videos(4, 1)
        enc = CenterFrameEncoder(3, 16)
        torch.manual_seed(0)
        val = ev.frame_consistency(vids, ev.make_embedder(enc))
        assert val > 0.9


class TestMapErrors:
    def test_zero_error_on_ground_truth(self):
        vids, _, specs = gt_videos(3, 2)
        conds = [D.structural_maps_for(D.VideoTensor(v, 8.0), s) for v, s in zip(vids, specs)]
        assert ev.depth_error(vids, [c[:, 0:1] for c in conds]) == pytest.approx(0.0, abs=1e-12)
        assert ev.sketch_error(vids, [c[:, 1:2] for c in conds]) == pytest.approx(0.0, abs=1e-12)

    def test_blank_video_error_equals_condition_mean(self):
        vids, _, specs = gt_videos(1, 3)
        cond = D.structural_maps_for(D.VideoTensor(vids[0], 8.0), specs[0])[:, 0:1]
        blank = np.full_like(vids[0], -0.9)
        # proxy of a blank frame is zero, so the error is the mean |condition|
        assert ev.depth_error([blank], [cond]) == pytest.approx(np.abs(cond[:, 0]).mean(axis=(1, 2)).mean())

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ev.depth_error([np.zeros((4, 3, 8, 8))], [np.zeros((3, 1, 8, 8))])
        with pytest.raises(ValueError):
            ev.depth_error([np.zeros((4, 3, 8, 8))], [])


class TestEPE:
    def test_ground_truth_epe_small(self):
        vids, _, specs = gt_videos(5, 4)
        maps = [D.motion_vector_maps(s, 8, 32, 32) for s in specs]
        val, excluded = ev.epe(vids, maps)
        assert excluded == 0
        # nonzero floor: binarized anti-aliased masks jitter the centroid
        assert val < 0.35

    def test_definitional_unit_error(self):
        # static sprite, ground truth says 1 px/frame east -> EPE exactly ~1
        spec = D.SpriteVideoSpec("circle", "red", 8.0, (16.0, 16.0), (0.0, 0.0), 0.0, 0)
        vid = D.render_video(spec, 6, 32, 32).data
        moving = D.SpriteVideoSpec("circle", "red", 8.0, (10.0, 16.0), (1.0, 0.0), 0.0, 0)
        maps = D.motion_vector_maps(moving, 6, 32, 32)
        val, excluded = ev.epe([vid], [maps])
        assert excluded == 0
        assert val == pytest.approx(1.0, abs=0.05)

    def test_undetectable_video_excluded(self):
        vids, _, specs = gt_videos(1, 5)
        maps = D.motion_vector_maps(specs[0], 8, 32, 32)
        blank = np.full_like(vids[0], -0.9)
        val, excluded = ev.epe([vids[0], blank], [maps, maps])
        assert excluded == 1

    def test_all_excluded_raises(self):
        blank = np.full((4, 3, 16, 16), -0.9)
        with pytest.raises(ValueError):
            ev.epe([blank], [np.ones((4, 2, 16, 16))])


class TestFrechet:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((64, 5))
        assert ev.frechet_from_features(x, x.copy()) == pytest.approx(0.0, abs=1e-8)

    def test_pure_mean_shift_is_squared_distance(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4096, 6))
        delta = np.array([1.0, -2.0, 0.5, 0.0, 3.0, 0.0])
        d = ev.frechet_from_features(x, x + delta)
        assert d == pytest.approx(float(delta @ delta), abs=1e-6)

    def test_univariate_closed_form(self):
        # N(0,1) vs N(mu, s^2): d^2 = mu^2 + (1-s)^2, computed on huge samples
        rng = np.random.default_rng(8)
        x = rng.standard_normal((200_000, 1))
        y = 2.0 * rng.standard_normal((200_000, 1)) + 3.0
        d = ev.frechet_from_features(x, y)
        assert d == pytest.approx(9.0 + 1.0, rel=0.02)

    def test_symmetry_and_min_size(self):
        rng = np.random.default_rng(9)
        x, y = rng.standard_normal((32, 4)), rng.standard_normal((32, 4)) + 1.0
        assert ev.frechet_from_features(x, y) == pytest.approx(ev.frechet_from_features(y, x), rel=1e-6)
        with pytest.raises(ValueError):
            ev.frechet_from_features(x[:1], y)

    def test_video_features_mean_of_frames(self):
        vids, _, _ = gt_videos(2, 10, F=4)
        feats = ev.video_features(vids, flat_embedder)
        assert np.allclose(feats[0], flat_embedder(vids[0]).mean(axis=0))

    def test_permutation_invariance(self):
        vids, _, _ = gt_videos(6, 11, F=4)
        ref, _, _ = gt_videos(6, 12, F=4)
        a = ev.frechet_feature_distance(vids, ref, flat_embedder)
        b = ev.frechet_feature_distance(vids[::-1], ref, flat_embedder)
        assert a == pytest.approx(b, rel=1e-6)


class TestCaptionClassifier:
    def test_self_test_on_ground_truth(self):
        vids, caps, _ = gt_videos(60, 13)
        overall, breakdown = ev.caption_accuracy(vids, caps)
        assert overall > 0.98
        for attr, acc in breakdown.items():
            assert acc > 0.95, attr

    def test_blank_video_scores_zero(self):
        blank = np.full((8, 3, 32, 32), -0.9)
        overall, _ = ev.caption_accuracy([blank], [CaptionSpec("circle", "red", "N", "slow")])
        assert overall == 0.0

    def test_single_frame_skips_motion(self):
        vids, caps, _ = gt_videos(2, 14, F=1)
        _, breakdown = ev.caption_accuracy(vids, caps)
        assert "direction" not in breakdown and "speed" not in breakdown
        assert set(breakdown) == {"shape", "color"}

    def test_classify_direction_all_eight(self):
        rng = np.random.default_rng(15)
        for direction in DIRECTION_ANGLES:
            cap = CaptionSpec("square", "blue", direction, "fast")
            spec = D.spec_from_caption(cap, rng, 8, 32, 32)
            vid = D.render_video(spec, 8, 32, 32).data
            assert ev.classify_video(vid)["direction"] == direction

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ev.caption_accuracy([np.zeros((2, 3, 8, 8))], [])


class TestMetricsReport:
    def test_round_trip_with_label(self, tmp_path):
        rep = ev.MetricsReport(frame_consistency=0.9, epe=1.5, sample_counts={"gen": 8})
        p = str(tmp_path / "m.json")
        rep.save(p, label="run-a")
        back, label = ev.MetricsReport.load(p)
        assert label == "run-a"
        assert back.frame_consistency == 0.9 and back.epe == 1.5
        assert back.sample_counts == {"gen": 8}
        assert back.depth_error is None

    def test_to_dict_drops_none(self):
        rep = ev.MetricsReport(epe=2.0)
        d = rep.to_dict()
        assert "frame_consistency" not in d and d["epe"] == 2.0
