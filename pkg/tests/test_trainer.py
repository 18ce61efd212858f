from collections import Counter

import numpy as np
import pytest
import torch

from flexicl.composer import AugmentationConfig
from flexicl.dataset import split_corpus
from flexicl.model import ModelConfig, load_checkpoint
from flexicl.synthgen import SynthConfig, generate_corpus
from flexicl.trainer import (
    TrainConfig,
    TrainingLog,
    baseline_split,
    build_sample,
    epoch_pairs,
    lr_at,
    param_groups,
    prepare_frames,
    sample_stream,
    train,
    train_supervised_baseline,
)

TINY = ModelConfig(canvas_size=32, patch_size=8, embed_dim=32, depth=1, num_heads=2)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SynthConfig(num_videos=2, frames_per_video=24, height=32, width=32, thickness_min=5, thickness_max=8, curvature=3))


@pytest.fixture(scope="module")
def split(corpus):
    return split_corpus(corpus, 0.25, 0)


def _cfg(**kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("batch_size", 8)
    return TrainConfig(**kw)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.learning_rate, c.weight_decay, c.mask_ratio, c.epochs, c.batch_size) == (5e-4, 0.05, 0.6, 1200, 64)
        assert c.augmentation.pairwise_n == 5 and c.augmentation.imagewise_ratio == 0.5

    @pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"mask_ratio": 1.5}, {"mask_mode": "x"}, {"soft_y": 101}, {"epochs": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_schedules(self):
        assert lr_at(TrainConfig(), 500) == 5e-4
        c = TrainConfig(lr_schedule="cosine", epochs=10, warmup_epochs=2)
        assert lr_at(c, 0) == pytest.approx(2.5e-4)
        assert lr_at(c, 2) == pytest.approx(5e-4)
        assert lr_at(c, 9) < lr_at(c, 5) < lr_at(c, 2)


class TestPairs:
    def test_sixty_samples_per_epoch(self):
        # 12 query frames per video at n = 5 gives 60 canvases per video
        from flexicl.dataset import SplitManifest, VideoSplit

        s = VideoSplit(list(range(24)), list(range(12)), list(range(12, 24)), list(range(24, 30)))
        split = SplitManifest(0.8, 0, {"v": s})
        pairs = epoch_pairs(split, 0, TrainConfig())
        assert len(pairs) == 60
        assert Counter(p.query for _, _, p in pairs) == Counter({("v", i): 5 for i in range(12, 24)})

    def test_epochwise_reshuffles(self, split):
        cfg = TrainConfig()
        a = [p.support for _, _, p in epoch_pairs(split, 0, cfg)]
        b = [p.support for _, _, p in epoch_pairs(split, 1, cfg)]
        assert a != b

    def test_fixed_pairs_without_epochwise(self, split):
        cfg = TrainConfig(augmentation=AugmentationConfig(epochwise=False))
        assert epoch_pairs(split, 0, cfg) == epoch_pairs(split, 7, cfg)

    def test_within_video_by_default(self, split):
        assert all(p.support[0] == p.query[0] == vid for vid, _, p in epoch_pairs(split, 0, TrainConfig()))

    def test_cross_video(self, split):
        pairs = epoch_pairs(split, 0, TrainConfig(cross_video=True))
        assert any(p.support[0] != p.query[0] for _, _, p in pairs)


class TestSamples:
    def test_no_augmentation_stream_repeats(self, corpus, split):
        cfg = TrainConfig(mask_ratio=0.0, augmentation=AugmentationConfig(pairwise_n=1, imagewise_ratio=0.0, epochwise=False))
        keys = sorted({(v, i) for v, s in split.videos.items() for i in s.train_indices})
        frames = prepare_frames(corpus, keys, TINY.cell_size)

        def stream(epoch):
            return [build_sample(frames, p, cfg, TINY, sample_stream(cfg, epoch, k))[0] for k, (_, _, p) in enumerate(epoch_pairs(split, epoch, cfg))]

        for a, b in zip(stream(0), stream(3)):
            np.testing.assert_array_equal(a, b)

    def test_canvas_carries_true_query_mask(self, corpus, split):
        cfg = TrainConfig(augmentation=AugmentationConfig(imagewise_ratio=0.0))
        keys = sorted({(v, i) for v, s in split.videos.items() for i in s.train_indices})
        frames = prepare_frames(corpus, keys, TINY.cell_size)
        _, _, pair = epoch_pairs(split, 0, cfg)[0]
        canvas, grid = build_sample(frames, pair, cfg, TINY, sample_stream(cfg, 0, 0))
        C = TINY.cell_size
        np.testing.assert_array_equal(canvas[C:, C:], frames[pair.query][1])
        np.testing.assert_array_equal(canvas[:C, C:], frames[pair.support][1])
        assert grid.sum() == round(0.6 * TINY.num_patches)


def test_no_decay_groups():
    from flexicl.model import FlexICLModel

    model = FlexICLModel(TINY)
    groups, skipped = param_groups(model, 0.05, TrainConfig().no_decay)
    assert {"pos_embed", "mask_token"} <= set(skipped)
    assert all("bias" in n or "norm" in n or n in ("pos_embed", "mask_token") for n in skipped)
    assert groups[1]["weight_decay"] == 0.0 and groups[0]["weight_decay"] == 0.05
    assert sum(p.numel() for g in groups for p in g["params"]) == sum(p.numel() for p in model.parameters())


class TestTrain:
    def test_deterministic_and_logged(self, corpus, split, tmp_path):
        ck1, log1 = train(corpus, split, TINY, _cfg(), out_dir=tmp_path)
        ck2, log2 = train(corpus, split, TINY, _cfg())
        assert log1.losses == log2.losses
        for (n, a), (_, b) in zip(ck1.model.state_dict().items(), ck2.model.state_dict().items()):
            assert torch.equal(a, b), n
        assert (tmp_path / "checkpoint.pt").exists()
        reloaded = TrainingLog.load(tmp_path / "train_log.jsonl")
        assert reloaded.losses == log1.losses
        assert "mask_token" in reloaded.meta["no_decay_params"]
        model, state = load_checkpoint(tmp_path / "checkpoint.pt")
        assert state["epoch"] == 2 and model.kind == "flexicl"

    def test_samples_per_epoch(self, corpus, split):
        _, log = train(corpus, split, TINY, _cfg(epochs=1))
        n_query = sum(len(s.query_indices) for s in split.videos.values())
        assert log.records[0].samples == 5 * n_query

    def test_loss_decreases(self, corpus, split):
        _, log = train(corpus, split, TINY, _cfg(epochs=40, learning_rate=1e-3))
        assert np.mean(log.losses[-5:]) < 0.8 * np.mean(log.losses[:3])

    def test_periodic_checkpoints(self, corpus, split, tmp_path):
        train(corpus, split, TINY, _cfg(epochs=4, checkpoint_every=2), out_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.glob("checkpoint_*.pt")) == ["checkpoint_00002.pt", "checkpoint_00004.pt"]

    def test_dump_canvas(self, corpus, split, tmp_path):
        train(corpus, split, TINY, _cfg(epochs=1), dump_canvas=tmp_path / "dump")
        assert list((tmp_path / "dump").glob("*.png"))

    def test_rejects_empty_pool(self, corpus):
        from flexicl.dataset import SplitManifest, VideoSplit

        bad = SplitManifest(0.1, 0, {corpus[0].video_id: VideoSplit([0], [0], [], list(range(1, 24)))})
        with pytest.raises(ValueError):
            train(corpus[:1], bad, TINY, _cfg())


class TestBaseline:
    def test_split_80_20(self, split):
        tr, va = baseline_split(split, 0)
        n = sum(len(s.train_indices) for s in split.videos.values())
        assert len(tr) + len(va) == n and not set(tr) & set(va)
        assert len(va) == sum(round(0.2 * len(s.train_indices)) for s in split.videos.values())

    def test_trains_and_is_deterministic(self, corpus, split):
        ck1, log1 = train_supervised_baseline(corpus, split, TINY, _cfg(epochs=3))
        ck2, log2 = train_supervised_baseline(corpus, split, TINY, _cfg(epochs=3))
        assert log1.losses == log2.losses
        assert ck1.model.kind == "baseline"
        assert log1.meta["best_val_loss"] == min(r.val_loss for r in log1.records)
        x = torch.rand(1, 1, 32, 32)
        with torch.no_grad():
            assert ck1.model(x).shape == x.shape
