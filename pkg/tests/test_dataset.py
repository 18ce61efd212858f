import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flexicl.dataset import (
    CorpusError,
    Frame,
    SplitManifest,
    VideoSweep,
    load_corpus,
    nearest_support,
    pad_to_square,
    postprocess_mask,
    preprocess,
    resize,
    split_corpus,
    split_frame_indices,
    split_intra_video,
    write_png,
)


def _video(n, vid="v0", size=8):
    frames = tuple(Frame(vid, i, np.zeros((size, size)), np.zeros((size, size), np.uint8)) for i in range(n))
    return VideoSweep(vid, "synthetic", frames)


class TestFrame:
    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            Frame("v", 0, np.zeros((4, 4)), np.zeros((4, 5), np.uint8))

    def test_rejects_non_binary_mask(self):
        with pytest.raises(ValueError):
            Frame("v", 0, np.zeros((4, 4)), np.full((4, 4), 0.5))

    def test_original_shape_defaults_to_array(self):
        f = Frame("v", 3, np.zeros((5, 7)), np.zeros((5, 7), np.uint8))
        assert f.shape == (5, 7)

    def test_sweep_requires_strict_order(self):
        a = Frame("v", 1, np.zeros((2, 2)), np.zeros((2, 2), np.uint8))
        b = Frame("v", 1, np.zeros((2, 2)), np.zeros((2, 2), np.uint8))
        with pytest.raises(ValueError):
            VideoSweep("v", "elbow", (a, b))
        with pytest.raises(ValueError):
            VideoSweep("v", "elbow", ())


class TestPadToSquare:
    def test_square_is_untouched(self):
        img = np.random.default_rng(0).random((100, 100))
        out, msk, rec = pad_to_square(img, np.zeros((100, 100)))
        assert out.shape == (100, 100)
        assert (rec.pad_top, rec.pad_bottom, rec.pad_left, rec.pad_right) == (0, 0, 0, 0)
        np.testing.assert_array_equal(out, img)

    def test_even_padding_is_centered(self):
        out, _, rec = pad_to_square(np.ones((60, 100)), np.ones((60, 100)))
        assert out.shape == (100, 100)
        assert (rec.pad_top, rec.pad_bottom) == (20, 20)

    def test_odd_padding_extra_pixel_trailing(self):
        _, _, rec = pad_to_square(np.ones((61, 100)), np.ones((61, 100)))
        assert (rec.pad_top, rec.pad_bottom) == (19, 20)
        _, _, rec = pad_to_square(np.ones((100, 61)), np.ones((100, 61)))
        assert (rec.pad_left, rec.pad_right) == (19, 20)

    def test_fill_is_zero(self):
        out, msk, _ = pad_to_square(np.ones((2, 6)), np.ones((2, 6)))
        assert out[:2].sum() == 0 and out[-2:].sum() == 0
        assert msk.sum() == 12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            pad_to_square(np.zeros((0, 5)), np.zeros((0, 5)))

    @given(h=st.integers(1, 40), w=st.integers(1, 40), seed=st.integers(0, 2**16))
    @settings(max_examples=60, deadline=None)
    def test_pad_record_inverts_exactly(self, h, w, seed):
        rng = np.random.default_rng(seed)
        img, msk = rng.random((h, w)), rng.integers(0, 2, (h, w))
        pi, pm, rec = pad_to_square(img, msk)
        assert pi.shape[0] == pi.shape[1] == max(h, w)
        assert sum((rec.pad_top, rec.pad_bottom)) == 0 or sum((rec.pad_left, rec.pad_right)) == 0
        np.testing.assert_array_equal(rec.unpad(pi), img)
        np.testing.assert_array_equal(rec.unpad(pm), msk)


class TestResize:
    def test_identity(self):
        img = np.random.default_rng(1).random((224, 224))
        np.testing.assert_array_equal(resize(img, 224), img)

    def test_mask_stays_binary(self):
        m = (np.random.default_rng(2).random((100, 100)) > 0.5).astype(np.uint8)
        out = resize(m, 224, "mask")
        assert out.shape == (224, 224)
        assert set(np.unique(out)) <= {0, 1}

    @pytest.mark.parametrize("src,dst", [(100, 224), (224, 32), (37, 37), (64, 32)])
    def test_constant_preserved(self, src, dst):
        out = resize(np.full((src, src), 0.5), dst)
        np.testing.assert_allclose(out, 0.5, atol=1e-12)

    def test_bad_target(self):
        with pytest.raises(ValueError):
            resize(np.zeros((4, 4)), 0)

    def test_postprocess_returns_original_shape(self):
        img = np.zeros((50, 80))
        msk = np.zeros((50, 80), np.uint8)
        msk[10:20, 30:40] = 1
        _, small, rec = preprocess(img, msk, 32)
        back = postprocess_mask(small, rec)
        assert back.shape == (50, 80)


class TestSplit:
    def test_five_percent_of_hundred(self):
        s = split_intra_video(_video(100), 0.05, 0)
        assert (len(s.train_indices), len(s.test_indices)) == (5, 95)
        assert (len(s.support_indices), len(s.query_indices)) == (3, 2)

    def test_floor_of_two(self):
        s = split_intra_video(_video(20), 0.05, 0)
        assert len(s.train_indices) == 2
        assert len(s.support_indices) == len(s.query_indices) == 1

    def test_deterministic(self):
        a = split_intra_video(_video(100), 0.1, 7)
        b = split_intra_video(_video(100), 0.1, 7)
        assert a == b

    def test_seed_changes_split(self):
        a = split_intra_video(_video(100), 0.1, 7)
        b = split_intra_video(_video(100), 0.1, 8)
        assert a.train_indices != b.train_indices

    def test_too_short(self):
        with pytest.raises(ValueError):
            split_intra_video(_video(1), 0.5, 0)

    @pytest.mark.parametrize("fraction", [0.0, -0.1, 1.5])
    def test_bad_fraction(self, fraction):
        with pytest.raises(ValueError):
            split_intra_video(_video(10), fraction, 0)

    @given(n=st.integers(2, 300), fraction=st.floats(0.001, 1.0), seed=st.integers(0, 2**31))
    @settings(max_examples=100, deadline=None)
    def test_invariants(self, n, fraction, seed):
        idx = list(range(0, 3 * n, 3))
        s = split_frame_indices(idx, fraction, seed, "v")
        sup, qry, train, test = map(set, (s.support_indices, s.query_indices, s.train_indices, s.test_indices))
        assert sup | qry == train and not sup & qry
        assert not train & test and train | test == set(idx)
        assert abs(len(sup) - len(qry)) <= 1
        assert len(train) == min(n, max(2, round(fraction * n)))

    def test_manifest_round_trip(self, tmp_path):
        corpus = [_video(30, "a"), _video(12, "b")]
        m = split_corpus(corpus, 0.2, 3)
        m.validate(corpus)
        path = m.save(tmp_path / "split.json")
        again = SplitManifest.load(path)
        assert again.to_dict() == m.to_dict()
        doc = json.loads(path.read_text())
        assert doc["seed"] == 3 and doc["train_fraction"] == 0.2


class TestNearestSupport:
    def test_examples(self):
        assert nearest_support(42, [3, 40, 77]) == 40
        assert nearest_support(10, [8, 12]) == 8
        assert nearest_support(10, [12, 8]) == 8
        assert nearest_support(1000, [5]) == 5

    def test_empty(self):
        with pytest.raises(ValueError):
            nearest_support(3, [])

    @given(t=st.integers(-100, 100), pool=st.lists(st.integers(-100, 100), min_size=1, max_size=20))
    def test_minimal(self, t, pool):
        r = nearest_support(t, pool)
        assert r in pool
        assert all(abs(t - r) <= abs(t - p) for p in pool)
        assert all(r <= p for p in pool if abs(t - p) == abs(t - r))


class TestLoadCorpus:
    def _write(self, root, masks):
        frames = []
        for i, m in enumerate(masks):
            write_png(root / f"i{i}.png", np.full(m.shape, 100, np.uint8))
            write_png(root / f"m{i}.png", m)
            frames.append({"frame_index": i, "image_path": f"i{i}.png", "mask_path": f"m{i}.png"})
        path = root / "manifest.json"
        path.write_text(json.dumps({"videos": [{"video_id": "v", "anatomy": "elbow", "frames": frames}]}))
        return path

    def test_loads(self, tmp_path):
        m = np.zeros((6, 4), np.uint8)
        m[2:4] = 255
        corpus = load_corpus(self._write(tmp_path, [m, m]))
        assert len(corpus) == 1 and len(corpus[0]) == 2
        f = corpus[0].frames[0]
        assert f.mask.sum() == 8 and f.image.max() == pytest.approx(100 / 255)

    def test_non_binary_mask_names_file(self, tmp_path):
        m = np.full((4, 4), 128, np.uint8)
        with pytest.raises(CorpusError, match="m0.png"):
            load_corpus(self._write(tmp_path, [m]))

    def test_missing_file(self, tmp_path):
        path = self._write(tmp_path, [np.zeros((4, 4), np.uint8)])
        (tmp_path / "i0.png").unlink()
        with pytest.raises(CorpusError, match="i0.png"):
            load_corpus(path)

    def test_shape_mismatch(self, tmp_path):
        path = self._write(tmp_path, [np.zeros((4, 4), np.uint8)])
        write_png(tmp_path / "m0.png", np.zeros((5, 4), np.uint8))
        with pytest.raises(CorpusError, match="m0.png"):
            load_corpus(path)

    def test_empty(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text(json.dumps({"videos": []}))
        assert load_corpus(p) == []
