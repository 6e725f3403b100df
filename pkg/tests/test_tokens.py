import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sscontour.errors import FormatError
from sscontour.features import ImageChannels, compute_channels, extract_patch_vector
from sscontour.tokens import (
    LABELED,
    UNLABELED,
    TokenSet,
    TokenSource,
    load_tokens,
    pi_map,
    sample_tokens,
    save_tokens,
    straddle_map,
)

M = 12


@pytest.fixture
def scene():
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, (28, 32, 3), dtype=np.uint8)
    gt = np.zeros((28, 32), dtype=bool)
    gt[:, 15] = True
    gt[20, :] = True
    return img, compute_channels(img), gt


def _straddle_oracle(truth, y, x):
    """Contour inside rows y-1..y, cols x-1..x, with index -1 reflected to 1."""
    h, w = truth.shape
    for yy in (y - 1, y):
        for xx in (x - 1, x):
            yy_, xx_ = abs(yy), abs(xx)
            if yy_ < h and xx_ < w and truth[yy_, xx_]:
                return True
    return False


class TestStraddle:
    def test_contour_at_center_is_foreground(self):
        truth = np.zeros((10, 10), dtype=bool)
        truth[4, 6] = True
        s = straddle_map(truth)
        assert s[4, 6]
        assert s[5, 7] and s[4, 7] and s[5, 6]
        assert s.sum() == 4

    @settings(max_examples=50, deadline=None)
    @given(arrays(bool, st.tuples(st.integers(2, 9), st.integers(2, 9))))
    def test_matches_brute_force(self, truth):
        s = straddle_map(truth)
        expect = np.array([[_straddle_oracle(truth, y, x) for x in range(truth.shape[1])]
                           for y in range(truth.shape[0])])
        np.testing.assert_array_equal(s, expect)


class TestSampleTokens:
    def test_counts_and_order(self, scene):
        img, ch, gt = scene
        ts = sample_tokens(img, ch, gt, (30, 40), LABELED, rng_seed=1)
        assert len(ts) == 70
        fg = straddle_map(gt)
        assert fg[ts.cy[:30], ts.cx[:30]].all()
        assert not fg[ts.cy[30:], ts.cx[30:]].any()
        assert ts.is_labeled.all()
        np.testing.assert_array_equal(ts.confidence, 1.0)

    def test_blank_truth_background_only(self, scene):
        img, ch, _ = scene
        ts = sample_tokens(img, ch, np.zeros((28, 32), bool), (0, 50), LABELED, rng_seed=0)
        assert len(ts) == 50
        assert not ts.labels.any()

    def test_missing_class_raises(self, scene):
        img, ch, _ = scene
        with pytest.raises(ValueError):
            sample_tokens(img, ch, np.zeros((28, 32), bool), (1, 5), LABELED)

    def test_scarce_class_sampled_with_replacement(self, scene):
        img, ch, _ = scene
        gt = np.zeros((28, 32), bool)
        gt[10, 10] = True  # four straddling centres
        ts = sample_tokens(img, ch, gt, (25, 0), LABELED, rng_seed=2)
        assert len(ts) == 25
        assert len(set(zip(ts.cy.tolist(), ts.cx.tolist()))) <= 4

    def test_labels_are_reflected_windows(self, scene):
        img, ch, gt = scene
        ts = sample_tokens(img, ch, gt, (10, 10), LABELED, rng_seed=4)
        gplane = ImageChannels(gt[None].astype(np.float32))
        for i in range(len(ts)):
            expect = extract_patch_vector(gplane, (ts.cy[i], ts.cx[i]), M).reshape(M, M) > 0
            np.testing.assert_array_equal(ts.labels[i], expect)

    def test_features_match_patch_vectors(self, scene):
        img, ch, gt = scene
        ts = sample_tokens(img, ch, gt, (5, 5), LABELED, rng_seed=5)
        feats = ts.feature_matrix()
        assert feats.shape == (10, 1872)
        for i in range(10):
            np.testing.assert_array_equal(feats[i], extract_patch_vector(ch, (ts.cy[i], ts.cx[i]), M))
            np.testing.assert_array_equal(ts[i].features, feats[i])

    def test_constant_weak_map(self, scene):
        img, ch, _ = scene
        weak = np.full((28, 32), 0.9)
        ts = sample_tokens(img, ch, weak, (40, 0), UNLABELED, (0.8, 0.2), rng_seed=0)
        assert len(ts) == 40
        np.testing.assert_allclose(ts.confidence, 0.9)
        assert not ts.is_labeled.any()
        with pytest.raises(ValueError):
            sample_tokens(img, ch, weak, (1, 1), UNLABELED, (0.8, 0.2))

    def test_unlabeled_confidence(self, scene):
        img, ch, _ = scene
        weak = np.random.default_rng(0).random((28, 32))
        ts = sample_tokens(img, ch, weak, (20, 20), UNLABELED, (0.7, 0.2), rng_seed=9)
        v = weak[ts.cy, ts.cx]
        assert (v[:20] >= 0.7).all() and (v[20:] <= 0.2).all()
        np.testing.assert_allclose(ts.confidence[:20], v[:20])
        np.testing.assert_allclose(ts.confidence[20:], 1 - v[20:])
        assert ts.dict_patches().shape == (40, 576)

    @pytest.mark.parametrize("thresholds", [(0.2, 0.7), (0.5, 0.5), (1.2, 0.1), (0.5, -0.1)])
    def test_bad_thresholds(self, scene, thresholds):
        img, ch, _ = scene
        with pytest.raises(ValueError):
            sample_tokens(img, ch, np.zeros((28, 32)), (0, 1), UNLABELED, thresholds)

    def test_requires_truth(self, scene):
        img, ch, _ = scene
        with pytest.raises(ValueError):
            sample_tokens(img, ch, None, (0, 1), LABELED)
        with pytest.raises(ValueError):
            sample_tokens(img, ch, None, (0, 1), UNLABELED)

    def test_annotators_are_unioned(self, scene):
        img, ch, gt = scene
        a = np.zeros_like(gt)
        b = np.zeros_like(gt)
        a[:, 15] = True
        b[20, :] = True
        t1 = sample_tokens(img, ch, [a, b], (10, 10), LABELED, rng_seed=6)
        t2 = sample_tokens(img, ch, gt, (10, 10), LABELED, rng_seed=6)
        np.testing.assert_array_equal(t1.labels, t2.labels)

    def test_reproducible(self, scene):
        img, ch, gt = scene
        a = sample_tokens(img, ch, gt, (12, 12), LABELED, rng_seed=11)
        b = sample_tokens(img, ch, gt, (12, 12), LABELED, rng_seed=11)
        np.testing.assert_array_equal(a.cy, b.cy)
        np.testing.assert_array_equal(a.cx, b.cx)

    def test_dictionary_patch_layout(self, scene):
        img, ch, gt = scene
        contour = np.random.default_rng(1).random((28, 32))
        ts = sample_tokens(img, ch, gt, (3, 3), LABELED, rng_seed=0, contour_map=contour)
        tok = ts[0]
        assert tok.dict_patch.shape == (576,)
        rgb = img.astype(np.float64) / 255.0
        planes = ImageChannels(np.concatenate([rgb.transpose(2, 0, 1), contour[None]]).astype(np.float64))
        np.testing.assert_allclose(tok.dict_patch, extract_patch_vector(planes, tok.center, M))


class TestTokenSet:
    def test_concatenate_and_subset(self, scene):
        img, ch, gt = scene
        a = sample_tokens(img, ch, gt, (3, 3), LABELED, rng_seed=0)
        b = sample_tokens(img, ch, np.full((28, 32), 0.1), (0, 4), UNLABELED, rng_seed=0)
        c = TokenSet.concatenate([a, b])
        assert len(c) == 10 and c.n_labeled == 6
        np.testing.assert_array_equal(c.feature_matrix(np.arange(6, 10)), b.feature_matrix())
        s = c.subset([7, 1])
        np.testing.assert_array_equal(s.feature_matrix(), c.feature_matrix([7, 1]))
        assert len(TokenSet.concatenate([], 12)) == 0

    def test_rejects_bad_confidence(self):
        with pytest.raises(ValueError):
            TokenSet(4, [], [0], [0], [0], [False], [1.5], np.zeros((1, 4, 4)))


class TestPiMap:
    def test_identical_labels_same_class(self):
        rng = np.random.default_rng(0)
        labels = rng.random((6, M, M)) < 0.2
        labels[3] = labels[0]
        c = pi_map(labels, rng_seed=1)
        assert c[0] == c[3]

    def test_single_mask_copies_are_class_one(self):
        mask = np.random.default_rng(2).random((M, M)) < 0.3
        np.testing.assert_array_equal(pi_map(np.stack([mask] * 7)), 1)

    def test_blank_versus_column_lines(self):
        blank = np.zeros((10, M, M), bool)
        lines = np.zeros((10, M, M), bool)
        lines[:, :, 5] = True
        labels = np.concatenate([blank, lines])
        c = pi_map(labels, 2, 256, 0)
        assert len(set(c[:10])) == 1 and len(set(c[10:])) == 1
        assert c[0] != c[10]
        # oracle: same pairs, top right singular vector of the centred encodings
        rng = np.random.default_rng(0)
        p = rng.integers(0, M * M, 256)
        q = rng.integers(0, M * M - 1, 256)
        q = q + (q >= p)
        flat = labels.reshape(20, -1)
        z = (flat[:, p] != flat[:, q]).astype(float)
        zc = z - z.mean(axis=0)
        proj = zc @ np.linalg.svd(zc)[2][0]
        assert np.ptp(np.sign(proj[:10])) == 0 and np.ptp(np.sign(proj[10:])) == 0
        assert np.sign(proj[0]) != np.sign(proj[10])

    def test_requires_z2_and_nonempty(self):
        with pytest.raises(ValueError):
            pi_map(np.zeros((2, 4, 4), bool), Z=3)
        with pytest.raises(ValueError):
            pi_map(np.zeros((0, 4, 4), bool))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 30), st.integers(0, 2**32 - 1), st.integers(0, 1000))
    def test_permutation_invariance(self, n, seed, perm_seed):
        rng = np.random.default_rng(seed)
        base = rng.random((4, 8, 8)) < 0.25
        labels = base[rng.integers(0, 4, n)]  # repeats exercise the identical-mask rule
        c = pi_map(labels, rng_seed=seed)
        perm = np.random.default_rng(perm_seed).permutation(n)
        np.testing.assert_array_equal(pi_map(labels[perm], rng_seed=seed), c[perm])
        for i in range(n):
            for j in range(n):
                if np.array_equal(labels[i], labels[j]):
                    assert c[i] == c[j]


class TestTokenCache:
    def _sources(self, scene):
        img, ch, _ = scene
        return [TokenSource("a", ch, M)]

    def test_round_trip(self, tmp_path, scene):
        img, ch, gt = scene
        a = sample_tokens(img, ch, gt, (5, 5), LABELED, rng_seed=0)
        b = sample_tokens(img, ch, np.full((28, 32), 0.9), (6, 0), UNLABELED, (0.8, 0.2), rng_seed=0)
        ts = TokenSet.concatenate([a, b])
        ts.sources = [ts.sources[0], ts.sources[0]]
        path = tmp_path / "tok.bin"
        save_tokens(path, ts)
        back = load_tokens(path, ts.sources)
        for col in ("image_index", "cy", "cx", "is_labeled", "labels"):
            np.testing.assert_array_equal(getattr(back, col), getattr(ts, col))
        np.testing.assert_allclose(back.confidence, ts.confidence, rtol=1e-7)
        np.testing.assert_array_equal(back.feature_matrix(), ts.feature_matrix())

    def test_version_mismatch(self, tmp_path, scene):
        img, ch, gt = scene
        path = tmp_path / "tok.bin"
        save_tokens(path, sample_tokens(img, ch, gt, (1, 1), LABELED))
        raw = bytearray(path.read_bytes())
        raw[8:10] = struct.pack("<H", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_tokens(path, self._sources(scene))
        path.write_bytes(b"NOTTOKEN" + bytes(raw[8:]))
        with pytest.raises(FormatError):
            load_tokens(path, self._sources(scene))
