import numpy as np
import pytest

from sscontour.forest.train import ForestConfig
from sscontour.pipeline import dictionary_patches, learn_token_dictionary, split_corpus
from sscontour.sparse import fast_sparse_code_batch


class TestSplitCorpus:
    def test_all_labeled(self):
        lab, unl = split_corpus(range(5), 5, 1)
        assert sorted(lab) == list(range(5)) and unl == []

    def test_three_labeled(self):
        lab, unl = split_corpus(range(200), 3, 0)
        assert len(lab) == 3 and len(unl) == 197
        assert set(lab) | set(unl) == set(range(200))

    def test_seeded(self):
        assert split_corpus("abcdefg", 2, 4) == split_corpus("abcdefg", 2, 4)
        assert any(split_corpus(range(30), 3, s)[0] != split_corpus(range(30), 3, 0)[0] for s in range(1, 4))

    def test_too_many(self):
        with pytest.raises(ValueError):
            split_corpus(range(3), 4)


@pytest.fixture(scope="module")
def patches(tiny_corpus):
    labeled = [(img, [gt]) for img, gt in tiny_corpus[:2]]
    unlabeled = [img for img, _ in tiny_corpus[2:5]]
    # weak maps stand in for the detector: ground truth of each image, softened
    wl = [gt.astype(float) * 0.9 for _, gt in tiny_corpus[:2]]
    wu = [gt.astype(float) * 0.9 for _, gt in tiny_corpus[2:5]]
    cfg = ForestConfig()
    return dictionary_patches(labeled, unlabeled, wl, wu, cfg, 40, seed=3), (labeled, unlabeled, wl, wu, cfg)


class TestDictionaryPatches:
    def test_layout(self, patches):
        (fg, bg), _ = patches
        assert fg.shape[1] == bg.shape[1] == 4 * 12 * 12
        assert 0 < len(fg) <= 40 and 0 < len(bg) <= 40
        assert np.all(np.linalg.norm(fg, axis=1) > 0)

    def test_foreground_carries_contour_channel(self, patches):
        (fg, bg), _ = patches
        contour = slice(3 * 144, 4 * 144)
        assert fg[:, contour].mean() > bg[:, contour].mean()

    def test_deterministic(self, patches):
        (fg, bg), args = patches
        fg2, bg2 = dictionary_patches(*args, 40, seed=3)
        np.testing.assert_array_equal(fg, fg2)
        np.testing.assert_array_equal(bg, bg2)

    def test_labeled_only(self, patches):
        _, (labeled, _, wl, _, cfg) = patches
        fg, bg = dictionary_patches(labeled, [], wl, [], cfg, 20, seed=0)
        assert len(fg) <= 20 and len(bg) <= 20


class TestLearnTokenDictionary:
    def test_background_first(self, patches):
        (fg, bg), _ = patches
        d = learn_token_dictionary(fg, bg, atoms_per_class=6, k_train=2, k=4, iterations=3, seed=1)
        assert d.n_atoms == 12 and d.split == 6 and d.k == 4
        np.testing.assert_allclose(np.linalg.norm(d.atoms, axis=0), 1.0, atol=1e-9)
        idx, _ = fast_sparse_code_batch(fg, d.atoms, 1)
        jdx, _ = fast_sparse_code_batch(bg, d.atoms, 1)
        # foreground patches lean on foreground atoms more than background patches do
        assert (idx >= 6).mean() > (jdx >= 6).mean()


