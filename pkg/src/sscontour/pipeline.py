"""Stage functions shared by the command-line driver and the demos."""

from __future__ import annotations

import numpy as np

from .forest.train import ForestConfig, labeled_token_set, unlabeled_token_set
from .sparse import TokenDictionary, combine_dictionaries, learn_dictionary


def dictionary_patches(labeled, unlabeled, weak_labeled, weak_unlabeled, config: ForestConfig,
                       per_class: int, seed: int):
    """Foreground and background 4-channel patches (r, g, b, weak contour).

    Half of each class comes from labeled images (ground-truth sampling), the
    rest from unlabeled images (weak-detector confidence); when there are no
    unlabeled images every patch comes from the labeled set.
    """
    n_l = per_class if not unlabeled else (per_class + 1) // 2
    n_u = per_class - n_l
    fc = config.feature_config
    out = []
    for cls, (counts_l, counts_u) in enumerate((((n_l, 0), (n_u, 0)), ((0, n_l), (0, n_u)))):
        parts = [labeled_token_set(labeled, fc, counts_l, seed + 101 + cls, weak_labeled).dict_patches()]
        if unlabeled and n_u:
            parts.append(unlabeled_token_set(unlabeled, weak_unlabeled, fc, counts_u, config.thresholds,
                                             seed + 202 + cls).dict_patches())
        out.append(_nonzero(np.concatenate(parts)))
    return out[0], out[1]


def _nonzero(patches: np.ndarray) -> np.ndarray:
    return patches[np.linalg.norm(patches, axis=1) > 0]


def learn_token_dictionary(fg_patches, bg_patches, atoms_per_class: int = 256, k_train: int = 3,
                           k: int = 6, iterations: int = 30, incoherence_weight: float = 0.1,
                           seed: int = 0, callback=None) -> TokenDictionary:
    """Learn background and foreground dictionaries separately and stack them (background first)."""
    bg = learn_dictionary(bg_patches, atoms_per_class, k_train, iterations, incoherence_weight,
                          rng_seed=seed, callback=callback)
    fg = learn_dictionary(fg_patches, atoms_per_class, k_train, iterations, incoherence_weight,
                          rng_seed=seed + 1, callback=callback)
    return combine_dictionaries(bg, fg, k)


def split_corpus(items, n_labeled: int, rng_seed: int = 0):
    """Seeded shuffle; the first ``n_labeled`` items are labeled, the rest unlabeled."""
    items = list(items)
    if not 0 <= n_labeled <= len(items):
        raise ValueError(f"n_labeled={n_labeled} but the corpus has {len(items)} images")
    order = np.random.default_rng(rng_seed).permutation(len(items))
    shuffled = [items[i] for i in order]
    return shuffled[:n_labeled], shuffled[n_labeled:]
