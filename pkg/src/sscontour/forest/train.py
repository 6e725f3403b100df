"""Forest training: token assembly, bagging and the weak detector."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ..features import RAW_IMAGE, WEAK_DETECTOR, FeatureConfig, compute_channels
from ..io import union_mask
from ..sparse import DEFAULT_LAMBDA, TokenDictionary, encode_tokens
from ..tokens import LABELED, UNLABELED, TokenSet, sample_tokens, straddle_map
from .model import Forest
from .tree import TreeParams, grow_tree


@dataclass
class ForestConfig:
    n_trees: int = 10
    feature_config: FeatureConfig = field(default_factory=lambda: FeatureConfig(gradient_source=WEAK_DETECTOR))
    labeled_tokens: tuple[int, int] = (100_000, 100_000)  # (foreground, background), whole corpus
    unlabeled_tokens: tuple[int, int] = (100_000, 100_000)
    thresholds: tuple[float, float] = (0.7, 0.2)
    bagging: float = 0.5
    tree: TreeParams = field(default_factory=TreeParams)
    lam: float = DEFAULT_LAMBDA
    stride: int = 2
    weak_scales: tuple[float, ...] = (1.0,)
    seed: int = 0
    threads: int = 1


def even_counts(total: int, capacities: Sequence[int]) -> list[int]:
    """Split ``total`` as evenly as possible over the entries with capacity > 0."""
    caps = np.asarray(capacities)
    live = np.flatnonzero(caps > 0)
    out = np.zeros(len(caps), dtype=np.int64)
    if total <= 0 or len(live) == 0:
        return out.tolist()
    base, extra = divmod(int(total), len(live))
    out[live] = base
    out[live[:extra]] += 1
    return out.tolist()


def _seed(master: int, *path: int) -> int:
    return int(np.random.default_rng([master, *path]).integers(0, 2**63 - 1))


def labeled_token_set(labeled, feature_config: FeatureConfig, counts, seed: int,
                      weak_maps=None, m: Optional[int] = None) -> TokenSet:
    """l-tokens spread evenly over ``labeled``, a list of (image, annotator masks).

    ``weak_maps`` (one per image) feed the gradient channels and the
    contour channel of dictionary patches; without them the features use
    raw-image gradients and no dictionary patches are stored.
    """
    m = m or feature_config.patch_size
    truths = [union_mask(masks, np.asarray(img).shape[:2]) for img, masks in labeled]
    fg_caps = [int(straddle_map(t).sum()) for t in truths]
    bg_caps = [t.size - c for t, c in zip(truths, fg_caps)]
    n_fg = even_counts(counts[0], fg_caps)
    n_bg = even_counts(counts[1], bg_caps)
    sets = []
    for i, ((img, _), gt) in enumerate(zip(labeled, truths)):
        wm = None if weak_maps is None else weak_maps[i]
        channels = compute_channels(img, feature_config, wm if feature_config.gradient_source == WEAK_DETECTOR else None)
        sets.append(sample_tokens(img, channels, gt, (n_fg[i], n_bg[i]), LABELED,
                                  rng_seed=_seed(seed, 1, i), contour_map=wm,
                                  source_name=f"labeled_{i}", m=m))
    return TokenSet.concatenate(sets, m)


def unlabeled_token_set(images, weak_maps, feature_config: FeatureConfig, counts, thresholds,
                        seed: int) -> TokenSet:
    """u-tokens sampled where the weak detector is confident, evenly over ``images``."""
    m = feature_config.patch_size
    hi, lo = thresholds
    fg_caps = [int((np.asarray(w) >= hi).sum()) for w in weak_maps]
    bg_caps = [int((np.asarray(w) <= lo).sum()) for w in weak_maps]
    n_fg = even_counts(counts[0], fg_caps)
    n_bg = even_counts(counts[1], bg_caps)
    sets = []
    for i, (img, wm) in enumerate(zip(images, weak_maps)):
        if n_fg[i] == 0 and n_bg[i] == 0:
            continue
        channels = compute_channels(img, feature_config, wm)
        sets.append(sample_tokens(img, channels, wm, (n_fg[i], n_bg[i]), UNLABELED, thresholds,
                                  rng_seed=_seed(seed, 2, i), source_name=f"unlabeled_{i}", m=m))
    return TokenSet.concatenate(sets, m)


def _grow_one(args):
    tokens, rows, params, tree_seed, semi, n_atoms = args
    return grow_tree(tokens, rows, params, tree_seed, semi, n_atoms)


def train_forest_from_tokens(tokens: TokenSet, config: ForestConfig,
                             dictionary: Optional[TokenDictionary] = None,
                             semi_supervised: bool = True) -> Forest:
    """Grow ``config.n_trees`` trees, each on its own bagged subset of ``tokens``."""
    if tokens.n_labeled == 0:
        raise ValueError("training needs at least one labeled token")
    l_rows = np.flatnonzero(tokens.is_labeled)
    u_rows = np.flatnonzero(~tokens.is_labeled) if semi_supervised else np.zeros(0, dtype=np.int64)
    n_atoms = None
    if len(u_rows):
        if dictionary is None:
            raise ValueError("u-tokens need a dictionary for sparse coding")
        if tokens.code_idx is None:
            encode_tokens(tokens, dictionary, config.lam)
        n_atoms = dictionary.n_atoms
    tokens._flat_buffer()  # build once before any worker threads read it

    jobs = []
    for t in range(config.n_trees):
        rng = np.random.default_rng([config.seed, 3, t])
        n_l = max(1, int(round(config.bagging * len(l_rows))))
        l_bag = np.sort(rng.choice(l_rows, size=n_l, replace=False))
        tree_seed = int(rng.integers(0, 2**63 - 1))
        rows = l_bag
        if len(u_rows):
            n_u = max(1, int(round(config.bagging * len(u_rows))))
            rows = np.concatenate([l_bag, np.sort(rng.choice(u_rows, size=n_u, replace=False))])
        jobs.append((tokens, rows, config.tree, tree_seed, semi_supervised, n_atoms))

    if config.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            trees = list(pool.map(_grow_one, jobs))
    else:
        trees = [_grow_one(j) for j in jobs]
    meta = {
        "seed": config.seed,
        "n_trees": config.n_trees,
        "n_labeled_tokens": int(len(l_rows)),
        "n_unlabeled_tokens": int(len(u_rows)),
    }
    return Forest(trees, config.feature_config, meta)


def weak_detector_maps(images, gamma: Forest, stride: int = 2, scales=(1.0,)) -> list[np.ndarray]:
    from ..detect import detect

    return [detect(img, gamma, scales=scales, stride=stride) for img in images]


def train_forest(labeled, unlabeled, config: ForestConfig, dictionary: Optional[TokenDictionary],
                 gamma: Forest, weak_maps_labeled=None, weak_maps_unlabeled=None) -> Forest:
    """Semi-supervised forest from labeled (image, masks) pairs and unlabeled images.

    The weak detector ``gamma`` provides gradient channels, the contour
    channel of dictionary patches and the u-token sampling confidence.  With
    no unlabeled images this is plain supervised training.
    """
    if not labeled:
        raise ValueError("training needs at least one labeled image")
    fc = config.feature_config
    if fc.gradient_source != WEAK_DETECTOR:
        raise ValueError("the semi-supervised forest takes its gradients from the weak detector")
    if weak_maps_labeled is None:
        weak_maps_labeled = weak_detector_maps([img for img, _ in labeled], gamma, config.stride, config.weak_scales)
    tokens = labeled_token_set(labeled, fc, config.labeled_tokens, config.seed, weak_maps_labeled)
    if unlabeled:
        if weak_maps_unlabeled is None:
            weak_maps_unlabeled = weak_detector_maps(unlabeled, gamma, config.stride, config.weak_scales)
        u_tokens = unlabeled_token_set(unlabeled, weak_maps_unlabeled, fc, config.unlabeled_tokens,
                                       config.thresholds, config.seed)
        tokens = TokenSet.concatenate([tokens, u_tokens])
    return train_forest_from_tokens(tokens, config, dictionary, semi_supervised=True)


def train_weak_detector(labeled, config: ForestConfig) -> Forest:
    """Supervised forest on raw-image gradients; it cannot depend on its own output."""
    if not labeled:
        raise ValueError("training needs at least one labeled image")
    fc = replace(config.feature_config, gradient_source=RAW_IMAGE)
    cfg = replace(config, feature_config=fc)
    tokens = labeled_token_set(labeled, fc, config.labeled_tokens, config.seed)
    return train_forest_from_tokens(tokens, cfg, None, semi_supervised=False)
