"""Structured decision trees and semi-supervised node splitting.

Trees are stored as flat preorder arrays: ``feature[i] < 0`` marks a leaf,
whose structured prediction is ``leaf_masks[leaf_index[i]]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from ..tokens import TokenSet, pi_map
from .split import MIN_GAIN, SplitParams, best_split_columns, leaf_representative
from .svm import estimate_u_probs, train_weighted_svm
from .transfer import transfer_structured_labels


@dataclass
class TreeParams:
    max_depth: int = 64
    min_samples: int = 8
    n_features: Optional[int] = None  # None -> sqrt(feature_dim)
    min_l_tokens: int = 10
    pool_subset_size: int = 256
    n_pairs: int = 256
    svm_epochs: int = 10
    svm_step: float = 0.1
    svm_regularization: float = 1e-3
    svm_batch: int = 32


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_index: np.ndarray
    leaf_masks: np.ndarray
    support: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_masks)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max()) if self.n_nodes else 0

    def apply(self, n: int, lookup) -> np.ndarray:
        """Leaf ids of n tokens; ``lookup(token_ids, feature_ids)`` returns feature values."""
        node = np.zeros(n, dtype=np.int64)
        active = np.arange(n)
        while len(active):
            feats = self.feature[node[active]]
            keep = feats >= 0
            active = active[keep]
            if not len(active):
                break
            cur = node[active]
            vals = lookup(active, self.feature[cur])
            go_left = vals < self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
        return self.leaf_index[node]


@dataclass
class Leaf:
    prediction: np.ndarray
    support_count: int


@dataclass
class Split:
    params: SplitParams
    gain: float
    left_rows: np.ndarray
    right_rows: np.ndarray
    promoted: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


NodeDecision = Union[Leaf, Split]


class NodeState:
    """Per-tree working state of the u-tokens, refreshed at every node."""

    def __init__(self, tokens: TokenSet):
        n = len(tokens)
        self.prob = np.full(n, np.nan)
        self.labels = np.zeros((n, tokens.m, tokens.m), dtype=bool)
        self.has_label = np.zeros(n, dtype=bool)


def _node_seeds(tree_seed: int, node_id: int):
    rng = np.random.default_rng([tree_seed, node_id])
    return rng, [int(s) for s in rng.integers(0, 2**63 - 1, size=5)]


def _leaf(tokens: TokenSet, rows: np.ndarray, state: Optional[NodeState], extra=None) -> Leaf:
    lab = rows[tokens.is_labeled[rows]]
    if len(lab):
        return Leaf(leaf_representative(tokens.labels[lab]), len(rows))
    if extra is not None and len(extra):
        return Leaf(leaf_representative(extra), len(rows))
    if state is not None:
        known = rows[state.has_label[rows]]
        if len(known):
            return Leaf(leaf_representative(state.labels[known]), len(rows))
    return Leaf(np.zeros((tokens.m, tokens.m), dtype=bool), len(rows))


def _n_candidates(params: TreeParams, feature_dim: int) -> int:
    k = params.n_features or int(round(np.sqrt(feature_dim)))
    return max(1, min(k, feature_dim))


def _split_rows(tokens, rows, labels, weights, rng, params) -> Optional[Split]:
    dim = tokens.feature_dim
    cand = np.sort(rng.choice(dim, size=_n_candidates(params, dim), replace=False))
    values = tokens.features(rows, cand)
    best, gain = best_split_columns(values, labels, weights, cand)
    if best is None or gain <= MIN_GAIN:
        return None
    col = values[:, int(np.searchsorted(cand, best.feature))]
    go_left = col < best.threshold
    return Split(best, gain, rows[go_left], rows[~go_left])


def split_node_supervised(tokens: TokenSet, rows: np.ndarray, depth: int, params: TreeParams,
                          tree_seed: int, node_id: int) -> NodeDecision:
    """Plain structured-forest split of labeled tokens (Gini over Pi classes)."""
    rng, (pi_seed, *_) = _node_seeds(tree_seed, node_id)
    if depth >= params.max_depth or len(rows) < params.min_samples:
        return _leaf(tokens, rows, None)
    classes = pi_map(tokens.labels[rows], 2, params.n_pairs, pi_seed)
    if np.all(classes == classes[0]):
        return _leaf(tokens, rows, None)
    split = _split_rows(tokens, rows, classes, np.ones(len(rows)), rng, params)
    return split if split is not None else _leaf(tokens, rows, None)


def _svm_and_transfer(tokens, l_rows, l_labels, l_classes, u_rows, params, svm_seed, transfer_seed,
                      state, n_atoms):
    """Estimate u-token classes with the weighted SVM and transfer structured labels."""
    if tokens.code_idx is None:
        raise ValueError("u-tokens present but tokens carry no sparse codes")
    l_codes = (tokens.code_idx[l_rows], tokens.code_val[l_rows])
    u_codes = (tokens.code_idx[u_rows], tokens.code_val[u_rows])
    hp = train_weighted_svm(l_codes, l_classes, epochs=params.svm_epochs, step=params.svm_step,
                            regularization=params.svm_regularization, rng_seed=svm_seed,
                            n_atoms=n_atoms, batch_size=params.svm_batch)
    p = estimate_u_probs(hp, u_codes)
    u_cls = np.where(p >= 0.5, 1, 2)
    moved, _ = transfer_structured_labels(u_codes, u_cls, l_codes, l_labels, l_classes,
                                          params.pool_subset_size, transfer_seed, n_atoms)
    state.prob[u_rows] = p
    state.labels[u_rows] = moved
    state.has_label[u_rows] = True
    return p, u_cls


def _estimate_from(tokens, l_rows, l_labels, u_rows, params, pi_seed, svm_seed, transfer_seed,
                   state, n_atoms):
    classes = pi_map(l_labels, 2, params.n_pairs, pi_seed)
    if np.all(classes == classes[0]):
        # one class only: nearest l-token label, no probability
        if tokens.code_idx is None:
            raise ValueError("u-tokens present but tokens carry no sparse codes")
        moved, _ = transfer_structured_labels(
            (tokens.code_idx[u_rows], tokens.code_val[u_rows]), np.full(len(u_rows), classes[0]),
            (tokens.code_idx[l_rows], tokens.code_val[l_rows]), l_labels, classes,
            params.pool_subset_size, transfer_seed, n_atoms)
        state.prob[u_rows] = np.nan
        state.labels[u_rows] = moved
        state.has_label[u_rows] = True
        return
    _svm_and_transfer(tokens, l_rows, l_labels, classes, u_rows, params, svm_seed, transfer_seed,
                      state, n_atoms)


def split_node_semisupervised(tokens: TokenSet, rows: np.ndarray, depth: int, params: TreeParams,
                              tree_seed: int, node_id: int, state: NodeState,
                              n_atoms: Optional[int] = None) -> NodeDecision:
    """Split a node holding both l-tokens and u-tokens.

    When fewer than ``min_l_tokens`` l-tokens are present, those l-tokens
    first estimate classes and labels for the node's u-tokens (without any
    l-token the estimates inherited from ancestors are used) and the most
    confident u-tokens stand in as l-tokens.  A weighted SVM on the sparse codes of the (promoted)
    l-tokens, labelled by Pi, estimates the class of the remaining u-tokens;
    each of those then receives the structured label of its nearest
    same-class l-token.  The split is chosen by weighted Gini over all
    tokens, a u-token weighing ``confidence * max(p, 1 - p)``.
    """
    rng, (pi_seed, svm_seed, transfer_seed, pre_svm_seed, pre_transfer_seed) = _node_seeds(tree_seed, node_id)
    if depth >= params.max_depth or len(rows) < params.min_samples:
        return _leaf(tokens, rows, state)

    is_l = tokens.is_labeled[rows]
    lab, unl = rows[is_l], rows[~is_l]
    promoted = np.zeros(0, dtype=np.int64)
    if len(lab) < params.min_l_tokens and len(unl):
        if len(lab):
            # fresh estimates from the few l-tokens decide whom to promote
            _estimate_from(tokens, lab, tokens.labels[lab], unl, params, pi_seed, pre_svm_seed,
                           pre_transfer_seed, state, n_atoms)
        cand = unl[state.has_label[unl]]
        p = state.prob[cand]
        score = np.where(np.isnan(p), tokens.confidence[cand], np.maximum(p, 1.0 - p))
        promoted = cand[np.argsort(-score, kind="stable")[:params.min_l_tokens - len(lab)]]
    eff_l = np.concatenate([lab, promoted])
    eff_labels = np.concatenate([tokens.labels[lab], state.labels[promoted]])
    if len(eff_l) == 0:
        return _leaf(tokens, rows, state)

    classes = pi_map(eff_labels, 2, params.n_pairs, pi_seed)
    if np.all(classes == classes[0]):
        return _leaf(tokens, rows, state, eff_labels)

    rest = unl[~np.isin(unl, promoted)]
    split_rows = np.concatenate([eff_l, rest])
    split_labels = np.concatenate([classes, np.zeros(len(rest), dtype=np.int64)])
    weights = np.ones(len(split_rows))
    if len(rest):
        p, u_cls = _svm_and_transfer(tokens, eff_l, eff_labels, classes, rest, params, svm_seed,
                                     transfer_seed, state, n_atoms)
        split_labels[len(eff_l):] = u_cls
        weights[len(eff_l):] = tokens.confidence[rest] * np.maximum(p, 1.0 - p)

    split = _split_rows(tokens, split_rows, split_labels, weights, rng, params)
    if split is None:
        return _leaf(tokens, rows, state, eff_labels)
    # route in the node's original order so both paths agree when no u-tokens exist
    left_set = np.isin(rows, split.left_rows)
    split.left_rows, split.right_rows = rows[left_set], rows[~left_set]
    split.promoted = promoted
    return split


class _TreeBuilder:
    def __init__(self, m: int):
        self.feature, self.threshold, self.left, self.right = [], [], [], []
        self.leaf_index, self.masks, self.support = [], [], []
        self.m = m

    def add(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.leaf_index.append(-1)
        return len(self.feature) - 1

    def finish(self) -> Tree:
        masks = np.array(self.masks, dtype=bool).reshape(-1, self.m, self.m)
        return Tree(np.array(self.feature, dtype=np.int64), np.array(self.threshold, dtype=np.float64),
                    np.array(self.left, dtype=np.int64), np.array(self.right, dtype=np.int64),
                    np.array(self.leaf_index, dtype=np.int64), masks,
                    np.array(self.support, dtype=np.int64))


def grow_tree(tokens: TokenSet, rows, params: TreeParams, tree_seed: int,
              semi_supervised: bool = True, n_atoms: Optional[int] = None) -> Tree:
    """Grow one tree on ``tokens[rows]``.

    ``semi_supervised=False`` takes the plain supervised path and ignores
    u-tokens entirely.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if not semi_supervised:
        rows = rows[tokens.is_labeled[rows]]
    if len(rows) == 0:
        raise ValueError("cannot grow a tree without tokens")
    builder = _TreeBuilder(tokens.m)
    state = NodeState(tokens) if semi_supervised else None
    stack = [(rows, 0, None, None)]  # rows, depth, parent, side
    while stack:
        node_rows, depth, parent, side = stack.pop()
        nid = builder.add()
        if parent is not None:
            (builder.left if side == 0 else builder.right)[parent] = nid
        if semi_supervised:
            decision = split_node_semisupervised(tokens, node_rows, depth, params, tree_seed, nid, state, n_atoms)
        else:
            decision = split_node_supervised(tokens, node_rows, depth, params, tree_seed, nid)
        if isinstance(decision, Leaf):
            builder.leaf_index[nid] = len(builder.masks)
            builder.masks.append(decision.prediction)
            builder.support.append(decision.support_count)
            continue
        builder.feature[nid] = decision.params.feature
        builder.threshold[nid] = decision.params.threshold
        # right pushed first so the left subtree is numbered first (preorder)
        stack.append((decision.right_rows, depth + 1, nid, 1))
        stack.append((decision.left_rows, depth + 1, nid, 0))
    return builder.finish()
