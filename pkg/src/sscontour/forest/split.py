"""Impurity, threshold search and leaf summaries for structured trees."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_GAIN = 1e-12


@dataclass(frozen=True)
class SplitParams:
    """Weak learner ``x[feature] < threshold`` sends a token left."""

    feature: int
    threshold: float


def gini(class_counts) -> float:
    counts = np.asarray(class_counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("Gini impurity of an empty node is undefined")
    p = counts / total
    return float(np.sum(p * (1.0 - p)))


def _gini_rows(counts: np.ndarray, totals: np.ndarray) -> np.ndarray:
    p = counts / totals[:, None]
    return np.sum(p * (1.0 - p), axis=1)


def best_split_columns(values: np.ndarray, labels: np.ndarray, weights: np.ndarray,
                       feature_ids, n_classes: int = 2):
    """Scan every threshold of every column of ``values``.

    ``values`` is (n, c) with column j holding feature ``feature_ids[j]``;
    ``labels`` are classes 1..n_classes.  Returns ``(SplitParams or None,
    gain)``; ties keep the lower feature id, then the lower threshold.
    """
    values = np.asarray(values)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    n = len(labels)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), labels - 1] = weights
    parent = onehot.sum(axis=0)
    total = parent.sum()
    if total <= 0:
        return None, 0.0
    g_parent = gini(parent)

    order_ids = np.argsort(np.asarray(feature_ids), kind="stable")
    best, best_gain = None, 0.0
    for j in order_ids:
        col = values[:, j]
        order = np.argsort(col, kind="stable")
        v = col[order].astype(np.float64)
        valid = np.flatnonzero(v[:-1] < v[1:])
        if len(valid) == 0:
            continue
        left = np.cumsum(onehot[order], axis=0)[valid]
        right = parent - left
        wl = left.sum(axis=1)
        wr = right.sum(axis=1)
        ok = (wl > 0) & (wr > 0)
        if not ok.any():
            continue
        valid, left, right, wl, wr = valid[ok], left[ok], right[ok], wl[ok], wr[ok]
        gain = g_parent - (wl / total) * _gini_rows(left, wl) - (wr / total) * _gini_rows(right, wr)
        i = int(np.argmax(gain))
        if gain[i] > best_gain:
            pos = valid[i]
            best = SplitParams(int(feature_ids[j]), float((v[pos] + v[pos + 1]) / 2.0))
            best_gain = float(gain[i])
    return best, best_gain


def find_best_split(X, labels, weights=None, candidates=None, n_classes: int = 2):
    """Best ``(SplitParams, info_gain)`` over the candidate feature indices of X.

    The gain is G(parent) - sum over children of (W_child / W_parent) *
    G(child) with sample weights W.  Returns ``(None, 0.0)`` when no
    threshold separates the samples.
    """
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[:, None]
    labels = np.asarray(labels)
    if len(labels) < 2:
        raise ValueError("need at least two samples")
    if weights is None:
        weights = np.ones(len(labels))
    if candidates is None:
        candidates = np.arange(X.shape[1])
    candidates = np.asarray(candidates, dtype=np.int64)
    if len(candidates) == 0:
        raise ValueError("candidate feature set is empty")
    return best_split_columns(X[:, candidates], labels, weights, candidates, n_classes)


def leaf_representative(labels) -> np.ndarray:
    """Medoid under Hamming distance; the first label wins ties."""
    labels = np.asarray(labels, dtype=bool)
    if labels.shape[0] == 0:
        raise ValueError("no labels to summarise")
    n = labels.shape[0]
    flat = labels.reshape(n, -1)
    ones = flat.sum(axis=0).astype(np.int64)
    cost = flat.astype(np.int64) @ (n - 2 * ones) + ones.sum()
    return labels[int(np.argmin(cost))].copy()
