"""Weighted linear SVM over sparse token codes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


@dataclass
class Hyperplane:
    weights: np.ndarray
    bias: float

    def decision(self, codes) -> np.ndarray:
        idx, val = as_sparse_rows(codes, len(self.weights))
        return np.einsum("ij,ij->i", val, self.weights[idx]) + self.bias


def as_sparse_rows(codes, n_atoms: int = None):
    """Normalise codes to ``(idx, val)`` arrays of shape (n, K).

    Accepts an ``(idx, val)`` pair, a list of SparseCode, or a dense (n, V)
    matrix.
    """
    if isinstance(codes, tuple) and len(codes) == 2:
        idx, val = codes
        return np.asarray(idx, dtype=np.int64), np.asarray(val, dtype=np.float64)
    if isinstance(codes, np.ndarray):
        dense = np.asarray(codes, dtype=np.float64)
        n, V = dense.shape
        return np.tile(np.arange(V), (n, 1)), dense
    codes = list(codes)
    if not codes:
        return np.zeros((0, 0), dtype=np.int64), np.zeros((0, 0))
    width = max(len(c.indices) for c in codes)
    idx = np.zeros((len(codes), width), dtype=np.int64)
    val = np.zeros((len(codes), width))
    for i, c in enumerate(codes):
        idx[i, :len(c.indices)] = c.indices
        val[i, :len(c.values)] = c.values
    return idx, val


def train_weighted_svm(codes, labels, class_weights=None, epochs: int = 10, step: float = 0.1,
                       regularization: float = 1e-3, rng_seed=0, n_atoms: int = None,
                       batch_size: int = 32, sample_weights=None) -> Hyperplane:
    """Minimise ``reg/2 ||w||^2 + mean_i omega_i * hinge(y_i (w.c_i + b))``.

    Class 1 is the positive side.  ``class_weights`` maps class id -> weight
    and defaults to inverse class frequency; per-sample weights are
    rescaled to mean 1.  Optimisation is mini-batch subgradient descent over
    a freshly shuffled order each epoch with step ``step / (1 + step * reg * t)``.
    """
    idx, val = as_sparse_rows(codes, n_atoms)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n != idx.shape[0]:
        raise ValueError("codes and labels differ in length")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("SVM training needs both classes")
    if n_atoms is None:
        n_atoms = int(idx.max()) + 1 if idx.size else 1
    y = np.where(labels == 1, 1.0, -1.0)
    if class_weights is None:
        class_weights = {int(c): n / (2.0 * np.sum(labels == c)) for c in classes}
    omega = np.array([class_weights[int(c)] for c in labels], dtype=np.float64)
    if sample_weights is not None:
        omega = omega * np.asarray(sample_weights, dtype=np.float64)
    omega = omega * (n / omega.sum())

    rng = np.random.default_rng(rng_seed)
    w = np.zeros(n_atoms)
    b = 0.0
    t = 0
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = perm[start:start + batch_size]
            bi, bv, by, bw = idx[batch], val[batch], y[batch], omega[batch]
            margin = by * (np.einsum("ij,ij->i", bv, w[bi]) + b)
            active = margin < 1.0
            eta = step / (1.0 + step * regularization * t)
            coeff = np.where(active, bw * by, 0.0) / len(batch)
            push = np.bincount(bi.ravel(), weights=(coeff[:, None] * bv).ravel(), minlength=n_atoms)
            w = w - eta * (regularization * w - push)
            b = b + eta * coeff.sum()
            t += 1
    return Hyperplane(w, float(b))


def hinge_loss(hp: Hyperplane, codes, labels) -> float:
    y = np.where(np.asarray(labels) == 1, 1.0, -1.0)
    return float(np.mean(np.maximum(0.0, 1.0 - y * hp.decision(codes))))


def estimate_u_probs(hp: Hyperplane, u_codes) -> np.ndarray:
    """Sigmoid of the signed distance score; class 1 iff the probability is >= 0.5."""
    return expit(hp.decision(u_codes))
