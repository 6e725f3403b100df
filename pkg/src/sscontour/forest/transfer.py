"""Structured label transfer from l-tokens to u-tokens by cosine nearest neighbour."""

from __future__ import annotations

import numpy as np

from .svm import as_sparse_rows


def _dense(idx: np.ndarray, val: np.ndarray, n_atoms: int) -> np.ndarray:
    out = np.zeros((idx.shape[0], n_atoms))
    np.add.at(out, (np.arange(idx.shape[0])[:, None], idx), val)
    return out


def cosine_distances(u_codes, pool_codes, n_atoms: int) -> np.ndarray:
    """(n_u, n_pool) cosine distances; a zero-norm code is at distance 1 from everything."""
    ui, uv = as_sparse_rows(u_codes)
    pool = _dense(*as_sparse_rows(pool_codes), n_atoms)
    pool_t = pool.T  # (V, n_pool)
    sim = np.zeros((ui.shape[0], pool.shape[0]))
    for j in range(ui.shape[1]):
        sim += uv[:, j, None] * pool_t[ui[:, j]]
    u_norm = np.sqrt(np.einsum("ij,ij->i", uv, uv))
    p_norm = np.linalg.norm(pool, axis=1)
    denom = u_norm[:, None] * p_norm[None, :]
    cos = np.divide(sim, denom, out=np.zeros_like(sim), where=denom > 0)
    return 1.0 - cos


def transfer_structured_labels(u_codes, u_classes, pool_codes, pool_labels, pool_classes,
                               pool_subset_size: int = 256, rng_seed=0, n_atoms: int = None):
    """Give each u-token the label of its nearest same-class pool entry.

    For each class a random subset of at most ``pool_subset_size`` pool
    entries is drawn once per call and shared by that class's u-tokens.
    Returns ``(labels, matched)`` where ``matched`` indexes the pool.
    """
    ui, uv = as_sparse_rows(u_codes)
    pi, pv = as_sparse_rows(pool_codes)
    u_classes = np.asarray(u_classes, dtype=np.int64)
    pool_classes = np.asarray(pool_classes, dtype=np.int64)
    pool_labels = np.asarray(pool_labels, dtype=bool)
    if n_atoms is None:
        n_atoms = int(max(ui.max(initial=0), pi.max(initial=0))) + 1
    rng = np.random.default_rng(rng_seed)
    matched = np.full(len(u_classes), -1, dtype=np.int64)
    for c in np.unique(u_classes):
        members = np.flatnonzero(pool_classes == c)
        if len(members) == 0:
            raise ValueError(f"no pool entries of class {c}")
        subset = rng.permutation(members)[:pool_subset_size]
        who = np.flatnonzero(u_classes == c)
        dist = cosine_distances((ui[who], uv[who]), (pi[subset], pv[subset]), n_atoms)
        matched[who] = subset[np.argmin(dist, axis=1)]
    return pool_labels[matched], matched
