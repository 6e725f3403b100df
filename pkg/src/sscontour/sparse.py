"""Token dictionaries and sparse coding.

``fast_sparse_code`` picks the K atoms whose individual least-squares fit to
the target has the largest coefficient magnitude and then solves a small
ridge problem on that support.  It has no iterations, so its cost is one
d x V product plus a K x K solve.  ``omp_sparse_code`` is the greedy
orthogonal matching pursuit baseline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import FormatError

DICT_MAGIC = b"SSCDICT\0"
DICT_VERSION = 1
DEFAULT_LAMBDA = 1e-4


@dataclass
class TokenDictionary:
    """Unit-norm atoms as the columns of a (d, V) matrix.

    Columns ``[0, split)`` model background tokens and ``[split, V)``
    foreground tokens.
    """

    atoms: np.ndarray
    split: Optional[int] = None
    k_train: int = 3
    k: int = 6

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        if self.atoms.ndim != 2:
            raise ValueError("atoms must be a (d, V) matrix")
        if self.split is None:
            self.split = self.n_atoms
        if not 0 <= self.split <= self.n_atoms:
            raise ValueError("split index out of range")

    @property
    def dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]

    @property
    def bg_range(self) -> range:
        return range(0, self.split)

    @property
    def fg_range(self) -> range:
        return range(self.split, self.n_atoms)

    def atom(self, i: int) -> np.ndarray:
        return self.atoms[:, i]


@dataclass
class SparseCode:
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)

    def dense(self, n_atoms: int) -> np.ndarray:
        out = np.zeros(n_atoms)
        out[self.indices] = self.values
        return out


def _atoms(M) -> np.ndarray:
    return M.atoms if isinstance(M, TokenDictionary) else np.asarray(M, dtype=np.float64)


def combine_dictionaries(background: TokenDictionary, foreground: TokenDictionary, k: int = 6) -> TokenDictionary:
    """Stack background then foreground atoms into one coding dictionary."""
    if background.dim != foreground.dim:
        raise ValueError("dictionaries differ in atom length")
    atoms = np.hstack([background.atoms, foreground.atoms])
    return TokenDictionary(atoms, split=background.n_atoms, k_train=background.k_train, k=k)


def selection_scores(x: np.ndarray, M) -> np.ndarray:
    """Per-atom least-squares coefficient magnitude |m_v^T x| / (m_v^T m_v)."""
    A = _atoms(M)
    return np.abs(A.T @ x) / np.einsum("ij,ij->j", A, A)


def fast_sparse_code(x, M, K: int, lam: float = DEFAULT_LAMBDA) -> SparseCode:
    A = _atoms(M)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (A.shape[0],):
        raise ValueError(f"target has shape {x.shape}, dictionary expects ({A.shape[0]},)")
    if not 0 < K <= A.shape[1]:
        raise ValueError(f"K must be in [1, {A.shape[1]}]")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    scores = selection_scores(x, A)
    support = np.sort(np.argsort(-scores, kind="stable")[:K])
    Ms = A[:, support]
    gram = Ms.T @ Ms + lam * np.eye(K)
    values = np.linalg.solve(gram, Ms.T @ x)
    return SparseCode(support, values)


def fast_sparse_code_batch(X, M, K: int, lam: float = DEFAULT_LAMBDA, chunk: int = 4096):
    """Vectorised fast coding of the rows of X; returns (indices, values), each (n, K)."""
    A = _atoms(M)
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if X.ndim != 2 or X.shape[1] != A.shape[0]:
        raise ValueError("targets must be an (n, d) array matching the dictionary")
    inv_sq = 1.0 / np.einsum("ij,ij->j", A, A)
    gram = A.T @ A
    eye = lam * np.eye(K)
    idx = np.empty((n, K), dtype=np.int64)
    val = np.empty((n, K), dtype=np.float64)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        proj = X[start:stop] @ A
        scores = np.abs(proj) * inv_sq
        sel = np.sort(np.argsort(-scores, axis=1, kind="stable")[:, :K], axis=1)
        rows = np.arange(stop - start)[:, None]
        G = gram[sel[:, :, None], sel[:, None, :]] + eye
        b = proj[rows, sel]
        idx[start:stop] = sel
        val[start:stop] = np.linalg.solve(G, b[..., None])[..., 0]
    return idx, val


def omp_sparse_code(x, M, K: int, tol: float = 0.0) -> SparseCode:
    """Orthogonal matching pursuit with at most K atoms.

    Stops early once the squared residual drops to ``tol``.
    """
    A = _atoms(M)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (A.shape[0],):
        raise ValueError(f"target has shape {x.shape}, dictionary expects ({A.shape[0]},)")
    if not 0 < K <= A.shape[1]:
        raise ValueError(f"K must be in [1, {A.shape[1]}]")
    support: list[int] = []
    coef = np.zeros(0)
    residual = x.copy()
    for _ in range(K):
        if residual @ residual <= tol:
            break
        corr = np.abs(A.T @ residual)
        corr[support] = -1.0
        support.append(int(np.argmax(corr)))
        Ms = A[:, support]
        coef = np.linalg.solve(Ms.T @ Ms, Ms.T @ x)
        residual = x - Ms @ coef
    order = np.argsort(support)
    return SparseCode(np.asarray(support, dtype=np.int64)[order], coef[order])


def omp_sparse_code_batch(X, M, K: int, chunk: int = 4096):
    """OMP over the rows of X, vectorised across targets; returns (indices, values)."""
    A = _atoms(M)
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    At = np.ascontiguousarray(A.T)
    gram = A.T @ A
    idx = np.empty((n, K), dtype=np.int64)
    val = np.empty((n, K), dtype=np.float64)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        Xc = X[start:stop]
        nc = stop - start
        rows = np.arange(nc)
        proj = Xc @ A
        R = Xc.copy()
        sel = np.empty((nc, 0), dtype=np.int64)
        chosen = np.zeros((nc, A.shape[1]), dtype=bool)
        coef = np.zeros((nc, 0))
        for k in range(K):
            corr = np.abs(R @ A)
            corr[chosen] = -1.0
            new = np.argmax(corr, axis=1)
            chosen[rows, new] = True
            sel = np.concatenate([sel, new[:, None]], axis=1)
            # jitter keeps the solve defined when duplicate atoms are picked
            G = gram[sel[:, :, None], sel[:, None, :]] + 1e-12 * np.eye(k + 1)
            b = proj[rows[:, None], sel]
            coef = np.linalg.solve(G, b[..., None])[..., 0]
            R = Xc.copy()
            for j in range(k + 1):
                R -= coef[:, j, None] * At[sel[:, j]]
        order = np.argsort(sel, axis=1)
        idx[start:stop] = np.take_along_axis(sel, order, axis=1)
        val[start:stop] = np.take_along_axis(coef, order, axis=1)
    return idx, val


def reconstruct(M, code: SparseCode) -> np.ndarray:
    A = _atoms(M)
    idx = np.asarray(code.indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= A.shape[1]):
        raise IndexError("code refers to atoms outside the dictionary")
    return A[:, idx] @ np.asarray(code.values, dtype=np.float64)


def reconstruct_batch(M, idx: np.ndarray, val: np.ndarray) -> np.ndarray:
    At = _atoms(M).T
    out = np.zeros((idx.shape[0], At.shape[1]))
    for j in range(idx.shape[1]):
        out += val[:, j, None] * At[idx[:, j]]
    return out


def _residual_sq(X, At, idx, val) -> np.ndarray:
    R = X.copy()
    for j in range(idx.shape[1]):
        R -= val[:, j, None] * At[idx[:, j]]
    return np.einsum("ij,ij->i", R, R)


def learn_dictionary(patches, V: int, K: int = 3, iterations: int = 30,
                     incoherence_weight: float = 0.1, rng_seed=0,
                     callback: Optional[Callable[[int, np.ndarray, float], None]] = None) -> TokenDictionary:
    """K-SVD with a mutual-incoherence step after each atom update.

    Each iteration re-codes every patch with OMP (keeping the previous code
    when it reconstructs better), then sweeps the atoms: rank-1 SVD update
    of the atom and its coefficients, an optional gradient step on
    ``sum_{i != j} |m_i^T m_j|`` with the coefficients refit, and
    re-normalisation.  Atoms no patch uses are replaced by the worst
    reconstructed patches.  ``callback(iteration, atoms, objective)`` is
    called after every iteration with ``objective = ||X - MC||_F^2``.
    """
    X = np.asarray(patches, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("patches must be an (n, d) array")
    n, d = X.shape
    if n < V:
        raise ValueError(f"need at least V={V} patches, got {n}")
    if K > V:
        raise ValueError("K cannot exceed V")
    rng = np.random.default_rng(rng_seed)
    norms = np.linalg.norm(X, axis=1)
    nonzero = np.flatnonzero(norms > 0)
    if len(nonzero) < V:
        raise ValueError("fewer non-zero patches than atoms")
    init = np.sort(rng.choice(nonzero, size=V, replace=False))
    At = X[init] / norms[init, None]  # atoms as rows while learning

    idx = val = None
    for it in range(iterations):
        new_idx, new_val = omp_sparse_code_batch(X, At.T, K)
        if idx is None:
            idx, val = new_idx, new_val
        else:
            better = _residual_sq(X, At, new_idx, new_val) <= _residual_sq(X, At, idx, val)
            idx[better], val[better] = new_idx[better], new_val[better]

        slot_rows, slot_cols = np.divmod(np.arange(idx.size), K)
        order = np.argsort(idx.ravel(), kind="stable")
        sorted_atoms = idx.ravel()[order]
        bounds = np.searchsorted(sorted_atoms, np.arange(V + 1))
        unused = []
        for k in range(V):
            slots = order[bounds[k]:bounds[k + 1]]
            if len(slots) == 0:
                unused.append(k)
                continue
            users, cols = slot_rows[slots], slot_cols[slots]
            E = X[users].copy()
            for j in range(K):
                E -= val[users, j, None] * At[idx[users, j]]
            E += val[users, cols, None] * At[k]
            u, s, vt = np.linalg.svd(E, full_matrices=False)
            atom = vt[0]
            coef = s[0] * u[:, 0]
            if coef.sum() < 0:  # fix the SVD sign so atoms point along their data
                atom, coef = -atom, -coef
            if incoherence_weight > 0 and V > 1:
                dots = At @ atom
                dots[k] = 0.0
                grad = np.sign(dots) @ At / (V - 1)
                atom = atom - incoherence_weight * grad
                atom /= np.linalg.norm(atom)
                coef = E @ atom
            At[k] = atom
            val[users, cols] = coef

        if unused:
            err = _residual_sq(X, At, idx, val)
            worst = np.argsort(-err, kind="stable")[:len(unused)]
            for k, p in zip(unused, worst):
                if norms[p] == 0:
                    raise ValueError("zero-norm patch selected for atom replacement")
                At[k] = X[p] / norms[p]

        if callback is not None:
            objective = float(_residual_sq(X, At, idx, val).sum())
            callback(it, At.T.copy(), objective)

    return TokenDictionary(np.ascontiguousarray(At.T), k_train=K, k=K)


def encode_tokens(tokens, dictionary: TokenDictionary, lam: float = DEFAULT_LAMBDA, chunk: int = 4096) -> None:
    """Attach fast sparse codes of every token's dictionary patch."""
    n = len(tokens)
    K = dictionary.k
    idx = np.empty((n, K), dtype=np.int64)
    val = np.empty((n, K), dtype=np.float64)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(n, start + chunk))
        idx[rows], val[rows] = fast_sparse_code_batch(tokens.dict_patches(rows), dictionary, K, lam)
    tokens.code_idx, tokens.code_val = idx, val


def save_dictionary(path, dictionary: TokenDictionary) -> None:
    """Header (magic, version, d, V, K_train, K, split) then float64 atoms column by column."""
    header = DICT_MAGIC + struct.pack("<HIIHHI", DICT_VERSION, dictionary.dim, dictionary.n_atoms,
                                      dictionary.k_train, dictionary.k, dictionary.split)
    Path(path).write_bytes(header + np.ascontiguousarray(dictionary.atoms.T).astype("<f8").tobytes())


def load_dictionary(path) -> TokenDictionary:
    data = Path(path).read_bytes()
    if data[:8] != DICT_MAGIC:
        raise FormatError(f"{path}: not a dictionary file")
    version, d, V, k_train, k, split = struct.unpack("<HIIHHI", data[8:26])
    if version != DICT_VERSION:
        raise FormatError(f"{path}: dictionary version {version}, expected {DICT_VERSION}")
    atoms = np.frombuffer(data, dtype="<f8", offset=26, count=d * V).reshape(V, d).T
    return TokenDictionary(atoms.astype(np.float64), split=split, k_train=k_train, k=k)
