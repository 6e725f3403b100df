"""Token sampling and the structured-to-discrete label mapping.

Tokens are m x m windows centred on a pixel.  They are stored column-wise in a
:class:`TokenSet` which keeps only the centre coordinates and a reference to
the padded channel stack of the source image; feature values are gathered on
demand, so a node split only touches the handful of feature dimensions it
actually examines.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .errors import FormatError
from .features import ImageChannels, as_float_rgb, pad_planes

LABELED = "labeled"
UNLABELED = "unlabeled"

TOKEN_MAGIC = b"SSCTOKEN"
TOKEN_VERSION = 1


@dataclass
class Token:
    features: np.ndarray
    dict_patch: Optional[np.ndarray]
    label: Optional[np.ndarray]
    is_labeled: bool
    confidence: float
    source_image: str
    center: tuple[int, int]


class TokenSource:
    """Padded feature and dictionary planes of one image."""

    def __init__(self, name: str, channels: ImageChannels, m: int, dict_planes: Optional[np.ndarray] = None):
        self.name = name
        self.m = m
        self.height = channels.height
        self.width = channels.width
        self.planes = np.ascontiguousarray(pad_planes(channels.planes, m), dtype=np.float32)
        self.dict_planes = None
        if dict_planes is not None:
            if dict_planes.shape[1:] != (self.height, self.width):
                raise ValueError("dictionary planes do not match the channel stack")
            self.dict_planes = np.ascontiguousarray(pad_planes(dict_planes, m), dtype=np.float64)

    @property
    def n_planes(self) -> int:
        return self.planes.shape[0]


def dictionary_planes(image, contour_map) -> np.ndarray:
    """(4, H, W) planes r, g, b, contour used for dictionary patches."""
    rgb = as_float_rgb(image)
    contour = np.asarray(contour_map, dtype=np.float64)
    if contour.shape != rgb.shape[:2]:
        raise ValueError("contour map does not match image")
    return np.concatenate([rgb.transpose(2, 0, 1), contour[None]], axis=0)


class TokenSet:
    """Column-oriented collection of tokens drawn from one or more images."""

    def __init__(self, m: int, sources: Sequence[TokenSource], image_index, cy, cx,
                 is_labeled, confidence, labels):
        self.m = m
        self.sources = list(sources)
        self.image_index = np.asarray(image_index, dtype=np.int32)
        self.cy = np.asarray(cy, dtype=np.int32)
        self.cx = np.asarray(cx, dtype=np.int32)
        self.is_labeled = np.asarray(is_labeled, dtype=bool)
        self.confidence = np.asarray(confidence, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=bool).reshape(-1, m, m)
        n = len(self.image_index)
        for arr in (self.cy, self.cx, self.is_labeled, self.confidence, self.labels):
            if len(arr) != n:
                raise ValueError("token columns differ in length")
        if np.any((self.confidence < 0) | (self.confidence > 1)):
            raise ValueError("confidence must lie in [0, 1]")
        self.code_idx: Optional[np.ndarray] = None
        self.code_val: Optional[np.ndarray] = None
        self._flat = None

    @classmethod
    def empty(cls, m: int) -> "TokenSet":
        z = np.zeros(0)
        return cls(m, [], z, z, z, z, z, np.zeros((0, m, m), dtype=bool))

    def __len__(self) -> int:
        return len(self.image_index)

    @property
    def n_labeled(self) -> int:
        return int(self.is_labeled.sum())

    @property
    def feature_dim(self) -> int:
        if not self.sources:
            return 0
        return self.m * self.m * self.sources[0].n_planes

    def __getitem__(self, i: int) -> Token:
        src = self.sources[self.image_index[i]]
        y, x, m = int(self.cy[i]), int(self.cx[i]), self.m
        feats = src.planes[:, y:y + m, x:x + m].reshape(-1).copy()
        patch = None
        if src.dict_planes is not None:
            patch = src.dict_planes[:, y:y + m, x:x + m].reshape(-1).copy()
        label = self.labels[i].copy() if self.is_labeled[i] else None
        return Token(feats, patch, label, bool(self.is_labeled[i]),
                     float(self.confidence[i]), src.name, (y, x))

    def _flat_buffer(self):
        if self._flat is None:
            sizes = [s.planes.size for s in self.sources]
            base = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
            buf = np.concatenate([s.planes.ravel() for s in self.sources]) if self.sources else np.zeros(0, np.float32)
            plane_stride = np.array([s.planes.shape[1] * s.planes.shape[2] for s in self.sources], dtype=np.int64)
            row_stride = np.array([s.planes.shape[2] for s in self.sources], dtype=np.int64)
            self._flat = (buf, base, plane_stride, row_stride)
        return self._flat

    def features(self, rows, ks) -> np.ndarray:
        """Feature values, shape (len(rows), len(ks)), without materialising full vectors."""
        rows = np.asarray(rows, dtype=np.int64)
        ks = np.asarray(ks, dtype=np.int64)
        buf, base, plane_stride, row_stride = self._flat_buffer()
        mm = self.m * self.m
        plane, rem = np.divmod(ks, mm)
        r, c = np.divmod(rem, self.m)
        img = self.image_index[rows]
        tok = base[img] + self.cy[rows] * row_stride[img] + self.cx[rows]
        off = plane[None, :] * plane_stride[img][:, None] + r[None, :] * row_stride[img][:, None] + c[None, :]
        return buf[tok[:, None] + off]

    def feature_matrix(self, rows=None) -> np.ndarray:
        rows = np.arange(len(self)) if rows is None else rows
        return self.features(rows, np.arange(self.feature_dim))

    def dict_patches(self, rows=None) -> np.ndarray:
        """4-channel dictionary patches, shape (n, 4*m*m)."""
        rows = np.arange(len(self)) if rows is None else np.asarray(rows)
        m = self.m
        out = np.empty((len(rows), 4 * m * m), dtype=np.float64)
        for j, i in enumerate(rows):
            src = self.sources[self.image_index[i]]
            if src.dict_planes is None:
                raise ValueError(f"image {src.name} has no dictionary planes")
            y, x = self.cy[i], self.cx[i]
            out[j] = src.dict_planes[:, y:y + m, x:x + m].reshape(-1)
        return out

    def subset(self, rows) -> "TokenSet":
        rows = np.asarray(rows, dtype=np.int64)
        out = TokenSet(self.m, self.sources, self.image_index[rows], self.cy[rows], self.cx[rows],
                       self.is_labeled[rows], self.confidence[rows], self.labels[rows])
        if self.code_idx is not None:
            out.code_idx = self.code_idx[rows]
            out.code_val = self.code_val[rows]
        return out

    @staticmethod
    def concatenate(sets: Sequence["TokenSet"], m: Optional[int] = None) -> "TokenSet":
        sets = list(sets)
        if not sets:
            if m is None:
                raise ValueError("cannot infer patch size of an empty concatenation")
            return TokenSet.empty(m)
        m = sets[0].m
        sources, index = [], []
        for s in sets:
            if s.m != m:
                raise ValueError("token sets differ in patch size")
            index.append(s.image_index + len(sources))
            sources.extend(s.sources)
        out = TokenSet(
            m, sources, np.concatenate(index), np.concatenate([s.cy for s in sets]),
            np.concatenate([s.cx for s in sets]), np.concatenate([s.is_labeled for s in sets]),
            np.concatenate([s.confidence for s in sets]), np.concatenate([s.labels for s in sets]))
        if all(s.code_idx is not None for s in sets):
            out.code_idx = np.concatenate([s.code_idx for s in sets])
            out.code_val = np.concatenate([s.code_val for s in sets])
        return out


def straddle_map(truth: np.ndarray) -> np.ndarray:
    """True where a contour pixel falls in the central 2x2 block of the window.

    For even m the window centred on (y, x) has its central block at rows
    y-1..y and columns x-1..x; rows/columns before the image are reflected.
    """
    g = np.pad(truth.astype(bool), ((1, 0), (1, 0)), mode="reflect")
    return g[1:, 1:] | g[:-1, 1:] | g[1:, :-1] | g[:-1, :-1]


def _choose(rng, candidates: np.ndarray, count: int, what: str) -> np.ndarray:
    if count == 0:
        return candidates[:0]
    if len(candidates) == 0:
        raise ValueError(f"requested {count} {what} tokens but no candidates exist")
    return rng.choice(candidates, size=count, replace=count > len(candidates))


def sample_tokens(image, channels: ImageChannels, truth, counts, mode: str = LABELED,
                  thresholds=(0.7, 0.2), rng_seed=0, contour_map=None,
                  source_name: str = "", m: int = 12) -> TokenSet:
    """Draw foreground and background tokens from one image.

    In labeled mode ``truth`` is a boundary mask or a list of annotator masks;
    a token is foreground when a contour pixel straddles its centre.  In
    unlabeled mode ``truth`` is the weak detector's soft map and foreground /
    background candidates are pixels at or above ``thresholds[0]`` / at or
    below ``thresholds[1]``.  ``contour_map`` supplies the fourth channel of
    dictionary patches (defaults to the soft map in unlabeled mode).

    Foreground tokens come first in the returned set.
    """
    n_fg, n_bg = (int(c) for c in counts)
    h, w = channels.height, channels.width
    rng = np.random.default_rng(rng_seed)

    if mode == LABELED:
        if truth is None:
            raise ValueError("labeled sampling requires ground truth")
        masks = [truth] if isinstance(truth, np.ndarray) and truth.ndim == 2 else list(truth)
        gt = np.zeros((h, w), dtype=bool)
        for mk in masks:
            if mk.shape != (h, w):
                raise ValueError("ground truth does not match the image")
            gt |= mk.astype(bool)
        fg_mask = straddle_map(gt)
        score = None
    elif mode == UNLABELED:
        if truth is None:
            raise ValueError("unlabeled sampling requires a weak detector map")
        hi, lo = thresholds
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"thresholds must satisfy 0 <= lo < hi <= 1, got {thresholds}")
        score = np.asarray(truth, dtype=np.float64)
        if score.shape != (h, w):
            raise ValueError("weak map does not match the image")
        fg_mask = score >= hi
        if contour_map is None:
            contour_map = score
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")

    if mode == LABELED:
        fg_cand = np.flatnonzero(fg_mask)
        bg_cand = np.flatnonzero(~fg_mask)
    else:
        fg_cand = np.flatnonzero(fg_mask)
        bg_cand = np.flatnonzero(score <= thresholds[1])
    picks = np.concatenate([_choose(rng, fg_cand, n_fg, "foreground"),
                            _choose(rng, bg_cand, n_bg, "background")]).astype(np.int64)
    cy, cx = np.divmod(picks, w)

    dict_planes = dictionary_planes(image, contour_map) if contour_map is not None else None
    source = TokenSource(source_name, channels, m, dict_planes)
    n = len(picks)
    if mode == LABELED:
        gpad = pad_planes(gt[None].astype(np.uint8), m)[0].astype(bool)
        labels = np.stack([gpad[y:y + m, x:x + m] for y, x in zip(cy, cx)]) if n else np.zeros((0, m, m), bool)
        return TokenSet(m, [source], np.zeros(n), cy, cx, np.ones(n, bool), np.ones(n), labels)

    vals = score.ravel()[picks]
    conf = np.where(np.arange(n) < n_fg, vals, 1.0 - vals)
    return TokenSet(m, [source], np.zeros(n), cy, cx, np.zeros(n, bool), conf,
                    np.zeros((n, m, m), dtype=bool))


def pi_map(labels, Z: int = 2, n_pairs: int = 256, rng_seed=0) -> np.ndarray:
    """Map structured labels to discrete classes {1, 2}.

    Each mask is encoded by whether ``n_pairs`` random pixel pairs disagree,
    the encodings are projected on their top principal component and the
    sign of the projection gives the class (>= 0 -> 1).  The principal axis
    is computed from exact integer moments so the result depends only on
    the multiset of masks, not their order.
    """
    if Z != 2:
        raise ValueError("only Z=2 is supported")
    labels = np.asarray(labels, dtype=bool)
    if labels.ndim == 2:
        labels = labels[None]
    n = labels.shape[0]
    if n == 0:
        raise ValueError("pi_map needs at least one label")
    flat = labels.reshape(n, -1)
    npix = flat.shape[1]
    rng = np.random.default_rng(rng_seed)
    p = rng.integers(0, npix, size=n_pairs)
    q = rng.integers(0, npix - 1, size=n_pairs)
    q = q + (q >= p)
    z = (flat[:, p] != flat[:, q]).astype(np.int64)
    s = z.sum(axis=0)
    live = (s > 0) & (s < n)  # constant columns carry no variance
    if not live.any():
        return np.ones(n, dtype=np.int64)
    z, s = z[:, live], s[live]
    scatter = n * (z.T @ z) - np.outer(s, s)  # n^2 * covariance, exact
    k = scatter.shape[0]
    v = linalg.eigh(scatter.astype(np.float64), subset_by_index=[k - 1, k - 1])[1][:, 0]
    lead = int(np.argmax(np.abs(v)))
    if v[lead] < 0:
        v = -v
    proj = (n * z - s).astype(np.float64) @ v
    return np.where(proj >= 0, 1, 2).astype(np.int64)


def save_tokens(path, tokens: TokenSet) -> None:
    """Cache token metadata: header then fixed-width records.

    Record: image index (u32), row (u32), col (u32), flags (u8), confidence
    (f32), label bits packed row-major.
    """
    m = tokens.m
    nbytes = (m * m + 7) // 8
    rec = np.dtype([("img", "<u4"), ("y", "<u4"), ("x", "<u4"), ("flags", "u1"),
                    ("conf", "<f4"), ("label", "u1", (nbytes,))])
    arr = np.zeros(len(tokens), dtype=rec)
    arr["img"] = tokens.image_index
    arr["y"] = tokens.cy
    arr["x"] = tokens.cx
    arr["flags"] = tokens.is_labeled.astype(np.uint8)
    arr["conf"] = tokens.confidence
    if len(tokens):
        arr["label"] = np.packbits(tokens.labels.reshape(len(tokens), -1), axis=1)
    header = TOKEN_MAGIC + struct.pack("<HHQ", TOKEN_VERSION, m, len(tokens))
    Path(path).write_bytes(header + arr.tobytes())


def load_tokens(path, sources: Sequence[TokenSource]) -> TokenSet:
    data = Path(path).read_bytes()
    if data[:8] != TOKEN_MAGIC:
        raise FormatError(f"{path}: not a token cache")
    version, m, n = struct.unpack("<HHQ", data[8:20])
    if version != TOKEN_VERSION:
        raise FormatError(f"{path}: token cache version {version}, expected {TOKEN_VERSION}")
    nbytes = (m * m + 7) // 8
    rec = np.dtype([("img", "<u4"), ("y", "<u4"), ("x", "<u4"), ("flags", "u1"),
                    ("conf", "<f4"), ("label", "u1", (nbytes,))])
    arr = np.frombuffer(data, dtype=rec, offset=20, count=n)
    labels = np.unpackbits(arr["label"], axis=1, count=m * m).reshape(n, m, m).astype(bool)
    if n and arr["img"].max() >= len(sources):
        raise ValueError("token cache refers to more images than supplied")
    return TokenSet(m, sources, arr["img"], arr["y"], arr["x"], arr["flags"].astype(bool),
                    arr["conf"].astype(np.float64), labels)
