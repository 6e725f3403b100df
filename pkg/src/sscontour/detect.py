"""Dense structured prediction and non-maximum suppression."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .features import WEAK_DETECTOR, as_float_rgb, compute_channels, pad_planes, resize_image, resize_plane
from .forest.model import Forest

DEFAULT_SCALES = (0.5, 1.0, 2.0)


class _GridLookup:
    """Feature lookup for tokens centred on a regular grid of a padded stack."""

    def __init__(self, padded: np.ndarray, m: int, cy: np.ndarray, cx: np.ndarray):
        self.flat = padded.ravel()
        self.m = m
        _, hp, wp = padded.shape
        self.plane_stride = hp * wp
        self.row_stride = wp
        self.base = cy.astype(np.int64) * wp + cx.astype(np.int64)

    def offsets(self, feature_ids: np.ndarray) -> np.ndarray:
        plane, rem = np.divmod(feature_ids, self.m * self.m)
        r, c = np.divmod(rem, self.m)
        return plane * self.plane_stride + r * self.row_stride + c

    def __call__(self, tokens: np.ndarray, feature_ids: np.ndarray) -> np.ndarray:
        return self.flat[self.base[tokens] + self.offsets(feature_ids)]


def vote_maps(image, forest: Forest, weak_map=None, stride: int = 2):
    """Summed votes and coverage at the image's own resolution.

    Returns ``(votes, coverage)``: ``votes`` counts, over all trees, the
    tokens whose leaf marks a pixel as contour; ``coverage`` counts the
    tokens whose window contains the pixel (once per token, not per tree).
    """
    m = forest.m
    rgb = as_float_rgb(image)
    h, w = rgb.shape[:2]
    if h < m or w < m:
        raise ValueError(f"image {h}x{w} is smaller than the {m}x{m} token")
    channels = compute_channels(rgb, forest.feature_config, weak_map)
    padded = np.ascontiguousarray(pad_planes(channels.planes, m))
    ys = np.arange(0, h, stride)
    xs = np.arange(0, w, stride)
    gy, gx = len(ys), len(xs)
    cy, cx = np.repeat(ys, gx), np.tile(xs, gy)
    lookup = _GridLookup(padded, m, cy, cx)
    summed = np.zeros((gy, gx, m, m), dtype=np.int32)
    for tree in forest.trees:
        leaves = tree.apply(len(cy), lookup)
        summed += tree.leaf_masks[leaves].reshape(gy, gx, m, m)
    votes = np.zeros((h + m, w + m))
    cover = np.zeros((h + m, w + m))
    for dy in range(m):
        rows = slice(dy, dy + stride * gy, stride)
        for dx in range(m):
            cols = slice(dx, dx + stride * gx, stride)
            votes[rows, cols] += summed[:, :, dy, dx]
            cover[rows, cols] += 1.0
    half = m // 2
    crop = (slice(half, half + h), slice(half, half + w))
    return votes[crop], cover[crop]


def detect(image, forest: Forest, gamma: Optional[Forest] = None,
           scales: Sequence[float] = DEFAULT_SCALES, stride: int = 2,
           weak_map: Optional[np.ndarray] = None, weak_scales: Sequence[float] = (1.0,)) -> np.ndarray:
    """Soft contour map in [0, 1] with the image's height and width.

    At every scale each pixel receives the average of the structured
    predictions covering it (all trees, all stride-spaced tokens); the
    per-scale maps are resized back and averaged.  When the forest's
    gradients come from the weak detector, ``weak_map`` is computed once by
    running ``gamma`` at ``weak_scales`` and resized to each scale.
    """
    rgb = as_float_rgb(image)
    h, w = rgb.shape[:2]
    needs_weak = forest.feature_config.gradient_source == WEAK_DETECTOR
    if needs_weak and weak_map is None:
        if gamma is None:
            raise ValueError("this forest needs a weak detector map or the weak detector")
        weak_map = detect(rgb, gamma, scales=weak_scales, stride=stride)
    if not needs_weak:
        weak_map = None
    out = np.zeros((h, w))
    for s in scales:
        img_s = resize_image(rgb, s)
        hs, ws = img_s.shape[:2]
        weak_s = None if weak_map is None else resize_plane(np.asarray(weak_map, dtype=np.float32), hs, ws)
        votes, cover = vote_maps(img_s, forest, weak_s, stride)
        soft = votes / (forest.n_trees * cover)
        out += resize_plane(soft, h, w)
    return np.clip(out / len(scales), 0.0, 1.0)


def _nms_pass(E: np.ndarray, sigma: float) -> np.ndarray:
    S = ndimage.gaussian_filter(E, sigma, mode="reflect") if sigma > 0 else E
    sy, sx = np.gradient(S)
    syy, syx = np.gradient(sy)
    sxy, sxx = np.gradient(sx)
    hxy = 0.5 * (sxy + syx)
    phi = 0.5 * np.arctan2(2.0 * hxy, sxx - syy)
    phi = np.where(sxx + syy >= 0, phi, phi + np.pi / 2)
    dy, dx = np.sin(phi), np.cos(phi)
    yy, xx = np.indices(E.shape, dtype=np.float64)
    n1 = ndimage.map_coordinates(E, [yy + dy, xx + dx], order=1, mode="nearest")
    n2 = ndimage.map_coordinates(E, [yy - dy, xx - dx], order=1, mode="nearest")
    keep = ((E > n1) & (E >= n2)) | ((E >= n1) & (E > n2))
    return np.where(keep, E, 0.0)


def nms_thin(soft: np.ndarray, sigma: float = 1.0, max_passes: int = 50) -> np.ndarray:
    """Keep pixels that are maximal across the local contour direction.

    The normal is the Hessian eigenvector of largest magnitude of the
    smoothed map; the two neighbours one pixel away along it are bilinearly
    interpolated.  A pixel survives when it beats one neighbour strictly and
    the other at least weakly.  Passes repeat until nothing changes, since
    thinning shifts the orientation estimate; each pass only removes pixels,
    so the result is a fixed point and applying the operator again is a no-op.
    """
    E = np.asarray(soft, dtype=np.float64)
    for _ in range(max_passes):
        if not E.any():
            return E.copy()
        out = _nms_pass(E, sigma)
        if np.array_equal(out, E):
            return out
        E = out
    return E
