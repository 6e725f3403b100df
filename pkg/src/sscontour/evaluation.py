"""Boundary benchmark: tolerant pixel matching, PR curves, ODS / OIS / AP."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.spatial import cKDTree

DEFAULT_TOLERANCE = 0.0075
DEFAULT_THRESHOLDS = np.linspace(0.01, 0.99, 99)


@dataclass
class PRPoint:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f_measure: float


@dataclass
class EvalSummary:
    ods_f: float
    ois_f: float
    ap: float
    ods_threshold: float
    curve: list[PRPoint] = field(default_factory=list)


def _as_mask_list(gt_masks) -> list[np.ndarray]:
    if isinstance(gt_masks, np.ndarray) and gt_masks.ndim == 2:
        return [gt_masks.astype(bool)]
    return [np.asarray(g, dtype=bool) for g in gt_masks]


def _radius(shape, tolerance: float) -> float:
    if tolerance <= 0:
        raise ValueError(f"tolerance must be positive, got {tolerance}")
    return tolerance * float(np.hypot(*shape))


def tolerance_graph(pred_yx: np.ndarray, gt_yx: np.ndarray, radius: float) -> sparse.csr_matrix:
    """Biadjacency (pred x gt) with an edge iff the Euclidean distance is at most ``radius``."""
    n_p, n_g = len(pred_yx), len(gt_yx)
    if n_p == 0 or n_g == 0:
        return sparse.csr_matrix((n_p, n_g), dtype=np.int8)
    tree = cKDTree(gt_yx)
    near = tree.query_ball_point(pred_yx, radius * (1 + 1e-9))
    rows = np.repeat(np.arange(n_p), [len(n) for n in near])
    cols = np.fromiter((j for n in near for j in n), dtype=np.int64, count=len(rows))
    d2 = ((pred_yx[rows] - gt_yx[cols]) ** 2).sum(axis=1)
    ok = d2 <= radius * radius  # integer coordinates, exact
    return sparse.csr_matrix((np.ones(ok.sum(), dtype=np.int8), (rows[ok], cols[ok])), shape=(n_p, n_g))


def _matched_rows(graph: sparse.csr_matrix) -> np.ndarray:
    if graph.nnz == 0:
        return np.zeros(graph.shape[0], dtype=bool)
    return maximum_bipartite_matching(graph, perm_type="column") >= 0


def _counts(pred: np.ndarray, gts: list[np.ndarray], radius: float):
    """(tp, fp, fn, gt_hit) where gt_hit sums matched gt pixels over annotators."""
    pred_yx = np.argwhere(pred)
    hit = np.zeros(len(pred_yx), dtype=bool)
    fn = gt_hit = 0
    for g in gts:
        gt_yx = np.argwhere(g)
        graph = tolerance_graph(pred_yx, gt_yx, radius)
        rows = _matched_rows(graph)
        hit |= rows
        n = int(rows.sum())
        gt_hit += n
        fn += len(gt_yx) - n
    tp = int(hit.sum())
    return tp, len(pred_yx) - tp, fn, gt_hit


def match_boundaries(pred_binary, gt_masks, tolerance: float = DEFAULT_TOLERANCE):
    """Return (tp, fp, fn) under maximum one-to-one matching per annotator.

    A predicted pixel is a true positive when some annotator matches it;
    ``fn`` sums the unmatched ground-truth pixels of every annotator.
    """
    pred = np.asarray(pred_binary, dtype=bool)
    gts = _as_mask_list(gt_masks)
    for g in gts:
        if g.shape != pred.shape:
            raise ValueError(f"ground truth {g.shape} does not match prediction {pred.shape}")
    tp, fp, fn, _ = _counts(pred, gts, _radius(pred.shape, tolerance))
    return tp, fp, fn


def _prf(tp, fp, fn, gt_hit):
    tp, fp, fn, gt_hit = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn, gt_hit))
    precision = np.divide(tp, tp + fp, out=np.ones_like(tp), where=(tp + fp) > 0)
    recall = np.divide(gt_hit, gt_hit + fn, out=np.zeros_like(tp), where=(gt_hit + fn) > 0)
    s = precision + recall
    f = np.divide(2 * precision * recall, s, out=np.zeros_like(tp), where=s > 0)
    return precision, recall, f


def image_counts(soft_map, gt_masks, thresholds=DEFAULT_THRESHOLDS,
                 tolerance: float = DEFAULT_TOLERANCE) -> np.ndarray:
    """Counts (tp, fp, fn, gt_hit) for each threshold, shape (n_thresholds, 4).

    The tolerance graph is built once for every pixel at or above the lowest
    threshold; each threshold then matches the induced subgraph.
    """
    E = np.asarray(soft_map, dtype=np.float64)
    gts = _as_mask_list(gt_masks)
    for g in gts:
        if g.shape != E.shape:
            raise ValueError(f"ground truth {g.shape} does not match map {E.shape}")
    thresholds = np.asarray(thresholds, dtype=np.float64)
    radius = _radius(E.shape, tolerance)
    pred_yx = np.argwhere(E >= thresholds.min())
    vals = E[pred_yx[:, 0], pred_yx[:, 1]]
    graphs = [(tolerance_graph(pred_yx, np.argwhere(g), radius), int(g.sum())) for g in gts]
    out = np.zeros((len(thresholds), 4), dtype=np.int64)
    for i, t in enumerate(thresholds):
        keep = np.flatnonzero(vals >= t)
        hit = np.zeros(len(keep), dtype=bool)
        fn = gt_hit = 0
        for graph, n_gt in graphs:
            rows = _matched_rows(graph[keep])
            hit |= rows
            n = int(rows.sum())
            gt_hit += n
            fn += n_gt - n
        tp = int(hit.sum())
        out[i] = tp, len(keep) - tp, fn, gt_hit
    return out


def average_precision(precision, recall, valid=None) -> float:
    """Area under the monotone precision envelope from recall 0 to the largest recall.

    Points flagged invalid (no predictions) are ignored; precision is
    extended flat from the smallest recall down to 0.
    """
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    if valid is not None:
        p, r = p[valid], r[valid]
    if len(p) == 0:
        return 0.0
    order = np.lexsort((-p, r))
    p, r = p[order], r[order]
    env = np.maximum.accumulate(p[::-1])[::-1]
    r = np.concatenate([[0.0], r])
    env = np.concatenate([[env[0]], env])
    return float(np.trapezoid(env, r))


def evaluate(soft_maps: Sequence[np.ndarray], gt: Sequence, thresholds=DEFAULT_THRESHOLDS,
             tolerance: float = DEFAULT_TOLERANCE) -> EvalSummary:
    """Corpus benchmark of thinned soft maps against per-image annotator masks."""
    if len(soft_maps) == 0:
        raise ValueError("cannot evaluate an empty corpus")
    if len(soft_maps) != len(gt):
        raise ValueError("need one ground-truth entry per map")
    thresholds = np.asarray(thresholds, dtype=np.float64)
    per_image = np.stack([image_counts(m, g, thresholds, tolerance) for m, g in zip(soft_maps, gt)])
    total = per_image.sum(axis=0)
    precision, recall, f = _prf(*total.T)
    best = int(np.argmax(f))

    _, _, f_img = _prf(*np.moveaxis(per_image, 2, 0))
    own_best = np.argmax(f_img, axis=1)
    ois_counts = per_image[np.arange(len(per_image)), own_best].sum(axis=0)
    ois = float(_prf(*ois_counts)[2])

    ap = average_precision(precision, recall, valid=(total[:, 0] + total[:, 1]) > 0)
    curve = [PRPoint(float(t), int(c[0]), int(c[1]), int(c[2]), float(p), float(r), float(ff))
             for t, c, p, r, ff in zip(thresholds, total, precision, recall, f)]
    return EvalSummary(float(f[best]), ois, ap, float(thresholds[best]), curve)


def write_eval_json(path, summary: EvalSummary, extra: Optional[dict] = None) -> None:
    doc = {"ods": summary.ods_f, "ois": summary.ois_f, "ap": summary.ap,
           "ods_threshold": summary.ods_threshold,
           "curve": [asdict(p) for p in summary.curve]}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_pr_csv(path, summary: EvalSummary) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recall", "precision", "threshold"])
        for p in summary.curve:
            w.writerow([repr(p.recall), repr(p.precision), repr(p.threshold)])
