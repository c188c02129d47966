"""Segmentation scoring: per-class IoU / mIoU and boundary quality.

Boundary evaluation extracts per-class boundary pixels (a pixel of the
class with a 4-neighbor of a different class; image-border pixels of
the class always count), then matches prediction and ground-truth
boundary pixels one to one within a tolerance of tol_frac times the
image diagonal, taking a maximum-cardinality matching so a boundary
shifted by less than the tolerance scores a perfect f-measure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import maximum_bipartite_matching

from vmfseg.core import LabelMap, ShapeMismatchError, _freeze


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows = ground truth class, columns = predicted class.

    Pixels whose ground truth is the ignore value are never scored; the
    count total equals the number of scored pixels.
    """

    num_classes: int
    counts: np.ndarray  # (C, C) int64

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (self.num_classes, self.num_classes):
            raise ValueError("counts must be (num_classes, num_classes)")
        if counts.size and counts.min() < 0:
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "counts", _freeze(counts))

    @classmethod
    def from_maps(cls, pred: LabelMap, gt: LabelMap, num_classes: int) -> "ConfusionMatrix":
        if (pred.height, pred.width) != (gt.height, gt.width):
            raise ShapeMismatchError(
                f"prediction {pred.height}x{pred.width} vs ground truth {gt.height}x{gt.width}"
            )
        scored = gt.flat() != gt.ignore_value
        g = gt.flat()[scored]
        p = pred.flat()[scored]
        if p.size and (p.min() < 0 or p.max() >= num_classes):
            raise ValueError("prediction contains class ids outside 0..num_classes-1 at scored pixels")
        if g.size and g.max() >= num_classes:
            raise ValueError("ground truth contains class ids outside 0..num_classes-1")
        counts = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
        return cls(num_classes=num_classes, counts=counts.reshape(num_classes, num_classes))


def miou(pred: LabelMap, gt: LabelMap, num_classes: int) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent from both maps) and their mean."""
    cm = ConfusionMatrix.from_maps(pred, gt, num_classes).counts
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - np.diag(cm)
    fn = cm.sum(axis=1) - np.diag(cm)
    denom = tp + fp + fn
    per_class = np.full(num_classes, np.nan)
    present = denom > 0
    per_class[present] = tp[present] / denom[present]
    if not np.any(present):
        return per_class, float("nan")
    return per_class, float(np.mean(per_class[present]))


@dataclass(frozen=True)
class BoundaryScore:
    """Per-class boundary precision / recall / f-measure and the mean f.

    Entries are NaN for classes with no boundary pixels on either side;
    such classes are excluded from the mean.
    """

    precision: np.ndarray
    recall: np.ndarray
    f_measure: np.ndarray
    mean_f: float

    def __post_init__(self):
        for name in ("precision", "recall", "f_measure"):
            object.__setattr__(self, name, _freeze(np.asarray(getattr(self, name), dtype=np.float64)))


def _boundary_pixels(labels: np.ndarray, class_id: int) -> np.ndarray:
    """(n, 2) row/col coordinates of class boundary pixels (4-connectivity)."""
    mask = labels == class_id
    if not mask.any():
        return np.empty((0, 2), dtype=np.int64)
    # Pad with a sentinel so border pixels of the class see a different value.
    padded = np.pad(labels, 1, constant_values=-1)
    center = padded[1:-1, 1:-1]
    differs = (
        (padded[:-2, 1:-1] != center)
        | (padded[2:, 1:-1] != center)
        | (padded[1:-1, :-2] != center)
        | (padded[1:-1, 2:] != center)
    )
    return np.argwhere(mask & differs)


def _match_count(a: np.ndarray, b: np.ndarray, tol: float) -> int:
    """Size of a maximum one-to-one matching of a and b within `tol`.

    Maximum cardinality makes the count symmetric in (a, b) and
    non-decreasing in the tolerance.
    """
    if a.shape[0] == 0 or b.shape[0] == 0:
        return 0
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2).astype(np.float64)
    ai, bi = np.nonzero(d2 <= tol * tol)
    if ai.size == 0:
        return 0
    graph = sparse.csr_matrix(
        (np.ones(ai.size, dtype=np.int8), (ai, bi)), shape=(a.shape[0], b.shape[0])
    )
    match = maximum_bipartite_matching(graph, perm_type="column")
    return int(np.count_nonzero(match >= 0))


def boundary_match_counts(
    pred: LabelMap, gt: LabelMap, num_classes: int, tol_frac: float = 0.01
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class (matched, pred boundary, gt boundary) pixel counts.

    The raw ingredients of boundary precision / recall; summable across
    images for set-level scores.
    """
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ShapeMismatchError(
            f"prediction {pred.height}x{pred.width} vs ground truth {gt.height}x{gt.width}"
        )
    if not tol_frac > 0:
        raise ValueError(f"tol_frac must be positive, got {tol_frac}")
    h, w = gt.height, gt.width
    tol = tol_frac * float(np.hypot(h, w))
    matched = np.zeros(num_classes, dtype=np.int64)
    pred_count = np.zeros(num_classes, dtype=np.int64)
    gt_count = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        pb = _boundary_pixels(pred.labels, c)
        gb = _boundary_pixels(gt.labels, c)
        pred_count[c] = pb.shape[0]
        gt_count[c] = gb.shape[0]
        if pb.shape[0] and gb.shape[0]:
            matched[c] = _match_count(pb, gb, tol)
    return matched, pred_count, gt_count


def scores_from_counts(
    matched: np.ndarray, pred_count: np.ndarray, gt_count: np.ndarray
) -> BoundaryScore:
    """Turn (summed) boundary match counts into a BoundaryScore."""
    num_classes = matched.shape[0]
    precision = np.full(num_classes, np.nan)
    recall = np.full(num_classes, np.nan)
    f_measure = np.full(num_classes, np.nan)
    for c in range(num_classes):
        if pred_count[c] == 0 and gt_count[c] == 0:
            continue
        p = matched[c] / pred_count[c] if pred_count[c] else 0.0
        r = matched[c] / gt_count[c] if gt_count[c] else 0.0
        precision[c] = p
        recall[c] = r
        f_measure[c] = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
    present = ~np.isnan(f_measure)
    mean_f = float(np.mean(f_measure[present])) if np.any(present) else float("nan")
    return BoundaryScore(precision=precision, recall=recall, f_measure=f_measure, mean_f=mean_f)


def boundary_f(
    pred: LabelMap, gt: LabelMap, num_classes: int, tol_frac: float = 0.01
) -> BoundaryScore:
    """Boundary precision / recall / f-measure per class, plus the mean f."""
    return scores_from_counts(*boundary_match_counts(pred, gt, num_classes, tol_frac))
