"""Pure-numpy implementations of the hot kernels.

Fallback used when the compiled extension is unavailable (or when
VMFSEG_PURE=1). Must match vmfseg._kernels semantically: same tie
breaking (smallest index wins) and the same pixel-order accumulation
for segment sums.
"""

from __future__ import annotations

import numpy as np


def assign(vectors: np.ndarray, protos: np.ndarray):
    """Max-dot-product assignment of each vector row to a prototype row."""
    vectors = np.asarray(vectors, dtype=np.float64)
    protos = np.asarray(protos, dtype=np.float64)
    if protos.ndim != 2 or vectors.ndim != 2 or protos.shape[1] != vectors.shape[1]:
        raise ValueError("vectors and prototypes must share their last dimension")
    if protos.shape[0] < 1:
        raise ValueError("need at least one prototype")
    sims_all = vectors @ protos.T
    idx = np.argmax(sims_all, axis=1)  # first occurrence = smallest index on ties
    sims = sims_all[np.arange(sims_all.shape[0]), idx]
    return idx.astype(np.int64), np.ascontiguousarray(sims, dtype=np.float64)


def segment_sums(vectors: np.ndarray, labels: np.ndarray, num_segments: int):
    """Per-segment vector sums and pixel counts, accumulated in pixel order."""
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != vectors.shape[0]:
        raise ValueError("labels length must match vector count")
    if labels.size and (labels.min() < 0 or labels.max() >= num_segments):
        raise ValueError("segment id out of range")
    sums = np.zeros((num_segments, vectors.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, vectors)
    counts = np.bincount(labels, minlength=num_segments).astype(np.int64)
    return sums, counts
