"""Spherical K-Means over spatially-augmented pixel embeddings.

One image's embedding map is partitioned into k segments by alternating
mean-direction updates (M) and max-cosine hard assignments (E) for a
fixed number of rounds, starting from a uniform rectangular grid. The
concentration parameter plays no role here: hard assignment is the
infinite-concentration limit, so only cosine order matters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vmfseg import backend
from vmfseg.core import (
    DegenerateSumError,
    EmbeddingMap,
    Segmentation,
    TooManyClustersError,
    TrainConfig,
    ZERO_NORM_EPS,
    _freeze,
)


@dataclass(frozen=True)
class AugmentedMap:
    """Embeddings with two weighted, normalized coordinate channels appended.

    Each augmented vector is re-normalized to unit length so cosine
    comparisons on the concatenated space stay well-defined.
    """

    data: np.ndarray  # (H, W, d+2) float64, rows unit-norm
    coord_weight: float

    def __post_init__(self):
        object.__setattr__(self, "data", _freeze(np.asarray(self.data, dtype=np.float64)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1, self.dim)


def augment(emb: EmbeddingMap, coord_weight: float) -> AugmentedMap:
    """Concatenate weighted pixel coordinates onto each embedding.

    The coordinate block of pixel (r, c) is coord_weight * (r/(H-1),
    c/(W-1)); a degenerate axis (H or W equal to 1) contributes 0.5.
    With coord_weight = 0 the block is zero and directions are unchanged.
    """
    if coord_weight < 0:
        raise ValueError(f"coord_weight must be >= 0, got {coord_weight}")
    h, w = emb.height, emb.width
    rows = np.full(h, 0.5) if h == 1 else np.arange(h, dtype=np.float64) / (h - 1)
    cols = np.full(w, 0.5) if w == 1 else np.arange(w, dtype=np.float64) / (w - 1)
    coords = np.empty((h, w, 2), dtype=np.float64)
    coords[:, :, 0] = coord_weight * rows[:, None]
    coords[:, :, 1] = coord_weight * cols[None, :]
    data = np.concatenate([emb.data, coords], axis=2)
    # Embedding block is unit norm, so the concatenated norm is >= 1.
    data /= np.linalg.norm(data, axis=2, keepdims=True)
    return AugmentedMap(data=data, coord_weight=float(coord_weight))


def init_grid(height: int, width: int, k: int) -> Segmentation:
    """Partition the image into k rectangular tiles, roughly sqrt(k) x sqrt(k).

    Rows are split into bands and each band into column spans, sized as
    evenly as possible; exactly k non-empty tiles result whenever
    k <= height * width.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > height * width:
        raise TooManyClustersError(f"k={k} exceeds pixel count {height * width}")

    bands = min(height, int(np.ceil(np.sqrt(k))))
    if bands * width < k:
        bands = int(np.ceil(k / width))

    labels = np.empty((height, width), dtype=np.int64)
    base_tiles, extra_tiles = divmod(k, bands)
    base_rows, extra_rows = divmod(height, bands)
    row0 = 0
    tile_id = 0
    for b in range(bands):
        band_rows = base_rows + (1 if b < extra_rows else 0)
        tiles = base_tiles + (1 if b < extra_tiles else 0)
        base_cols, extra_cols = divmod(width, tiles)
        col0 = 0
        for t in range(tiles):
            span = base_cols + (1 if t < extra_cols else 0)
            labels[row0 : row0 + band_rows, col0 : col0 + span] = tile_id
            tile_id += 1
            col0 += span
        row0 += band_rows
    return Segmentation(labels=labels, num_segments=k)


def e_step(aug: AugmentedMap, prototypes: np.ndarray) -> Segmentation:
    """Assign every pixel to its max-cosine prototype (ties: smallest index).

    Prototypes that win no pixel disappear; the returned segmentation is
    compacted to contiguous ids.
    """
    protos = np.ascontiguousarray(prototypes, dtype=np.float64)
    idx, _ = backend.assign(np.ascontiguousarray(aug.flat()), protos)
    return Segmentation.from_labels(idx.reshape(aug.height, aug.width))


def m_step(aug: AugmentedMap, seg: Segmentation) -> np.ndarray:
    """Mean direction of each segment's augmented vectors, as a (k, d) array."""
    sums, counts = backend.segment_sums(
        np.ascontiguousarray(aug.flat()), seg.flat(), seg.num_segments
    )
    if np.any(counts == 0):
        raise ValueError("every segment must contain at least one pixel")
    norms = np.linalg.norm(sums, axis=1)
    if np.any(norms < ZERO_NORM_EPS):
        bad = int(np.argmin(norms))
        raise DegenerateSumError(
            f"segment {bad} vector sum cancelled (norm {norms[bad]:.3e})"
        )
    return sums / norms[:, None]


def spherical_kmeans(emb: EmbeddingMap, cfg: TrainConfig) -> Segmentation:
    """Cluster one embedding map into (at most) cfg.num_clusters segments.

    Runs exactly cfg.em_iters M+E rounds from the uniform grid; empty
    clusters are dropped as they arise, never re-seeded.
    """
    seg, _ = spherical_kmeans_trace(emb, cfg)
    return seg


def spherical_kmeans_trace(emb: EmbeddingMap, cfg: TrainConfig):
    """spherical_kmeans plus the per-round objective trace.

    The objective is the sum over pixels of the cosine between each
    augmented vector and its assigned prototype, evaluated after the
    round's E-step; it is non-decreasing round over round.
    """
    aug = augment(emb, cfg.coord_weight)
    seg = init_grid(emb.height, emb.width, cfg.num_clusters)
    vectors = np.ascontiguousarray(aug.flat())
    objectives = np.empty(cfg.em_iters, dtype=np.float64)
    for it in range(cfg.em_iters):
        protos = m_step(aug, seg)
        idx, sims = backend.assign(vectors, protos)
        seg = Segmentation.from_labels(idx.reshape(emb.height, emb.width))
        objectives[it] = sims.sum()
    return seg, objectives
