"""Nonparametric inference: prototype store, exact kNN, FINCH discovery.

A trained model segments a query image exactly as during training, one
prototype is computed per query segment, and the segment's label is the
majority vote among its k nearest training prototypes by cosine. FINCH
recursively merges first-neighbor-linked prototypes to expose visual
groups without labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from vmfseg.core import (
    LabelMap,
    Prototype,
    TrainConfig,
    UnlabeledStoreError,
    ZERO_NORM_EPS,
    DegenerateSumError,
    _freeze,
)
from vmfseg.align import prototypes as segment_prototypes
from vmfseg.kmeans import spherical_kmeans


@dataclass(frozen=True)
class PrototypeStore:
    """Searchable collection of prototypes with a dense cosine index."""

    prototypes: tuple[Prototype, ...]
    matrix: np.ndarray  # (M, d) float64, row i = prototypes[i].vector

    def __post_init__(self):
        object.__setattr__(self, "prototypes", tuple(self.prototypes))
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.shape[0] != len(self.prototypes):
            raise ValueError("matrix rows must match prototype count")
        seen = set()
        for p in self.prototypes:
            key = (p.image_id, p.segment_id)
            if key in seen:
                raise ValueError(f"duplicate prototype identity {key}")
            seen.add(key)
        object.__setattr__(self, "matrix", _freeze(matrix))

    @classmethod
    def from_prototypes(cls, protos: Sequence[Prototype]) -> "PrototypeStore":
        protos = tuple(protos)
        if protos:
            matrix = np.stack([p.vector for p in protos])
        else:
            matrix = np.zeros((0, 0))
        return cls(prototypes=protos, matrix=matrix)

    def __len__(self) -> int:
        return len(self.prototypes)

    @property
    def labeled(self) -> bool:
        """True when the store is non-empty and every prototype has a label."""
        return bool(self.prototypes) and all(
            p.semantic_label is not None for p in self.prototypes
        )


def knn(store: PrototypeStore, query: np.ndarray, k: int) -> list[tuple[Prototype, float]]:
    """Exact top-k store entries by cosine, descending; ties keep insertion order."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(store) == 0:
        raise ValueError("store is empty")
    sims = store.matrix @ np.asarray(query, dtype=np.float64)
    order = np.lexsort((np.arange(sims.size), -sims))[: min(k, sims.size)]
    return [(store.prototypes[i], float(np.clip(sims[i], -1.0, 1.0))) for i in order]


def _majority_vote(neighbors: list[tuple[Prototype, float]]) -> int:
    """Most frequent label; ties prefer larger summed cosine, then lower id."""
    votes: dict[int, list[float]] = {}
    for p, sim in neighbors:
        entry = votes.setdefault(int(p.semantic_label), [0, 0.0])
        entry[0] += 1
        entry[1] += sim
    return min(votes.items(), key=lambda kv: (-kv[1][0], -kv[1][1], kv[0]))[0]


def classify_segment(store: PrototypeStore, prototype: Prototype, k: int) -> int:
    """Majority label of the k nearest prototypes.

    Count ties break toward the larger summed cosine, then the lower
    class id.
    """
    if not store.labeled:
        raise UnlabeledStoreError("classification needs a non-empty, fully labeled store")
    return _majority_vote(knn(store, prototype.vector, k))


def infer(model, image: np.ndarray, store: PrototypeStore, cfg: TrainConfig) -> LabelMap:
    """Segment a raw-feature image and label each segment by retrieval."""
    pred, _ = infer_with_report(model, image, store, cfg)
    return pred


def infer_with_report(model, image: np.ndarray, store: PrototypeStore, cfg: TrainConfig):
    """infer plus, per query segment, its top-k neighbor list.

    Returns (LabelMap, report) where report[i] is a list of
    (neighbor Prototype, cosine) for query segment i, descending.
    """
    if not store.labeled:
        raise UnlabeledStoreError("inference needs a non-empty, fully labeled store")
    emb = model.embed(image)
    seg = spherical_kmeans(emb, cfg)
    protos = segment_prototypes(emb, seg)
    out = np.zeros((emb.height, emb.width), dtype=np.int64)
    report: list[list[tuple[Prototype, float]]] = []
    for p in protos:
        neighbors = knn(store, p.vector, cfg.knn)
        report.append(neighbors)
        out[seg.labels == p.segment_id] = _majority_vote(neighbors)
    return LabelMap(labels=out), report


@dataclass(frozen=True)
class FinchHierarchy:
    """Partitions of the input points, one per merge level.

    levels[t] maps each input point to its cluster at level t; counts
    decrease strictly and end at 1.
    """

    levels: tuple[np.ndarray, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        levels = tuple(_freeze(np.asarray(l, dtype=np.int64)) for l in self.levels)
        object.__setattr__(self, "levels", levels)
        if len(self.counts) != len(levels):
            raise ValueError("one count per level required")
        for c_prev, c_next in zip(self.counts, self.counts[1:]):
            if c_next >= c_prev:
                raise ValueError("cluster counts must strictly decrease")
        if self.counts and self.counts[-1] != 1:
            raise ValueError("last level must have a single cluster")


def _first_neighbor_partition(reps: np.ndarray, shared_neighbor: bool) -> np.ndarray:
    """Connected components of the undirected first-neighbor graph.

    Edges: i-j when nn(i)=j or nn(j)=i, plus (optionally) when
    nn(i)=nn(j). Nearest neighbors use cosine; ties break to the lowest
    index.
    """
    n = reps.shape[0]
    sims = reps @ reps.T
    np.fill_diagonal(sims, -np.inf)
    nn = np.argmax(sims, axis=1)

    parent = np.arange(n)

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for i in range(n):
        union(i, int(nn[i]))
    if shared_neighbor:
        # Points sharing a nearest neighbor are already connected through
        # it, so this cannot alter the partition; it keeps the published
        # adjacency explicit.
        order = np.argsort(nn, kind="stable")
        for a, b in zip(order[:-1], order[1:]):
            if nn[a] == nn[b]:
                union(int(a), int(b))

    roots = np.fromiter((find(i) for i in range(n)), dtype=np.int64, count=n)
    _, labels = np.unique(roots, return_inverse=True)
    return labels


def finch(vectors: np.ndarray, shared_neighbor: bool = True) -> FinchHierarchy:
    """Recursive first-neighbor agglomeration of unit vectors.

    Each level clusters the previous level's mean directions (computed
    from the original vectors of each cluster) until one cluster remains.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 1:
        raise ValueError("need a (n, d) array with n >= 1")
    n = vectors.shape[0]
    if n == 1:
        return FinchHierarchy(levels=(np.zeros(1, dtype=np.int64),), counts=(1,))

    levels: list[np.ndarray] = []
    counts: list[int] = []
    point_labels = np.arange(n)
    reps = vectors
    while True:
        part = _first_neighbor_partition(reps, shared_neighbor)
        point_labels = part[point_labels]
        num = int(part.max()) + 1
        levels.append(point_labels.copy())
        counts.append(num)
        if num == 1:
            break
        sums = np.zeros((num, vectors.shape[1]))
        np.add.at(sums, point_labels, vectors)
        norms = np.linalg.norm(sums, axis=1)
        if np.any(norms < ZERO_NORM_EPS):
            raise DegenerateSumError("a cluster's vector sum cancelled during merging")
        reps = sums / norms[:, None]
    return FinchHierarchy(levels=tuple(levels), counts=tuple(counts))
