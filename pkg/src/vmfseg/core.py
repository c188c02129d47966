"""Shared data model: embedding maps, segmentations, prototypes, config.

All pixel embeddings live on the unit hypersphere; every type here is
immutable after construction (backing arrays are marked read-only) and
safe to share across threads. Compute is float64 throughout; the file
formats in :mod:`vmfseg.fileio` store float32.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

# Reserved id for unlabeled pixels / unlabeled prototypes, also the
# on-disk sentinel (u16 max).
IGNORE_LABEL = 65535

UNIT_TOL = 1e-6
ZERO_NORM_EPS = 1e-12


class VmfSegError(Exception):
    """Base class for engine errors."""


class ZeroVectorError(VmfSegError):
    """A vector with norm below the zero threshold cannot be normalized."""


class DegenerateSumError(VmfSegError):
    """A segment's vector sum cancelled out; its mean direction is undefined."""


class TooManyClustersError(VmfSegError):
    """Requested more clusters than there are pixels."""


class ShapeMismatchError(VmfSegError):
    """Two maps that must share a shape do not."""


class UnlabeledStoreError(VmfSegError):
    """Retrieval needs semantic labels the prototype store does not carry."""


class ConfigError(VmfSegError):
    """A configuration value violates its contract."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


def normalize_rows(vectors: np.ndarray) -> np.ndarray:
    """Normalize each row to unit length; raises ZeroVectorError on ~zero rows."""
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norms < ZERO_NORM_EPS):
        raise ZeroVectorError(
            f"{int(np.sum(norms < ZERO_NORM_EPS))} vector(s) with norm < {ZERO_NORM_EPS}"
        )
    return vectors / norms


def mean_direction(vectors: np.ndarray) -> np.ndarray:
    """Unit-normalized sum of the given vectors (rows).

    Raises DegenerateSumError when the sum cancels to (near) zero, e.g. for
    an antipodal pair.
    """
    total = np.sum(np.asarray(vectors, dtype=np.float64), axis=0)
    norm = float(np.linalg.norm(total))
    if norm < ZERO_NORM_EPS:
        raise DegenerateSumError(f"vector sum norm {norm:.3e} below {ZERO_NORM_EPS}")
    return total / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two unit vectors, clamped to [-1, 1].

    Callers guarantee unit norm (within 1e-6); the clamp only absorbs
    floating-point overshoot.
    """
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


@dataclass(frozen=True)
class EmbeddingMap:
    """H x W grid of d-dimensional unit vectors."""

    data: np.ndarray  # (H, W, d) float64, rows unit-norm

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"embedding map must be (H, W, d), got {data.shape}")
        h, w, d = data.shape
        if h < 1 or w < 1 or d < 2:
            raise ValueError(f"need H >= 1, W >= 1, d >= 2, got {data.shape}")
        norms = np.linalg.norm(data, axis=-1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            worst = float(np.max(np.abs(norms - 1.0)))
            raise ValueError(f"pixel vectors must be unit norm (worst deviation {worst:.2e})")
        object.__setattr__(self, "data", _freeze(data))

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
        """(H*W, d) row-major view of the pixel vectors."""
        return self.data.reshape(-1, self.dim)


def normalize_map(raw: np.ndarray) -> EmbeddingMap:
    """Project a raw (H, W, d) grid onto the unit sphere, pixel by pixel."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3:
        raise ValueError(f"expected (H, W, d) grid, got shape {raw.shape}")
    return EmbeddingMap(normalize_rows(raw))


@dataclass(frozen=True)
class Segmentation:
    """Hard assignment of every pixel to one segment.

    Segment ids are always the contiguous range 0..num_segments-1; use
    :meth:`from_labels` to compact an arbitrary id grid.
    """

    labels: np.ndarray  # (H, W) int64
    num_segments: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 2:
            raise ValueError(f"labels must be (H, W), got {labels.shape}")
        distinct = np.unique(labels)
        if distinct.size != self.num_segments or distinct[0] != 0 or distinct[-1] != self.num_segments - 1:
            raise ValueError(
                f"segment ids must be exactly 0..{self.num_segments - 1}, got {distinct.size} distinct ids"
            )
        object.__setattr__(self, "labels", _freeze(labels))

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "Segmentation":
        """Build a Segmentation from any non-negative id grid, compacting ids.

        Compaction preserves ascending id order, so relative order of
        surviving segments is stable.
        """
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 2:
            raise ValueError(f"labels must be (H, W), got {labels.shape}")
        if labels.size and labels.min() < 0:
            raise ValueError("segment ids must be non-negative")
        distinct, compact = np.unique(labels, return_inverse=True)
        return cls(labels=compact.reshape(labels.shape), num_segments=int(distinct.size))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def flat(self) -> np.ndarray:
        return self.labels.reshape(-1)


@dataclass(frozen=True)
class LabelMap:
    """H x W grid of semantic class ids; ignore_value marks unlabeled pixels."""

    labels: np.ndarray  # (H, W) int64
    ignore_value: int = IGNORE_LABEL

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 2:
            raise ValueError(f"labels must be (H, W), got {labels.shape}")
        if labels.size and labels.min() < 0:
            raise ValueError("class ids must be non-negative")
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def flat(self) -> np.ndarray:
        return self.labels.reshape(-1)

    def ignore_mask(self) -> np.ndarray:
        return self.labels == self.ignore_value


@dataclass(frozen=True)
class Prototype:
    """Unit mean-direction of one segment, with provenance."""

    vector: np.ndarray  # (d,) float64 unit
    image_id: int
    segment_id: int
    semantic_label: Optional[int] = None
    pixel_count: int = 1

    def __post_init__(self):
        vector = np.asarray(self.vector, dtype=np.float64)
        if vector.ndim != 1:
            raise ValueError(f"prototype vector must be 1-D, got {vector.shape}")
        norm = float(np.linalg.norm(vector))
        if abs(norm - 1.0) > UNIT_TOL:
            raise ValueError(f"prototype vector norm {norm} not within {UNIT_TOL} of 1")
        if self.pixel_count < 1:
            raise ValueError("pixel_count must be >= 1")
        object.__setattr__(self, "vector", _freeze(vector))

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for clustering, losses, and the toy trainer.

    The clustering / loss defaults (k=25, d=32, em_iters=10, kappa=10,
    knn=21, bank_depth=2) follow the reference operating point; optimizer
    settings are tuned for the synthetic desk-scale datasets.
    """

    num_clusters: int = 25
    embedding_dim: int = 32
    kappa: float = 10.0
    em_iters: int = 10
    coord_weight: float = 1.0
    bank_depth: int = 2
    knn: int = 21
    learning_rate: float = 2.0
    iterations: int = 200
    batch_size: int = 4
    seed: int = 0
    hidden_dim: int = 0  # 0 = linear embedder; >0 adds one tanh hidden layer

    def validate(self, allow_degenerate: bool = False) -> "TrainConfig":
        """Check contract-level bounds; raises ConfigError on violation.

        k = 1 is permitted only when allow_degenerate is set (test-only);
        every loss denominator needs an alternative prototype otherwise.
        """
        k_min = 1 if allow_degenerate else 2
        if self.num_clusters < k_min:
            raise ConfigError(f"num_clusters must be >= {k_min}, got {self.num_clusters}")
        if self.embedding_dim < 2:
            raise ConfigError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if not self.kappa > 0:
            raise ConfigError(f"kappa must be positive, got {self.kappa}")
        if self.em_iters < 1:
            raise ConfigError(f"em_iters must be >= 1, got {self.em_iters}")
        if self.coord_weight < 0:
            raise ConfigError(f"coord_weight must be >= 0, got {self.coord_weight}")
        if self.bank_depth < 0:
            raise ConfigError(f"bank_depth must be >= 0, got {self.bank_depth}")
        if self.knn < 1 or self.knn % 2 == 0:
            raise ConfigError(f"knn must be an odd positive integer, got {self.knn}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.hidden_dim < 0:
            raise ConfigError(f"hidden_dim must be >= 0, got {self.hidden_dim}")
        return self
