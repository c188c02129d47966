"""Spherical-embedding segmentation engine.

Partitions per-pixel unit embeddings into segments with spherical
K-Means, trains embeddings with segment-sorting losses under a
two-stage EM scheme, and predicts semantic labels by cosine kNN over a
store of segment prototypes.
"""

from vmfseg.core import (
    ConfigError,
    DegenerateSumError,
    EmbeddingMap,
    IGNORE_LABEL,
    LabelMap,
    Prototype,
    Segmentation,
    ShapeMismatchError,
    TooManyClustersError,
    TrainConfig,
    UnlabeledStoreError,
    VmfSegError,
    ZeroVectorError,
    cosine,
    normalize_map,
)
from vmfseg.kmeans import AugmentedMap, augment, e_step, init_grid, m_step, spherical_kmeans
from vmfseg.align import AlignedSegmentation, PrototypeBank, align, bank_push, prototypes
from vmfseg.loss import LossBatch, LossOutput, posterior, vmf_loss, vmfn_loss
from vmfseg.metrics import BoundaryScore, ConfusionMatrix, boundary_f, miou
from vmfseg.retrieval import FinchHierarchy, PrototypeStore, classify_segment, finch, infer, knn
from vmfseg.train import SyntheticScene, ToyEmbedder, fit, make_dataset, train_step

__version__ = "0.1.0"
